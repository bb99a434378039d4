import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd
import torch
from loguru import logger
from tqdm import tqdm

from app.checkpoints import Stage1Bundle, Stage2Bundle, fresh_stage1, load_stage2, save_stage2
from app.config import RunConfig
from app.data.synthetic import PairSample
from app.data.tiles import tile_to_tensor
from app.diffusion.denoiser import Condition
from app.diffusion.features import extract_sar_features
from app.errors import FreezeViolationError, MissingPrerequisiteError, NonFiniteLossError, UsageError
from app.features.descriptors import Keypoint, TrainingBatch, build_training_batch, info_nce, sample_points
from app.features.model import DescriptorModel
from app.features.optical import freeze_report
from app.keypoints.fast import detect_keypoints
from app.matching.pipeline import match_tiles
from app.seeding import derive_seed

CHECKPOINT_NAME = "descriptors.pt"
LOG_NAME = "descriptors_log.csv"
# потоки сидов аугментации
TRAIN_STREAM, VAL_STREAM = 0, 1


@dataclass
class Stage2Result:
    checkpoint: Path
    log: Path
    bundle: Stage2Bundle
    step_losses: list[float]
    epoch_losses: list[float]
    val_losses: list[Optional[float]]


def split_dataset(dataset: Sequence[PairSample], val_fraction: float,
                  seed: int) -> tuple[list[PairSample], list[PairSample]]:
    n = len(dataset)
    n_val = min(int(round(n * val_fraction)), n - 1)
    order = np.random.default_rng(derive_seed(seed, VAL_STREAM)).permutation(n)
    val_idx = set(order[:n_val].tolist())
    train = [p for i, p in enumerate(dataset) if i not in val_idx]
    val = [p for i, p in enumerate(dataset) if i in val_idx]
    return train, val


def cosine_decay(epochs: int, floor: float):
    """
    Множитель lr по эпохам: от 1 до floor по косинусу.
    """
    def factor(epoch: int) -> float:
        if epochs <= 1:
            return 1.0
        progress = min(epoch, epochs - 1) / (epochs - 1)
        return floor + (1.0 - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))
    return factor


def pair_loss(model: DescriptorModel, stage1: Stage1Bundle, pair: PairSample, batch: TrainingBatch,
              cfg: RunConfig) -> torch.Tensor:
    """
    InfoNCE одной пары: дескрипторы аугментированной оптики против дескрипторов SAR.
    """
    device = next(model.parameters()).device
    with torch.no_grad():
        cond = Condition.from_pair(pair, stage1.net.prompt_encoder, device)
        pyramid = extract_sar_features(stage1, cond, cfg.diffusion.t_star, cfg.diffusion.noise_seed)
    fused_o = model.fuse_optical(tile_to_tensor(batch.optical).to(device))
    fused_s = model.fuse_sar(pyramid)
    pts_o = torch.from_numpy(batch.opt_points).to(device)
    pts_s = torch.from_numpy(batch.sar_points).to(device)
    v_o = model.head(sample_points(fused_o.fmap, pts_o, fused_o.image_size))
    v_s = model.head(sample_points(fused_s.fmap, pts_s, fused_s.image_size))
    return info_nce(v_o, v_s, cfg.descriptor.tau, cfg.descriptor.symmetric)


def _batch(pair: PairSample, keypoints: list[Keypoint], cfg: RunConfig, seed: int) -> Optional[TrainingBatch]:
    return build_training_batch(pair, keypoints, pair.h_gt, cfg.descriptor.n_max,
                                rng=np.random.default_rng(seed),
                                rot_range_deg=cfg.stage2.rot_range_deg, scale_range=cfg.stage2.scale_range,
                                min_correspondences=cfg.descriptor.min_correspondences)


def _validate(bundle: Stage2Bundle, val: Sequence[PairSample], keypoints: dict[str, list[Keypoint]],
              cfg: RunConfig) -> dict[str, Optional[float]]:
    stats = {"val_loss": None, "val_sr": None, "val_ncm": None, "val_rmse": None}
    if not val:
        return stats
    model = bundle.model
    model.eval()
    losses = []
    with torch.no_grad():
        for idx, pair in enumerate(val):
            batch = _batch(pair, keypoints[pair.tile_id], cfg, derive_seed(cfg.seed, VAL_STREAM, idx))
            if batch is not None:
                losses.append(float(pair_loss(model, bundle.stage1, pair, batch, cfg)))
    if losses:
        stats["val_loss"] = float(np.mean(losses))
    report = match_tiles(bundle, val, cfg, out_dir=None, visualize=False).report
    if report is not None:
        stats.update(val_sr=report.sr_percent, val_ncm=report.mean_ncm, val_rmse=report.mean_rmse)
    model.train()
    return stats


def train_stage2(dataset: Sequence[PairSample], stage1: Optional[Stage1Bundle], cfg: RunConfig,
                 out_dir: str | Path, resume: Optional[str | Path] = None) -> Stage2Result:
    """
    Второй этап: AdamW по InfoNCE, одна пара на шаг, косинусный спад lr по эпохам.
    Признаки SAR берутся из замороженного первого этапа.
    """
    if cfg.removes("diffusion"):
        stage1 = fresh_stage1(cfg)
        logger.info(f"Ablation {cfg.ablation}: using the seed-initialized denoiser")
    if stage1 is None:
        raise MissingPrerequisiteError("stage-2 training needs a diffusion checkpoint")
    if not dataset:
        raise UsageError("stage-2 training needs a non-empty dataset")
    missing_gt = [p.tile_id for p in dataset if p.h_gt is None]
    if missing_gt:
        raise UsageError(f"training pairs need ground-truth homographies: {missing_gt[:5]}")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path, log_path = out_dir / CHECKPOINT_NAME, out_dir / LOG_NAME
    device, s2 = cfg.device, cfg.stage2

    stage1.net.to(device).eval()
    stage1.net.requires_grad_(False)
    stage1_digest = stage1.digest
    model = DescriptorModel(cfg, stage1.net.tap_channels).to(device)
    coarse_digest = freeze_report(model.optical)
    trainable = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.AdamW(trainable, lr=s2.lr, weight_decay=s2.weight_decay)
    scheduler = torch.optim.lr_scheduler.LambdaLR(optimizer, cosine_decay(s2.epochs, s2.lr_floor))
    history = {"step_losses": [], "epoch_losses": [], "val_losses": [], "log": []}
    start_epoch = 0
    bundle = Stage2Bundle(model=model, stage1=stage1, cfg=cfg, path=ckpt_path)

    if resume is not None:
        previous = load_stage2(resume, stage1_path=stage1.path if stage1.trained else None, device=device)
        model.load_state_dict(previous.model.state_dict())
        if previous.state.get("optimizer"):
            optimizer.load_state_dict(previous.state["optimizer"])
        if previous.state.get("scheduler"):
            scheduler.load_state_dict(previous.state["scheduler"])
        history = previous.state.get("history") or history
        start_epoch = previous.epoch
        bundle.epoch = start_epoch
        logger.info(f"Resuming stage-2 training from epoch {start_epoch} ({resume})")

    train, val = split_dataset(dataset, s2.val_fraction, cfg.seed)
    keypoints = {p.tile_id: detect_keypoints(p.optical, cfg.fast, cfg.pc) for p in dataset}
    logger.info(f"Stage 2: {len(train)} train / {len(val)} val pairs, epochs {start_epoch + 1}..{s2.epochs}, "
                f"lr {s2.lr}, ablation {cfg.ablation}")

    model.train()
    global_step = len(history["step_losses"])
    for epoch in range(start_epoch, s2.epochs):
        started = time.perf_counter()
        order = np.random.default_rng(derive_seed(cfg.seed, TRAIN_STREAM, epoch)).permutation(len(train))
        losses, skipped = [], 0
        for idx in tqdm(order, desc=f"stage2 epoch {epoch + 1}", leave=False):
            pair = train[idx]
            batch = _batch(pair, keypoints[pair.tile_id], cfg, derive_seed(cfg.seed, TRAIN_STREAM, epoch, int(idx)))
            if batch is None:
                skipped += 1
                continue
            loss = pair_loss(model, stage1, pair, batch, cfg)
            if not torch.isfinite(loss):
                raise NonFiniteLossError(
                    f"non-finite InfoNCE at epoch {epoch + 1}, step {global_step} (pair {pair.tile_id}); "
                    f"last good checkpoint: {ckpt_path if ckpt_path.is_file() else 'none'}")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))
            logger.debug(f"stage2 step {global_step}: loss {losses[-1]:.6f}")
            global_step += 1
        if not losses:
            raise UsageError(f"epoch {epoch + 1}: every training pair was skipped (too few correspondences)")

        lr = optimizer.param_groups[0]["lr"]
        scheduler.step()
        bundle.epoch = epoch + 1
        stats = _validate(bundle, val, keypoints, cfg)
        beta_opt, beta_sar = model.beta_vectors()
        epoch_loss = float(np.mean(losses))
        history["step_losses"].extend(losses)
        history["epoch_losses"].append(epoch_loss)
        history["val_losses"].append(stats["val_loss"])
        history["log"].append({"epoch": epoch + 1, "loss": epoch_loss, **stats,
                               "beta_opt": " ".join(f"{b:.4f}" for b in beta_opt),
                               "beta_sar": " ".join(f"{b:.4f}" for b in beta_sar),
                               "lr": lr, "skipped": skipped, "seconds": time.perf_counter() - started})
        save_stage2(ckpt_path, bundle, optimizer, scheduler, history)
        pd.DataFrame(history["log"]).to_csv(log_path, index=False)
        logger.info(f"Stage 2 epoch {epoch + 1}/{s2.epochs}: loss {epoch_loss:.5f}, val {stats}")

    if stage1.digest != stage1_digest:
        raise FreezeViolationError("diffusion parameters changed during stage-2 training")
    if freeze_report(model.optical) != coarse_digest:
        raise FreezeViolationError("coarse optical encoder changed during stage-2 training")
    return Stage2Result(checkpoint=ckpt_path, log=log_path, bundle=bundle,
                        step_losses=list(history["step_losses"]), epoch_losses=list(history["epoch_losses"]),
                        val_losses=list(history["val_losses"]))
