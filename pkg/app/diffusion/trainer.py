import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd
import torch
from loguru import logger
from tqdm import tqdm

from app.checkpoints import Stage1Bundle, load_stage1, save_stage1
from app.config import RunConfig
from app.data.synthetic import PairSample
from app.data.tiles import tile_to_tensor
from app.diffusion.denoiser import Condition, DenoiserNet
from app.diffusion.losses import diffusion_loss
from app.diffusion.schedule import build_schedule
from app.digests import parameter_digest
from app.errors import (DivergenceError, FreezeViolationError, InvalidParameterError, NonFiniteLossError,
                        UsageError)
from app.seeding import derive_seed, torch_generator

CHECKPOINT_NAME = "diffusion.pt"
LOG_NAME = "diffusion_log.csv"


@dataclass
class Stage1Result:
    checkpoint: Path
    log: Path
    bundle: Stage1Bundle
    step_losses: list[float]
    epoch_losses: list[float]


def stack_pairs(dataset: Sequence[PairSample], device: str = "cpu") -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """
    Оптика (N, 3, H, W), SAR (N, 1, H, W) и гистограммы классов (N, 7).
    """
    x0 = torch.cat([tile_to_tensor(p.optical) for p in dataset]).to(device)
    sar = torch.cat([tile_to_tensor(p.sar) for p in dataset]).to(device)
    classes = torch.from_numpy(np.stack([p.prompt.class_vector for p in dataset]).astype(np.float32)).to(device)
    return x0, sar, classes


def _check_divergence(epoch_losses: list[float], strikes: int, factor: float, patience: int) -> int:
    if len(epoch_losses) < 2:
        return 0
    strikes = strikes + 1 if epoch_losses[-1] > factor * epoch_losses[0] else 0
    if strikes >= patience:
        raise DivergenceError(
            f"diffusion loss exceeded {factor}x the first-epoch mean ({epoch_losses[0]:.4g}) for {strikes} "
            f"consecutive epochs; epoch means: {', '.join(f'{v:.4g}' for v in epoch_losses)}")
    return strikes


def train_stage1(dataset: Sequence[PairSample], cfg: RunConfig, out_dir: str | Path,
                 resume: Optional[str | Path] = None) -> Stage1Result:
    """
    Первый этап: AdamW по MSE шума, база денойзера заморожена.
    Сид шага (seed, глобальный шаг), порядок эпохи (seed, эпоха).
    """
    if not dataset:
        raise UsageError("stage-1 training needs a non-empty dataset")
    sizes = {p.size for p in dataset}
    if len(sizes) != 1:
        raise InvalidParameterError(f"all training pairs must share one tile size, got {sorted(sizes)}")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path, log_path = out_dir / CHECKPOINT_NAME, out_dir / LOG_NAME
    device, s1 = cfg.device, cfg.stage1

    schedule = build_schedule(cfg.schedule.T, cfg.schedule.beta_start, cfg.schedule.beta_end)
    net = DenoiserNet.from_config(cfg.diffusion).to(device)
    frozen_before = parameter_digest(net.frozen_parameters())
    optimizer = torch.optim.AdamW(net.trainable_parameters(), lr=s1.lr, weight_decay=s1.weight_decay)
    history = {"step_losses": [], "epoch_losses": [], "strikes": 0, "log": []}
    start_epoch = 0

    if resume is not None:
        previous = load_stage1(resume, device=device)
        net.load_state_dict(previous.net.state_dict())
        if previous.state.get("optimizer"):
            optimizer.load_state_dict(previous.state["optimizer"])
        history = previous.state.get("history") or history
        start_epoch = previous.epoch
        logger.info(f"Resuming stage-1 training from epoch {start_epoch} ({resume})")
        if parameter_digest(net.frozen_parameters()) != frozen_before:
            raise FreezeViolationError("resumed checkpoint carries a modified frozen base")

    bundle = Stage1Bundle(net=net, schedule=schedule, cfg=cfg, trained=True, epoch=start_epoch, path=ckpt_path)
    x0, sar, classes = stack_pairs(dataset, device)
    n = len(dataset)
    global_step = len(history["step_losses"])
    logger.info(f"Stage 1: {n} pairs, epochs {start_epoch + 1}..{s1.epochs}, batch {s1.batch_size}, lr {s1.lr}")

    net.train()
    for epoch in range(start_epoch, s1.epochs):
        started = time.perf_counter()
        order = np.random.default_rng(derive_seed(cfg.seed, epoch)).permutation(n)
        losses = []
        for start in tqdm(range(0, n, s1.batch_size), desc=f"stage1 epoch {epoch + 1}", leave=False):
            idx = torch.from_numpy(order[start:start + s1.batch_size]).to(x0.device)
            cond = Condition(sar=sar[idx], prompt_embedding=net.prompt_encoder(classes[idx]))
            loss = diffusion_loss(net, x0[idx], cond, schedule, torch_generator(cfg.seed, global_step))
            if not torch.isfinite(loss):
                raise NonFiniteLossError(f"non-finite diffusion loss at epoch {epoch + 1}, step {global_step}")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))
            logger.debug(f"stage1 step {global_step}: loss {losses[-1]:.6f}")
            global_step += 1

        epoch_loss = float(np.mean(losses))
        history["step_losses"].extend(losses)
        history["epoch_losses"].append(epoch_loss)
        history["strikes"] = _check_divergence(history["epoch_losses"], history["strikes"],
                                               s1.divergence_factor, s1.divergence_patience)
        history["log"].append({"epoch": epoch + 1, "loss": epoch_loss, "min_step_loss": float(np.min(losses)),
                               "max_step_loss": float(np.max(losses)), "lr": optimizer.param_groups[0]["lr"],
                               "seconds": time.perf_counter() - started})
        bundle.epoch = epoch + 1
        save_stage1(ckpt_path, bundle, optimizer, history)
        pd.DataFrame(history["log"]).to_csv(log_path, index=False)
        logger.info(f"Stage 1 epoch {epoch + 1}/{s1.epochs}: loss {epoch_loss:.5f}")

    if parameter_digest(net.frozen_parameters()) != frozen_before:
        raise FreezeViolationError("frozen denoiser base changed during stage-1 training")
    return Stage1Result(checkpoint=ckpt_path, log=log_path, bundle=bundle,
                        step_losses=list(history["step_losses"]), epoch_losses=list(history["epoch_losses"]))
