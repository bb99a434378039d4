"""
Настольный прогон целиком: 200 пар обучения и 50 отложенных 128×128,
configs/desk.toml. Запуск: pytest --runslow.
"""
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from app.checkpoints import fresh_stage1
from app.config import load_run_config
from app.data.synthetic import generate_synthetic_pair
from app.data.tiles import tile_to_tensor
from app.diffusion.denoiser import Condition
from app.diffusion.features import extract_sar_features
from app.diffusion.losses import diffusion_loss
from app.diffusion.schedule import forward_diffuse, sample_chain
from app.diffusion.trainer import stack_pairs, train_stage1
from app.features.trainer import train_stage2
from app.matching.pipeline import match_tiles
from app.seeding import derive_seed, torch_generator

pytestmark = pytest.mark.slow

DESK_CONFIG = Path(__file__).resolve().parent.parent / "configs" / "desk.toml"
N_TRAIN, N_HELD_OUT, SIZE = 200, 50, 128
EARLY_EPOCHS = 5
EVAL_PAIRS, EVAL_BATCH = 32, 4


def _with(cfg, **sections):
    update = {name: getattr(cfg, name).model_copy(update=fields) for name, fields in sections.items()}
    return cfg.model_copy(update=update)


@torch.no_grad()
def _fixed_loss(net, schedule, pairs) -> float:
    # одни и те же пары, шаги t и шум для любой сети
    x0, sar, classes = stack_pairs(pairs)
    was_training = net.training
    net.eval()
    losses = []
    for k, start in enumerate(range(0, len(pairs), EVAL_BATCH)):
        idx = slice(start, start + EVAL_BATCH)
        cond = Condition(sar=sar[idx], prompt_embedding=net.prompt_encoder(classes[idx]))
        losses.append(float(diffusion_loss(net, x0[idx], cond, schedule, torch_generator(777, k))))
    net.train(was_training)
    return float(np.mean(losses))


def _pooled(pyramid) -> torch.Tensor:
    return torch.cat([level.fmap.mean(dim=(-2, -1)) for level in pyramid.levels], dim=1)[0]


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    cfg = load_run_config(DESK_CONFIG, {"out_dir": str(root), "data_dir": str(root / "data"), "device": "cpu"})
    train = [generate_synthetic_pair(derive_seed(cfg.seed, 0, i), size=SIZE, tile_id=f"train_{i:03d}")
             for i in range(N_TRAIN)]
    held_out = [generate_synthetic_pair(derive_seed(cfg.seed, 1, i), size=SIZE, tile_id=f"held_{i:02d}")
                for i in range(N_HELD_OUT)]
    return SimpleNamespace(cfg=cfg, root=root, train=train, held_out=held_out)


@pytest.fixture(scope="module")
def stage1(desk):
    cfg = desk.cfg
    fresh = fresh_stage1(cfg)
    eval_pairs = desk.train[:EVAL_PAIRS]
    initial = _fixed_loss(fresh.net, fresh.schedule, eval_pairs)

    early = train_stage1(desk.train, _with(cfg, stage1={"epochs": EARLY_EPOCHS}), desk.root / "s1")
    after_early = _fixed_loss(early.bundle.net, early.bundle.schedule, eval_pairs)
    result = train_stage1(desk.train, cfg, desk.root / "s1", resume=early.checkpoint)
    return SimpleNamespace(result=result, initial=initial, after_early=after_early)


@pytest.fixture(scope="module")
def stage2(desk, stage1):
    return train_stage2(desk.train, stage1.result.bundle, desk.cfg, desk.root / "s2")


def test_stage1_loss_drops_within_five_epochs(stage1):
    assert stage1.after_early < 0.9 * stage1.initial
    assert len(stage1.result.epoch_losses) == stage1.result.bundle.cfg.stage1.epochs >= 20


def test_stage2_validation_loss_halves(desk, stage2):
    val = [v for v in stage2.val_losses if v is not None]
    assert len(val) == desk.cfg.stage2.epochs >= 10
    assert val[-1] < 0.5 * val[0]


def test_held_out_matching_reaches_desk_targets(desk, stage2):
    run = match_tiles(stage2.bundle, desk.held_out, desk.cfg, out_dir=desk.root / "match",
                      workers=desk.cfg.workers, visualize=False)
    report = run.report
    assert report.eps_px == 3.0 and report.n_pairs == N_HELD_OUT
    assert report.sr_percent >= 90.0
    assert report.mean_ncm is not None and report.mean_ncm >= 30.0
    assert report.mean_rmse is not None and report.mean_rmse <= 3.0


def test_untrained_diffusion_scores_lower(desk, stage2):
    full = match_tiles(stage2.bundle, desk.held_out, desk.cfg, visualize=False).report
    cfg = desk.cfg.model_copy(update={"ablation": "untrained_diffusion"})
    ablated = train_stage2(desk.train, None, cfg, desk.root / "s2_untrained")
    report = match_tiles(ablated.bundle, desk.held_out, cfg, visualize=False).report
    assert report.method == "untrained_diffusion"
    assert report.sr_percent < full.sr_percent


@torch.no_grad()
def test_reverse_chain_recovers_the_paired_optical(desk, stage1):
    bundle = stage1.result.bundle
    net = bundle.net.eval()
    closer = 0
    for start in range(0, N_HELD_OUT, 10):
        batch = desk.held_out[start:start + 10]
        _, sar, classes = stack_pairs(batch)
        cond = Condition(sar=sar, prompt_embedding=net.prompt_encoder(classes))
        samples = sample_chain(net, cond, bundle.schedule, seed=derive_seed(5, start))
        for offset, sample in enumerate(samples):
            i = start + offset
            paired = tile_to_tensor(desk.held_out[i].optical)[0]
            unrelated = tile_to_tensor(desk.held_out[(i + 1) % N_HELD_OUT].optical)[0]
            closer += int(F.mse_loss(sample, paired) < F.mse_loss(sample, unrelated))
    assert closer >= 0.9 * N_HELD_OUT


@torch.no_grad()
def test_sar_features_agree_with_paired_optical(desk, stage1):
    bundle = stage1.result.bundle
    net = bundle.net.eval()
    t_star = desk.cfg.diffusion.t_star
    sar_feats, opt_feats = [], []
    for i, pair in enumerate(desk.held_out):
        cond = Condition.from_pair(pair, net.prompt_encoder)
        sar_feats.append(_pooled(extract_sar_features(bundle, cond, t_star=t_star)))
        # признаки восстановления оптики: тот же денойзер без условия на зашумлённой оптике
        x0 = tile_to_tensor(pair.optical) * 2.0 - 1.0
        noise = torch.randn(x0.shape, generator=torch_generator(9, i))
        _, taps = net(forward_diffuse(x0, t_star, bundle.schedule, noise), t_star, return_taps=True)
        opt_feats.append(torch.cat([tap.mean(dim=(-2, -1)) for tap in taps], dim=1)[0])
    sar = torch.stack(sar_feats)
    opt = torch.stack(opt_feats)
    sar = F.normalize(sar - sar.mean(dim=0), dim=1)
    opt = F.normalize(opt - opt.mean(dim=0), dim=1)
    paired = (sar * opt).sum(dim=1).mean()
    mismatched = (sar * opt.roll(1, dims=0)).sum(dim=1).mean()
    assert float(paired) > float(mismatched)
