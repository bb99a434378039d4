from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import torch
from loguru import logger

from app.config import RunConfig, model_digest
from app.diffusion.denoiser import DenoiserNet
from app.diffusion.schedule import NoiseSchedule, build_schedule
from app.digests import parameter_digest
from app.errors import ConfigMismatchError, MissingPrerequisiteError
from app.features.model import DescriptorModel
from app.features.optical import freeze_report
from app.schemas import CheckpointSidecar


CHECKPOINT_FORMAT = "optsar-matcher-checkpoint"
FORMAT_VERSION = 1

__all__ = ["Stage1Bundle", "Stage2Bundle", "parameter_digest", "fresh_stage1", "save_stage1", "load_stage1",
           "save_stage2", "load_stage2", "sidecar_path"]


@dataclass
class Stage1Bundle:
    net: DenoiserNet
    schedule: NoiseSchedule
    cfg: RunConfig
    trained: bool = True
    epoch: int = 0
    path: Optional[Path] = None
    state: dict[str, Any] = field(default_factory=dict)

    @property
    def digest(self) -> str:
        return parameter_digest(self.net)


@dataclass
class Stage2Bundle:
    model: DescriptorModel
    stage1: Stage1Bundle
    cfg: RunConfig
    epoch: int = 0
    path: Optional[Path] = None
    state: dict[str, Any] = field(default_factory=dict)


def sidecar_path(path: str | Path) -> Path:
    return Path(path).with_suffix(".json")


def fresh_stage1(cfg: RunConfig) -> Stage1Bundle:
    """
    Денойзер в состоянии инициализации по сиду (для абляции без первого этапа).
    """
    schedule = build_schedule(cfg.schedule.T, cfg.schedule.beta_start, cfg.schedule.beta_end)
    return Stage1Bundle(net=DenoiserNet.from_config(cfg.diffusion), schedule=schedule, cfg=cfg, trained=False)


def _write_sidecar(path: Path, stage: str, cfg: RunConfig, frozen_digest: str, digest: str,
                   epoch: int, parent_digest: Optional[str] = None) -> None:
    sidecar = CheckpointSidecar(stage=stage, format_version=FORMAT_VERSION, seed=cfg.seed,
                                config=cfg.model_dump(mode="json"),
                                model_digest=model_digest(cfg),
                                frozen_digest=frozen_digest, parameter_digest=digest,
                                parent_digest=parent_digest, epoch=epoch)
    sidecar_path(path).write_text(sidecar.model_dump_json(indent=2), encoding="utf-8")


def _atomic_save(payload: dict, path: Path) -> None:
    # последний удачный чекпоинт не затирается недописанным файлом
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def _read(path: str | Path, stage: str) -> dict:
    path = Path(path)
    if not path.is_file():
        raise MissingPrerequisiteError(f"{stage} checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise ConfigMismatchError(f"{path} is not a matcher checkpoint")
    if payload.get("version") != FORMAT_VERSION:
        raise ConfigMismatchError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    if payload.get("stage") != stage:
        raise ConfigMismatchError(f"{path} holds a {payload.get('stage')} checkpoint, expected {stage}")
    return payload


def save_stage1(path: str | Path, bundle: Stage1Bundle, optimizer: Optional[torch.optim.Optimizer] = None,
                history: Optional[dict] = None) -> Path:
    path = Path(path)
    net, cfg = bundle.net, bundle.cfg
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": FORMAT_VERSION,
        "stage": "diffusion",
        "state_dict": net.state_dict(),
        "schedule": {"T": bundle.schedule.T, "beta": bundle.schedule.beta.tolist()},
        "prompt_table": net.prompt_encoder.table.detach().cpu().clone(),
        "config": cfg.model_dump(mode="json"),
        "model_digest": model_digest(cfg),
        "seed": cfg.seed,
        "epoch": bundle.epoch,
        "trained": bundle.trained,
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "history": history or {},
    }
    _atomic_save(payload, path)
    _write_sidecar(path, "diffusion", cfg, parameter_digest(net.base), parameter_digest(net), bundle.epoch)
    logger.info(f"Saved diffusion checkpoint (epoch {bundle.epoch}) to {path}")
    return path


def load_stage1(path: str | Path, device: str = "cpu") -> Stage1Bundle:
    payload = _read(path, "diffusion")
    cfg = RunConfig.model_validate(payload["config"])
    net = DenoiserNet.from_config(cfg.diffusion)
    net.load_state_dict(payload["state_dict"])
    net.to(device)
    schedule = build_schedule(cfg.schedule.T, cfg.schedule.beta_start, cfg.schedule.beta_end)
    bundle = Stage1Bundle(net=net, schedule=schedule, cfg=cfg, trained=bool(payload["trained"]),
                          epoch=int(payload["epoch"]), path=Path(path), state=payload)
    logger.debug(f"Loaded diffusion checkpoint {path} (epoch {bundle.epoch})")
    return bundle


def save_stage2(path: str | Path, bundle: Stage2Bundle, optimizer: Optional[torch.optim.Optimizer] = None,
                scheduler=None, history: Optional[dict] = None) -> Path:
    path = Path(path)
    model, cfg = bundle.model, bundle.cfg
    stage1_digest = bundle.stage1.digest
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": FORMAT_VERSION,
        "stage": "descriptors",
        "state_dict": model.state_dict(),
        "config": cfg.model_dump(mode="json"),
        "model_digest": model_digest(cfg),
        "seed": cfg.seed,
        "epoch": bundle.epoch,
        "ablation": cfg.ablation,
        "stage1_digest": stage1_digest,
        "stage1_path": str(bundle.stage1.path) if bundle.stage1.path else None,
        "stage1_trained": bundle.stage1.trained,
        "coarse_seed": cfg.optical.coarse_seed,
        "coarse_digest": freeze_report(model.optical),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "scheduler": scheduler.state_dict() if scheduler is not None else None,
        "history": history or {},
    }
    _atomic_save(payload, path)
    _write_sidecar(path, "descriptors", cfg, payload["coarse_digest"], parameter_digest(model), bundle.epoch,
                   parent_digest=stage1_digest)
    logger.info(f"Saved descriptor checkpoint (epoch {bundle.epoch}) to {path}")
    return path


def load_stage2(path: str | Path, stage1_path: Optional[str | Path] = None, device: str = "cpu") -> Stage2Bundle:
    """
    Загружает второй этап вместе с первым; дайджест первого этапа должен совпасть.
    """
    payload = _read(path, "descriptors")
    cfg = RunConfig.model_validate(payload["config"])
    if payload.get("stage1_trained", True):
        stage1_path = stage1_path or payload.get("stage1_path")
        if stage1_path is None:
            raise MissingPrerequisiteError(f"{path} does not reference a diffusion checkpoint")
        stage1 = load_stage1(stage1_path, device=device)
    else:
        stage1 = fresh_stage1(cfg)
        stage1.net.to(device)
    if stage1.digest != payload["stage1_digest"]:
        raise ConfigMismatchError(
            f"diffusion checkpoint digest {stage1.digest[:12]} differs from the one {path} was trained on "
            f"({payload['stage1_digest'][:12]})")

    model = DescriptorModel(cfg, stage1.net.tap_channels)
    model.load_state_dict(payload["state_dict"])
    model.to(device)
    if freeze_report(model.optical) != payload["coarse_digest"]:
        raise ConfigMismatchError(f"{path}: coarse encoder digest does not match the stored one")
    return Stage2Bundle(model=model, stage1=stage1, cfg=cfg, epoch=int(payload["epoch"]),
                        path=Path(path), state=payload)
