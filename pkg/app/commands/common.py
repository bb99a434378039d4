import argparse
from pathlib import Path
from typing import Any, Optional

from loguru import logger

from app.config import ABLATIONS, RunConfig, config_digest, deep_merge, load_run_config, write_resolved_config
from app.errors import UsageError
from app.registry import start_run


def add_common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="TOML or JSON run configuration")
    parser.add_argument("--seed", type=int, help="Master seed")
    parser.add_argument("--out", help="Output directory")
    parser.add_argument("--workers", type=int, help="Parallel pair workers")
    parser.add_argument("--device", help="torch device, e.g. cpu or cuda")
    parser.add_argument("--eps-px", type=float, dest="eps_px", help="Correct-match radius, px")
    parser.add_argument("--tau", type=float, help="InfoNCE temperature")
    parser.add_argument("--t-star", type=int, dest="t_star", help="Diffusion timestep for SAR features")
    parser.add_argument("--ablation", choices=ABLATIONS)


def flag_overrides(args: argparse.Namespace) -> dict[str, Any]:
    """
    Переводит флаги командной строки в дерево переопределений RunConfig.
    """
    mapping = {
        "seed": ("seed",),
        "out": ("out_dir",),
        "workers": ("workers",),
        "device": ("device",),
        "ablation": ("ablation",),
        "data": ("data_dir",),
        "eps_px": ("eval", "eps_px"),
        "tau": ("descriptor", "tau"),
        "t_star": ("diffusion", "t_star"),
        "n_pairs": ("synth", "n_pairs"),
        "size": ("synth", "size"),
    }
    overrides: dict[str, Any] = {}
    for attr, keys in mapping.items():
        value = getattr(args, attr, None)
        if value is None:
            continue
        node = overrides
        for key in keys[:-1]:
            node = node.setdefault(key, {})
        node[keys[-1]] = value
    epochs = getattr(args, "epochs", None)
    if epochs is not None:
        overrides.setdefault(args.epochs_section, {})["epochs"] = epochs
    return overrides


def resolve_config(args: argparse.Namespace, base: Optional[dict] = None) -> RunConfig:
    """
    Значения по умолчанию < base (конфигурация чекпоинта) < файл --config < флаги.
    """
    overrides: dict[str, Any] = {}
    if args.config:
        overrides = load_run_config(args.config).model_dump(mode="json", exclude_unset=True)
    return load_run_config(None, deep_merge(deep_merge(base or {}, overrides), flag_overrides(args)))


def begin_run(run_id: str, command: str, cfg: RunConfig, out_dir: str | Path) -> Path:
    """
    Пишет итоговую конфигурацию рядом с результатами и регистрирует запуск.
    """
    out_dir = Path(out_dir)
    try:
        path = write_resolved_config(cfg, out_dir)
    except OSError as ex:
        raise UsageError(f"Output directory {out_dir} is not writable: {ex}") from ex
    start_run(command, config_digest(cfg), str(out_dir), run_id=run_id)
    logger.info(f"{command}: run {run_id}, output {out_dir}, config {path}")
    return out_dir
