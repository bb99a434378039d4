import hashlib
import json
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any, Literal, Optional

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.errors import InvalidParameterError, UsageError


load_dotenv()
DATABASE_URL = os.getenv("DATABASE_URL", "sqlite:///runs.db")
DEVICE = os.getenv("DEVICE", "cpu")
LOG_FILE = os.getenv("LOG_FILE", "info.log")
LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO")


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SynthConfig(_Section):
    """
    Генерация синтетических пар оптика / псевдо-SAR.
    """
    n_pairs: int = Field(default=200, ge=0, description="Количество пар")
    size: int = Field(default=128, ge=64, multiple_of=16, description="Сторона тайла, px")
    rot_range_deg: tuple[float, float] = Field(default=(-10.0, 10.0))
    scale_range: tuple[float, float] = Field(default=(0.8, 1.0))
    speckle_looks: float = Field(default=4.0, gt=0, description="Параметр формы гамма-спекла")
    blur_sigma: float = Field(default=1.0, ge=0)


class ScheduleConfig(_Section):
    T: int = Field(default=200, ge=1)
    beta_start: float = Field(default=1e-4, gt=0, lt=1)
    beta_end: float = Field(default=0.02, gt=0, lt=1)


class DiffusionConfig(_Section):
    """
    Мини-денойзер: замороженная база + обучаемая управляющая ветка.
    """
    base_channels: int = Field(default=32, ge=4)
    prompt_dim: int = Field(default=64, ge=1, description="Размер эмбеддинга промпта E")
    time_dim: int = Field(default=128, ge=8)
    init_seed: int = Field(default=0, description="Сид инициализации замороженной базы")
    train_base: bool = Field(default=False, description="Обучать базу вместе с веткой")
    t_star: int = Field(default=50, ge=1, description="Шаг t* при извлечении признаков SAR")
    noise_seed: int = Field(default=0)


class Stage1Config(_Section):
    epochs: int = Field(default=50, ge=1)
    batch_size: int = Field(default=2, ge=1)
    lr: float = Field(default=1e-5, gt=0)
    weight_decay: float = Field(default=0.01, ge=0)
    divergence_factor: float = Field(default=10.0, gt=1)
    divergence_patience: int = Field(default=3, ge=1)


class OpticalConfig(_Section):
    channels: int = Field(default=64, ge=1, description="Общая ширина C после проекций")
    coarse_channels: int = Field(default=96, ge=1)
    fine_channels: tuple[int, int] = Field(default=(32, 64))
    coarse_seed: int = Field(default=0)
    feature_cache: Optional[str] = Field(default=None, description="Каталог внешних грубых признаков")


class FusionConfig(_Section):
    unified_divisor: int = Field(default=4, ge=1)
    reduction: int = Field(default=8, ge=1)
    spatial_kernel: int = Field(default=7, ge=1)


class DescriptorConfig(_Section):
    dim: int = Field(default=128, ge=1)
    tau: float = Field(default=0.07, gt=0)
    symmetric: bool = Field(default=False)
    n_max: int = Field(default=256, ge=1)
    min_correspondences: int = Field(default=16, ge=1)


class Stage2Config(_Section):
    epochs: int = Field(default=20, ge=1)
    lr: float = Field(default=1e-4, gt=0)
    weight_decay: float = Field(default=0.01, ge=0)
    lr_floor: float = Field(default=0.1, gt=0, le=1, description="Доля lr в конце косинусного спада")
    rot_range_deg: tuple[float, float] = Field(default=(-10.0, 10.0))
    scale_range: tuple[float, float] = Field(default=(0.8, 1.0))
    val_fraction: float = Field(default=0.1, ge=0, lt=1)


class PcConfig(_Section):
    """
    Банк лог-Габор фильтров для фазовой конгруэнтности.
    """
    n_scales: int = Field(default=4, ge=1)
    n_orientations: int = Field(default=6, ge=2)
    min_wavelength: float = Field(default=3.0, gt=0)
    scale_multiplier: float = Field(default=2.1, gt=0)
    sigma_onf: float = Field(default=0.55, gt=0)
    noise_k: float = Field(default=2.0, gt=0)


class FastConfig(_Section):
    detector: Literal["pc_fast", "sift"] = "pc_fast"
    threshold: float = Field(default=0.08, gt=0, lt=1)
    nms_radius: int = Field(default=4, ge=1)
    max_kp: int = Field(default=1000, ge=1)


class EvalConfig(_Section):
    eps_px: float = Field(default=3.0, gt=0)
    ransac_threshold_px: float = Field(default=3.0, gt=0)
    ransac_iters: int = Field(default=2000, ge=1)
    ransac_seed: int = Field(default=0)
    min_ncm: int = Field(default=10, ge=1)
    failure_rmse: float = Field(default=20.0)


# убираемые компоненты: diffusion (обученный первый этап), coarse (уровень 1/16), msaa (MSAA и CBAM)
ABLATION_REMOVES = {
    "full": frozenset(),
    "no_vfm": frozenset({"coarse"}),
    "no_msaa": frozenset({"msaa"}),
    "untrained_diffusion": frozenset({"diffusion"}),
    "baseline": frozenset({"diffusion", "coarse", "msaa"}),
}
ABLATIONS = tuple(ABLATION_REMOVES)
Ablation = Literal["full", "no_vfm", "no_msaa", "untrained_diffusion", "baseline"]


class RunConfig(_Section):
    """
    Полная конфигурация запуска. Сериализуется рядом с результатами.
    """
    seed: int = 0
    out_dir: str = "runs/latest"
    data_dir: str = "data/synth"
    workers: int = Field(default=1, ge=1)
    device: str = DEVICE
    ablation: Ablation = "full"

    synth: SynthConfig = SynthConfig()
    schedule: ScheduleConfig = ScheduleConfig()
    diffusion: DiffusionConfig = DiffusionConfig()
    stage1: Stage1Config = Stage1Config()
    optical: OpticalConfig = OpticalConfig()
    fusion: FusionConfig = FusionConfig()
    descriptor: DescriptorConfig = DescriptorConfig()
    stage2: Stage2Config = Stage2Config()
    pc: PcConfig = PcConfig()
    fast: FastConfig = FastConfig()
    eval: EvalConfig = EvalConfig()

    @model_validator(mode="after")
    def _check_ranges(self):
        if self.schedule.beta_start > self.schedule.beta_end:
            raise ValueError("schedule.beta_start must not exceed schedule.beta_end")
        if self.diffusion.t_star > self.schedule.T:
            raise ValueError("diffusion.t_star must lie in [1, schedule.T]")
        return self

    def removes(self, component: str) -> bool:
        return component in ABLATION_REMOVES[self.ablation]


# Секции, от которых зависит форма и смысл весов в чекпоинтах
RESOLVED_CONFIG_NAME = "run_config.json"

MODEL_SECTIONS = ("schedule", "diffusion", "optical", "fusion", "descriptor")
# поля этих секций, не влияющие на веса (параметры инференса и обучения)
INFERENCE_FIELDS = {
    "diffusion": ("t_star", "noise_seed"),
    "optical": ("feature_cache",),
    "descriptor": ("tau", "symmetric", "n_max", "min_correspondences"),
}


def deep_merge(base: dict, override: dict) -> dict:
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_run_config(path: Optional[str | Path] = None,
                    overrides: Optional[dict[str, Any]] = None) -> RunConfig:
    """
    Собирает RunConfig: значения по умолчанию < файл (TOML или JSON) < флаги.
    """
    data: dict = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise UsageError(f"Config file not found: {path}")
        if path.suffix == ".json":
            data = json.loads(path.read_text(encoding="utf-8"))
        else:
            with path.open("rb") as fh:
                data = tomllib.load(fh)
    if overrides:
        data = deep_merge(data, overrides)
    try:
        return RunConfig.model_validate(data)
    except ValueError as ex:
        raise InvalidParameterError(f"Invalid configuration: {ex}") from ex


def config_digest(cfg: RunConfig, sections: Optional[tuple[str, ...]] = None) -> str:
    """
    SHA-256 канонического JSON выбранных секций (или всей конфигурации).
    """
    payload = cfg.model_dump(mode="json")
    if sections is not None:
        payload = {name: payload[name] for name in sections}
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def write_resolved_config(cfg: RunConfig, out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / RESOLVED_CONFIG_NAME
    path.write_text(cfg.model_dump_json(indent=2), encoding="utf-8")
    return path


def model_digest(cfg: RunConfig) -> str:
    """
    Дайджест полей, задающих форму и смысл весов; match сверяет его с чекпоинтом.
    """
    payload = cfg.model_dump(mode="json")
    shaped = {}
    for name in MODEL_SECTIONS:
        skip = INFERENCE_FIELDS.get(name, ())
        shaped[name] = {k: v for k, v in payload[name].items() if k not in skip}
    shaped["ablation"] = payload["ablation"]
    text = json.dumps(shaped, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()
