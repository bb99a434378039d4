from datetime import datetime
from typing import Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator


class PairManifest(BaseModel):
    """
    JSON-манифест одной пары в каталоге датасета.
    """
    tile_id: str = Field(description="Идентификатор пары")
    optical_path: str = Field(description="Путь к оптическому тайлу относительно каталога датасета")
    sar_path: str = Field(description="Путь к SAR тайлу относительно каталога датасета")
    h_gt: Optional[list[float]] = Field(None, min_length=9, max_length=9,
                                        description="Матрица 3×3 (оптика → SAR) построчно")
    land_use: Optional[list[float]] = Field(None, min_length=7, max_length=7,
                                            description="Доли площади семи классов")
    prompt: str = Field(default="", description="Текст промпта")
    seed: Optional[int] = Field(None, description="Сид генерации (для синтетики)")
    size: int = Field(ge=64, description="Сторона тайла, px")


class PairMetrics(BaseModel):
    tile_id: str
    n_matches: int = Field(ge=0)
    ncm: int = Field(ge=0, description="Число верных соответствий")
    rmse: float = Field(ge=0, description="RMSE верных соответствий, px")
    success: bool
    excluded: bool

    @model_validator(mode="after")
    def _failure_rule(self):
        # неуспешная пара всегда исключается из средних, успешная никогда
        if self.success == self.excluded:
            raise ValueError("excluded must be the negation of success")
        return self


class EvalReport(BaseModel):
    """
    Сводный отчёт: SR по всем парам, средние NCM и RMSE только по успешным.
    """
    method: str = Field(default="full", description="Название метода / конфигурации")
    sr_percent: float = Field(ge=0, le=100)
    mean_ncm: Optional[float] = Field(None, description="None, если успешных пар нет")
    mean_rmse: Optional[float] = Field(None, description="None, если успешных пар нет")
    n_pairs: int = Field(ge=1)
    eps_px: float = Field(gt=0)
    eps_px_note: str = Field(default="per-match correctness radius is a declared convention")
    per_pair: list[PairMetrics]
    config_digest: str
    timings: dict[str, float] = Field(default_factory=dict, description="Время по стадиям, с")
    created_at: datetime = Field(default_factory=datetime.now)


class MatchRecord(BaseModel):
    opt_index: int = Field(ge=0)
    sar_index: int = Field(ge=0)
    similarity: float = Field(ge=-1.0 - 1e-6, le=1.0 + 1e-6)


class MatchDump(BaseModel):
    """
    Ключевые точки и соответствия одной пары; по ним evaluate пересчитывает метрики.
    """
    tile_id: str
    keypoints_opt: list[tuple[float, float, float]]
    keypoints_sar: list[tuple[float, float, float]]
    matches: list[MatchRecord]
    h_gt: Optional[list[float]] = Field(None, min_length=9, max_length=9)
    h_est: Optional[list[float]] = Field(None, min_length=9, max_length=9)
    n_inliers: Optional[int] = None


class CheckpointSidecar(BaseModel):
    """
    JSON рядом с бинарным чекпоинтом: конфигурация, сид и дайджесты.
    """
    stage: str
    format_version: int
    seed: int
    config: dict
    model_digest: str
    frozen_digest: str
    parameter_digest: str
    parent_digest: Optional[str] = None
    epoch: int = Field(ge=0)
    created_at: datetime = Field(default_factory=datetime.now)

    model_config = ConfigDict(protected_namespaces=())


class RunRecord(BaseModel):
    id: str
    command: str
    status: str
    config_digest: str
    out_dir: str
    started_at: datetime
    finished_at: Optional[datetime] = None

    model_config = ConfigDict(from_attributes=True)
