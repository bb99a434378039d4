from dataclasses import dataclass, field

import numpy as np
import torch
from loguru import logger
from torch import nn

from app.errors import InvalidParameterError


LAND_USE_CLASSES = ("farmland", "city", "village", "water", "forest", "road", "others")
N_CLASSES = len(LAND_USE_CLASSES)

PROMPT_TEMPLATE = "A SAR image of a region containing {classes}"
INCLUSION_THRESHOLD = 0.05
DEFAULT_TABLE_SEED = 0


@dataclass(frozen=True, eq=False)
class PromptSpec:
    """
    Текст промпта, нормированная гистограмма классов и её эмбеддинг.
    """
    text: str
    class_vector: np.ndarray
    embedding: np.ndarray
    fallback: bool = field(default=False)


def default_prompt_table(dim: int = 64, seed: int = DEFAULT_TABLE_SEED) -> np.ndarray:
    """
    Начальная таблица 7×E; её же копирует обучаемый PromptEncoder.
    """
    rng = np.random.default_rng(seed)
    return rng.standard_normal((N_CLASSES, dim)) / np.sqrt(dim)


def normalize_histogram(land_use) -> tuple[np.ndarray, bool]:
    """
    Проверяет гистограмму и перенормирует её. Нулевая → one-hot «others».
    """
    hist = np.asarray(land_use, dtype=np.float64).reshape(-1)
    if hist.shape != (N_CLASSES,):
        raise InvalidParameterError(f"land_use must have {N_CLASSES} entries, got {hist.shape[0]}")
    if not np.all(np.isfinite(hist)) or np.any(hist < 0):
        raise InvalidParameterError("land_use entries must be finite and non-negative")
    total = hist.sum()
    if total == 0.0:
        logger.warning("Empty land-use histogram, falling back to 'others'")
        fallback = np.zeros(N_CLASSES)
        fallback[LAND_USE_CLASSES.index("others")] = 1.0
        return fallback, True
    if abs(total - 1.0) > 1e-3:
        raise InvalidParameterError(f"land_use must sum to 1 ± 1e-3, got {total:.6f}")
    return hist / total, False


def prompt_text(class_vector: np.ndarray) -> str:
    # по убыванию площади, при равенстве в порядке списка классов
    order = sorted(range(N_CLASSES), key=lambda k: (-class_vector[k], k))
    names = [LAND_USE_CLASSES[k] for k in order if class_vector[k] >= INCLUSION_THRESHOLD]
    return PROMPT_TEMPLATE.format(classes=", ".join(names))


def _embed(class_vector: np.ndarray, table: np.ndarray) -> np.ndarray:
    table = np.asarray(table, dtype=np.float64)
    if table.ndim != 2 or table.shape[0] != N_CLASSES:
        raise InvalidParameterError(f"Prompt table must have shape ({N_CLASSES}, E), got {table.shape}")
    if not np.all(np.isfinite(table)):
        raise InvalidParameterError("Prompt table must be finite")
    return np.asarray(class_vector, dtype=np.float64) @ table


def embed_prompt(spec: PromptSpec, table: np.ndarray) -> np.ndarray:
    """
    embedding = class_vectorᵀ · table, линейно по гистограмме.
    """
    return _embed(spec.class_vector, table)


def build_prompt(land_use, table: np.ndarray | None = None) -> PromptSpec:
    class_vector, fallback = normalize_histogram(land_use)
    if table is None:
        table = default_prompt_table()
    return PromptSpec(text=prompt_text(class_vector),
                      class_vector=class_vector,
                      embedding=_embed(class_vector, table),
                      fallback=fallback)


class PromptEncoder(nn.Module):
    """
    Обучаемая таблица классов 7×E; обновляется только на первом этапе.
    """

    def __init__(self, dim: int = 64, seed: int = DEFAULT_TABLE_SEED):
        super().__init__()
        table = torch.from_numpy(default_prompt_table(dim, seed)).float()
        self.table = nn.Parameter(table)

    def forward(self, class_vectors: torch.Tensor) -> torch.Tensor:
        return class_vectors.to(self.table.dtype) @ self.table

    def numpy_table(self) -> np.ndarray:
        return self.table.detach().cpu().double().numpy()
