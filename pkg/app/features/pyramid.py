from dataclasses import dataclass

import torch

from app.data.tiles import Modality
from app.errors import InvalidParameterError


@dataclass(frozen=True, eq=False)
class PyramidLevel:
    divisor: int
    fmap: torch.Tensor  # (B, C, H/divisor, W/divisor)


@dataclass(frozen=True, eq=False)
class FeaturePyramid:
    """
    Уровни от грубого (наибольший делитель) к тонкому (делитель 1).
    """
    levels: tuple[PyramidLevel, ...]
    source: Modality

    def __post_init__(self):
        levels = tuple(self.levels)
        if len(levels) < 2:
            raise InvalidParameterError("a feature pyramid needs at least 2 levels")
        divisors = [lvl.divisor for lvl in levels]
        if any(a <= b for a, b in zip(divisors, divisors[1:])) or divisors[-1] != 1:
            raise InvalidParameterError(f"levels must run coarse to fine ending at divisor 1, got {divisors}")
        for lvl in levels:
            if lvl.fmap.ndim != 4:
                raise InvalidParameterError("pyramid maps must be (B, C, h, w)")
            if not torch.all(torch.isfinite(lvl.fmap)):
                raise InvalidParameterError(f"non-finite values in the divisor-{lvl.divisor} map")
        object.__setattr__(self, "levels", levels)
        object.__setattr__(self, "source", Modality(self.source))

    @property
    def divisors(self) -> tuple[int, ...]:
        return tuple(lvl.divisor for lvl in self.levels)

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(lvl.fmap.shape[1] for lvl in self.levels)

    @property
    def image_size(self) -> tuple[int, int]:
        fine = self.levels[-1].fmap
        return fine.shape[-2], fine.shape[-1]

    def detach(self) -> "FeaturePyramid":
        return FeaturePyramid(tuple(PyramidLevel(l.divisor, l.fmap.detach()) for l in self.levels), self.source)
