from dataclasses import dataclass

import numpy as np

from app.errors import InvalidParameterError
from app.features.descriptors import DescriptorSet


@dataclass(frozen=True)
class Match:
    opt_index: int
    sar_index: int
    similarity: float


@dataclass(frozen=True, eq=False)
class MatchSet:
    """
    Взаимно-ближайшие пары, по убыванию косинусного сходства.
    provenance: идентификаторы тайлов (оптика, SAR).
    """
    pairs: tuple[Match, ...]
    provenance: tuple[str, str] = ("", "")

    def __post_init__(self):
        pairs = tuple(self.pairs)
        if len({m.opt_index for m in pairs}) != len(pairs) or len({m.sar_index for m in pairs}) != len(pairs):
            raise InvalidParameterError("match indices must be unique on each side")
        object.__setattr__(self, "pairs", pairs)

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def indices(self) -> tuple[np.ndarray, np.ndarray]:
        opt = np.array([m.opt_index for m in self.pairs], dtype=np.int64)
        sar = np.array([m.sar_index for m in self.pairs], dtype=np.int64)
        return opt, sar

    def subset(self, mask: np.ndarray) -> "MatchSet":
        return MatchSet(tuple(m for m, keep in zip(self.pairs, mask) if keep), self.provenance)


def similarity_matrix(d_o: DescriptorSet | np.ndarray, d_s: DescriptorSet | np.ndarray) -> np.ndarray:
    v_o = d_o.numpy() if isinstance(d_o, DescriptorSet) else np.asarray(d_o, dtype=np.float64)
    v_s = d_s.numpy() if isinstance(d_s, DescriptorSet) else np.asarray(d_s, dtype=np.float64)
    if v_o.shape[1] != v_s.shape[1]:
        raise InvalidParameterError(f"descriptor dimensions differ: {v_o.shape[1]} vs {v_s.shape[1]}")
    v_o = v_o / np.maximum(np.linalg.norm(v_o, axis=1, keepdims=True), 1e-12)
    v_s = v_s / np.maximum(np.linalg.norm(v_s, axis=1, keepdims=True), 1e-12)
    return v_o @ v_s.T


def mutual_nn_match(d_o: DescriptorSet | np.ndarray, d_s: DescriptorSet | np.ndarray,
                    provenance: tuple[str, str] = ("", "")) -> MatchSet:
    """
    Пара (i, j) остаётся, если j ближайший к i и i ближайший к j.
    При равенстве сходств побеждает меньший индекс.
    """
    if len(d_o) == 0 or len(d_s) == 0:
        return MatchSet((), provenance)
    sim = similarity_matrix(d_o, d_s)
    best_s = sim.argmax(axis=1)
    best_o = sim.argmax(axis=0)
    opt_idx = np.nonzero(best_o[best_s] == np.arange(sim.shape[0]))[0]
    pairs = [Match(int(i), int(best_s[i]), float(np.clip(sim[i, best_s[i]], -1.0, 1.0))) for i in opt_idx]
    pairs.sort(key=lambda m: (-m.similarity, m.opt_index))
    return MatchSet(tuple(pairs), provenance)
