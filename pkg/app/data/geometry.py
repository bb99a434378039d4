import math
from dataclasses import dataclass

import numpy as np

from app.errors import InvalidParameterError


@dataclass(frozen=True, eq=False)
class Homography:
    """
    Матрица 3×3 в пиксельных координатах, нормированная так, что m[2][2] = 1.
    """
    m: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.m, dtype=np.float64)
        if m.shape != (3, 3) or not np.all(np.isfinite(m)):
            raise InvalidParameterError("Homography must be a finite 3x3 matrix")
        if abs(m[2, 2]) < 1e-12:
            raise InvalidParameterError("Homography cannot be normalized: m[2][2] is zero")
        m = m / m[2, 2]
        m[2, 2] = 1.0
        if abs(np.linalg.det(m)) <= 1e-9:
            raise InvalidParameterError("Homography is not invertible")
        m.setflags(write=False)
        object.__setattr__(self, "m", m)

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """
        Переводит точки (N, 2) через матрицу; возвращает (N, 2).
        """
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        ph = np.c_[pts, np.ones(len(pts))]
        q = ph @ self.m.T
        return q[:, :2] / q[:, 2:3]

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.m))

    def compose(self, first: "Homography") -> "Homography":
        """
        self ∘ first: сначала first, затем self.
        """
        return Homography(self.m @ first.m)

    def to_list(self) -> list[float]:
        return [float(v) for v in self.m.reshape(-1)]

    @classmethod
    def from_list(cls, values) -> "Homography":
        return cls(np.asarray(values, dtype=np.float64).reshape(3, 3))


def similarity_about_point(theta_deg: float, scale: float, cx: float, cy: float) -> Homography:
    """
    Поворот на θ и изотропный масштаб s вокруг точки (cx, cy).
    """
    th = math.radians(theta_deg)
    c, s = math.cos(th), math.sin(th)
    to_origin = np.array([[1.0, 0.0, -cx], [0.0, 1.0, -cy], [0.0, 0.0, 1.0]])
    rot = np.array([[scale * c, -scale * s, 0.0], [scale * s, scale * c, 0.0], [0.0, 0.0, 1.0]])
    back = np.array([[1.0, 0.0, cx], [0.0, 1.0, cy], [0.0, 0.0, 1.0]])
    return Homography(back @ rot @ to_origin)


def _check_range(name: str, bounds) -> tuple[float, float]:
    lo, hi = float(bounds[0]), float(bounds[1])
    if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi:
        raise InvalidParameterError(f"{name} must satisfy lo <= hi, got [{lo}, {hi}]")
    return lo, hi


def sample_similarity(rng: np.random.Generator,
                      rot_range_deg=(-10.0, 10.0),
                      scale_range=(0.8, 1.0),
                      size: int = 128) -> tuple[Homography, float, float]:
    rot_lo, rot_hi = _check_range("rot_range_deg", rot_range_deg)
    sc_lo, sc_hi = _check_range("scale_range", scale_range)
    if sc_lo <= 0.0:
        raise InvalidParameterError(f"scale_range must be strictly positive, got [{sc_lo}, {sc_hi}]")
    theta = float(rng.uniform(rot_lo, rot_hi))
    scale = float(rng.uniform(sc_lo, sc_hi))
    centre = size / 2.0
    return similarity_about_point(theta, scale, centre, centre), theta, scale


def sample_gt_homography(rng_seed: int,
                         rot_range_deg=(-10.0, 10.0),
                         scale_range=(0.8, 1.0),
                         size: int = 128) -> Homography:
    """
    Случайное подобие вокруг центра тайла, как в протоколе оценки.
    """
    rng = np.random.default_rng(rng_seed)
    homography, _, _ = sample_similarity(rng, rot_range_deg, scale_range, size)
    return homography


def decompose_similarity(h: Homography) -> tuple[float, float]:
    """
    Угол (градусы) и масштаб из верхнего левого блока 2×2 подобия.
    """
    a, b = h.m[0, 0], h.m[1, 0]
    return math.degrees(math.atan2(b, a)), math.hypot(a, b)
