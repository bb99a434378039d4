from typing import Optional, Sequence

import numpy as np
from loguru import logger

from app.data.geometry import Homography
from app.errors import EstimationFailedError, InvalidParameterError
from app.features.descriptors import Keypoint, keypoints_to_array
from app.matching.matcher import MatchSet

MIN_SAMPLE = 4
# минимальная площадь треугольника из выборки в нормированных координатах
COLLINEAR_EPS = 1e-3


def _normalize(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """
    Перенос центра в ноль и масштаб до среднего расстояния √2.
    """
    centre = points.mean(axis=0)
    dist = np.sqrt(((points - centre) ** 2).sum(axis=1)).mean() + 1e-12
    s = np.sqrt(2.0) / dist
    t = np.array([[s, 0.0, -s * centre[0]], [0.0, s, -s * centre[1]], [0.0, 0.0, 1.0]])
    return (points - centre) * s, t


def _dlt(src: np.ndarray, dst: np.ndarray) -> Optional[np.ndarray]:
    n = len(src)
    x, y, u, v = src[:, 0], src[:, 1], dst[:, 0], dst[:, 1]
    zeros, ones = np.zeros(n), np.ones(n)
    a = np.zeros((2 * n, 9))
    a[0::2] = np.c_[x, y, ones, zeros, zeros, zeros, -u * x, -u * y, -u]
    a[1::2] = np.c_[zeros, zeros, zeros, -x, -y, -ones, v * x, v * y, v]
    if np.linalg.matrix_rank(a) < 8:
        return None
    _, _, vt = np.linalg.svd(a)
    h = vt[-1].reshape(3, 3)
    if abs(h[2, 2]) < 1e-12:
        return None
    return h / h[2, 2]


def fit_homography(src: np.ndarray, dst: np.ndarray) -> Optional[np.ndarray]:
    """
    Нормированный DLT: наименьшие квадраты (алгебраические) по всем переданным точкам.
    """
    src_n, t_src = _normalize(src)
    dst_n, t_dst = _normalize(dst)
    h_n = _dlt(src_n, dst_n)
    if h_n is None:
        return None
    h = np.linalg.inv(t_dst) @ h_n @ t_src
    if abs(h[2, 2]) < 1e-12 or not np.all(np.isfinite(h)):
        return None
    return h / h[2, 2]


def _noncollinear(points: np.ndarray) -> bool:
    pts, _ = _normalize(points)
    for i, j, k in ((0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)):
        d1, d2 = pts[j] - pts[i], pts[k] - pts[i]
        if 0.5 * abs(d1[0] * d2[1] - d1[1] * d2[0]) <= COLLINEAR_EPS:
            return False
    return True


def transfer_errors(h: np.ndarray, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    ph = np.c_[src, np.ones(len(src))] @ h.T
    w = ph[:, 2:3]
    with np.errstate(divide="ignore", invalid="ignore"):
        proj = ph[:, :2] / w
    err = np.sqrt(((proj - dst) ** 2).sum(axis=1))
    return np.where(np.isfinite(err), err, np.inf)


def ransac_points(src: np.ndarray, dst: np.ndarray, threshold_px: float = 3.0, max_iters: int = 2000,
                  seed: int = 0) -> tuple[Homography, np.ndarray]:
    """
    RANSAC по 4-точечным гипотезам DLT: лучшая по числу инлайеров (при равенстве по сумме
    ошибок), затем уточнение МНК по инлайерам до стабилизации набора.
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    if src.shape != dst.shape:
        raise InvalidParameterError("source and destination point sets must align")
    n = len(src)
    if n < MIN_SAMPLE:
        raise EstimationFailedError(f"need at least {MIN_SAMPLE} matches, got {n}")
    if threshold_px <= 0 or max_iters < 1:
        raise InvalidParameterError("threshold_px must be positive and max_iters >= 1")

    rng = np.random.default_rng(seed)
    best_h, best_mask, best_key = None, None, None
    for _ in range(max_iters):
        idx = rng.choice(n, size=MIN_SAMPLE, replace=False)
        if not (_noncollinear(src[idx]) and _noncollinear(dst[idx])):
            continue
        h = fit_homography(src[idx], dst[idx])
        if h is None:
            continue
        err = transfer_errors(h, src, dst)
        mask = err < threshold_px
        key = (int(mask.sum()), -float(np.sum(np.minimum(err, threshold_px))))
        if best_key is None or key > best_key:
            best_h, best_mask, best_key = h, mask, key
            if key[0] == n:
                break

    if best_h is None or best_mask.sum() < MIN_SAMPLE:
        raise EstimationFailedError(f"all {max_iters} RANSAC hypotheses were degenerate or unsupported")

    # уточнение по инлайерам
    for _ in range(10):
        refined = fit_homography(src[best_mask], dst[best_mask])
        if refined is None:
            break
        mask = transfer_errors(refined, src, dst) < threshold_px
        if mask.sum() < MIN_SAMPLE:
            break
        best_h = refined
        if np.array_equal(mask, best_mask):
            break
        best_mask = mask

    try:
        model = Homography(best_h)
    except InvalidParameterError as ex:
        raise EstimationFailedError(f"estimated homography is singular: {ex}") from ex
    logger.debug(f"RANSAC: {int(best_mask.sum())}/{n} inliers")
    return model, best_mask


def estimate_homography(matches: MatchSet, kp_o: Sequence[Keypoint] | np.ndarray, kp_s: Sequence[Keypoint] | np.ndarray,
                        ransac_threshold_px: float = 3.0, max_iters: int = 2000,
                        seed: int = 0) -> tuple[Homography, np.ndarray]:
    """
    Гомография оптика → SAR по соответствиям; маска инлайеров выровнена с matches.
    """
    pts_o = kp_o if isinstance(kp_o, np.ndarray) else keypoints_to_array(kp_o)
    pts_s = kp_s if isinstance(kp_s, np.ndarray) else keypoints_to_array(kp_s)
    if len(matches) < MIN_SAMPLE:
        raise EstimationFailedError(f"need at least {MIN_SAMPLE} matches, got {len(matches)}")
    opt_idx, sar_idx = matches.indices()
    return ransac_points(pts_o[opt_idx], pts_s[sar_idx], ransac_threshold_px, max_iters, seed)
