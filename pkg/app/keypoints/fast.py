from pathlib import Path
from typing import Sequence

import cv2
import numpy as np
import pandas as pd

from app.config import FastConfig, PcConfig
from app.data.tiles import ImageTile
from app.errors import InvalidParameterError
from app.features.descriptors import Keypoint
from app.keypoints.phase_congruency import PcMap, compute_pc_map

# окружность Брезенхэма радиуса 3, по часовой стрелке от верхней точки
CIRCLE = np.array([
    (0, -3), (1, -3), (2, -2), (3, -1), (3, 0), (3, 1), (2, 2), (1, 3),
    (0, 3), (-1, 3), (-2, 2), (-3, 1), (-3, 0), (-3, -1), (-2, -2), (-1, -3),
])
RADIUS = 3
ARC_LENGTH = 9


def _arc_members(mask: np.ndarray, arc: int) -> np.ndarray:
    """
    mask: (16, ...); True у точек окружности, входящих в циклическую серию из >= arc подряд идущих True.
    """
    n = mask.shape[0]
    wrapped = np.concatenate([mask, mask[:arc - 1]], axis=0)
    members = np.zeros(mask.shape, dtype=bool)
    for start in range(n):
        window = np.all(wrapped[start:start + arc], axis=0)
        for k in range(start, start + arc):
            members[k % n] |= window
    return members


def _arc_score(ring_excess: np.ndarray, arc: int) -> tuple[np.ndarray, np.ndarray]:
    # отклик: сумма превышений порога только по точкам найденной дуги
    members = _arc_members(ring_excess > 0, arc)
    return members.any(axis=0), np.where(members, ring_excess, 0.0).sum(axis=0)


def segment_test(values: np.ndarray, x: int, y: int, threshold: float,
                 arc: int = ARC_LENGTH) -> tuple[bool, float]:
    """
    Проверка одного пикселя; вне допустимой области (ближе 3 px к краю) не угол.
    """
    h, w = values.shape
    if not (RADIUS <= x < w - RADIUS and RADIUS <= y < h - RADIUS):
        return False, 0.0
    centre = values[y, x]
    ring = np.array([values[y + dy, x + dx] for dx, dy in CIRCLE])
    for excess in (ring - centre - threshold, centre - threshold - ring):
        found, score = _arc_score(excess[:, None], arc)
        if found[0]:
            return True, float(score[0])
    return False, 0.0


def corner_scores(values: np.ndarray, threshold: float, arc: int = ARC_LENGTH) -> np.ndarray:
    """
    Векторизованный сегментный тест по всему изображению; 0 там, где угла нет.
    """
    values = np.asarray(values, dtype=np.float64)
    h, w = values.shape
    scores = np.zeros((h, w))
    if h <= 2 * RADIUS or w <= 2 * RADIUS:
        return scores
    centre = values[RADIUS:h - RADIUS, RADIUS:w - RADIUS]
    ring = np.stack([values[RADIUS + dy:h - RADIUS + dy, RADIUS + dx:w - RADIUS + dx] for dx, dy in CIRCLE])
    bright_excess = ring - centre - threshold
    dark_excess = centre - threshold - ring
    bright_corner, bright_score = _arc_score(bright_excess, arc)
    dark_corner, dark_score = _arc_score(dark_excess, arc)
    inner = np.where(bright_corner, bright_score, np.where(dark_corner, dark_score, 0.0))
    scores[RADIUS:h - RADIUS, RADIUS:w - RADIUS] = inner
    return scores


def non_max_suppression(scores: np.ndarray, radius: int, max_kp: int) -> list[Keypoint]:
    """
    Жадно по убыванию отклика; кандидат ближе radius к принятой точке отбрасывается.
    """
    ys, xs = np.nonzero(scores > 0)
    if len(xs) == 0:
        return []
    vals = scores[ys, xs]
    order = np.lexsort((xs, ys, -vals))
    h, w = scores.shape
    suppressed = np.zeros((h, w), dtype=bool)
    offsets = [(dx, dy) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)
               if dx * dx + dy * dy < radius * radius]
    kept = []
    for i in order:
        x, y = int(xs[i]), int(ys[i])
        if suppressed[y, x]:
            continue
        kept.append(Keypoint(float(x), float(y), float(vals[i])))
        if len(kept) >= max_kp:
            break
        for dx, dy in offsets:
            xx, yy = x + dx, y + dy
            if 0 <= xx < w and 0 <= yy < h:
                suppressed[yy, xx] = True
    return kept


def detect_fast(pc: PcMap | np.ndarray, threshold: float = 0.08, nms_radius: int = 4,
                max_kp: int = 1000) -> list[Keypoint]:
    if not 0.0 < threshold < 1.0:
        raise InvalidParameterError(f"threshold must lie in (0, 1), got {threshold}")
    if nms_radius < 1:
        raise InvalidParameterError(f"nms_radius must be >= 1, got {nms_radius}")
    values = pc.values if isinstance(pc, PcMap) else np.asarray(pc, dtype=np.float64)
    return non_max_suppression(corner_scores(values, threshold), nms_radius, max_kp)


def detect_sift(tile: ImageTile, max_kp: int = 1000) -> list[Keypoint]:
    """
    SIFT OpenCV по яркости для сравнения детекторов.
    """
    gray = np.round(tile.luminance() * 255.0).astype(np.uint8)
    sift = cv2.SIFT_create(nfeatures=max_kp)
    found = sift.detect(gray, None)
    seen, keypoints = set(), []
    for kp in sorted(found, key=lambda k: (-k.response, k.pt)):
        key = (round(kp.pt[0], 2), round(kp.pt[1], 2))
        if key in seen:
            continue
        seen.add(key)
        keypoints.append(Keypoint(float(kp.pt[0]), float(kp.pt[1]), max(float(kp.response), 0.0)))
    return keypoints[:max_kp]


def detect_keypoints(tile: ImageTile, fast_cfg: FastConfig, pc_cfg: PcConfig) -> list[Keypoint]:
    if fast_cfg.detector == "sift":
        return detect_sift(tile, fast_cfg.max_kp)
    pc = compute_pc_map(tile, pc_cfg)
    return detect_fast(pc, fast_cfg.threshold, fast_cfg.nms_radius, fast_cfg.max_kp)


def dump_keypoints(keypoints: Sequence[Keypoint], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame([(kp.x, kp.y, kp.score) for kp in keypoints], columns=["x", "y", "score"])
    frame.to_csv(path, index=False)
    return path
