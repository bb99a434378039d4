from pathlib import Path
from typing import Optional, Sequence

import cv2
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from app.data.tiles import ImageTile  # noqa: E402
from app.features.descriptors import Keypoint, keypoints_to_array  # noqa: E402
from app.matching.matcher import MatchSet  # noqa: E402
from app.schemas import EvalReport  # noqa: E402

GREEN = (0, 200, 0)
RED = (0, 0, 220)


def _to_bgr(tile: ImageTile) -> np.ndarray:
    pixels = np.round(np.asarray(tile.pixels) * 255.0).astype(np.uint8)
    if pixels.shape[2] == 1:
        return cv2.cvtColor(pixels[:, :, 0], cv2.COLOR_GRAY2BGR)
    return cv2.cvtColor(pixels, cv2.COLOR_RGB2BGR)


def draw_matches(optical: ImageTile, sar: ImageTile, matches: MatchSet, kp_o: Sequence[Keypoint],
                 kp_s: Sequence[Keypoint], path: str | Path, correct: Optional[np.ndarray] = None,
                 only_correct: bool = True) -> Path:
    """
    Оптика слева, SAR справа, верные соответствия зелёными линиями.
    Без маски correct рисуются все соответствия.
    """
    left, right = _to_bgr(optical), _to_bgr(sar)
    canvas = np.concatenate([left, right], axis=1)
    offset = left.shape[1]
    pts_o, pts_s = keypoints_to_array(kp_o), keypoints_to_array(kp_s)
    for k, m in enumerate(matches):
        ok = True if correct is None else bool(correct[k])
        if only_correct and not ok:
            continue
        p = tuple(int(round(v)) for v in pts_o[m.opt_index])
        q = (int(round(pts_s[m.sar_index][0])) + offset, int(round(pts_s[m.sar_index][1])))
        color = GREEN if ok else RED
        cv2.line(canvas, p, q, color, 1, cv2.LINE_AA)
        cv2.circle(canvas, p, 2, color, -1)
        cv2.circle(canvas, q, 2, color, -1)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), canvas):
        raise OSError(f"Could not write match overlay to {path}")
    return path


def plot_rmse_histogram(reports: Sequence[EvalReport], path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    bins = np.linspace(0.0, 20.0, 41)
    for report in reports:
        values = [m.rmse for m in report.per_pair]
        ax.hist(values, bins=bins, alpha=0.6, label=report.method)
    ax.set_xlabel("RMSE, px")
    ax.set_ylabel("pairs")
    ax.legend()
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_sr_bar(reports: Sequence[EvalReport], path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(reports) + 2), 4))
    names = [r.method for r in reports]
    ax.bar(range(len(reports)), [r.sr_percent for r in reports], color="tab:green")
    ax.set_xticks(range(len(reports)), names, rotation=30, ha="right")
    ax.set_ylim(0, 100)
    ax.set_ylabel("SR, %")
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
