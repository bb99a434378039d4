from dataclasses import dataclass
from typing import Optional, Sequence

import cv2
import numpy as np
import torch
import torch.nn.functional as F
from loguru import logger
from torch import nn

from app.data.geometry import Homography, sample_similarity
from app.data.synthetic import PairSample
from app.data.tiles import ImageTile, Modality
from app.errors import InvalidParameterError
from app.features.fusion import FusedMap


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    score: float = 0.0

    def __post_init__(self):
        if not (np.isfinite(self.x) and np.isfinite(self.y)) or self.score < 0:
            raise InvalidParameterError(f"invalid keypoint ({self.x}, {self.y}, score={self.score})")

    def inside(self, height: int, width: int) -> bool:
        return 0.0 <= self.x < width and 0.0 <= self.y < height


def keypoints_to_array(keypoints: Sequence[Keypoint]) -> np.ndarray:
    if not keypoints:
        return np.zeros((0, 2))
    return np.array([[kp.x, kp.y] for kp in keypoints], dtype=np.float64)


@dataclass(frozen=True, eq=False)
class DescriptorSet:
    """
    n×d дескрипторов единичной нормы, выровненных с ключевыми точками.
    """
    vectors: torch.Tensor
    keypoints: tuple[Keypoint, ...]
    modality: Modality

    def __post_init__(self):
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.keypoints):
            raise InvalidParameterError("descriptor rows must align with keypoints")
        if self.vectors.shape[0]:
            norms = self.vectors.detach().double().norm(dim=1)
            if torch.any((norms - 1.0).abs() > 1e-5):
                raise InvalidParameterError("descriptor rows must have unit L2 norm")
        object.__setattr__(self, "keypoints", tuple(self.keypoints))
        object.__setattr__(self, "modality", Modality(self.modality))

    def __len__(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def numpy(self) -> np.ndarray:
        return self.vectors.detach().cpu().double().numpy()


class DescriptorHead(nn.Module):
    def __init__(self, channels: int = 64, dim: int = 128):
        super().__init__()
        self.proj = nn.Linear(channels, dim)
        self.dim = dim

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.proj(features), dim=-1)


def sample_points(fmap: torch.Tensor, points_xy: torch.Tensor, image_size: tuple[int, int]) -> torch.Tensor:
    """
    Билинейная выборка карты (1, C, h, w) в пиксельных точках тайла (n, 2) → (n, C).
    Центр пикселя x тайла отвечает нормированной координате (x + 0.5) / W · 2 − 1.
    """
    h_img, w_img = image_size
    grid = torch.empty_like(points_xy, dtype=fmap.dtype)
    grid[:, 0] = (points_xy[:, 0].to(fmap.dtype) + 0.5) / w_img * 2.0 - 1.0
    grid[:, 1] = (points_xy[:, 1].to(fmap.dtype) + 0.5) / h_img * 2.0 - 1.0
    sampled = F.grid_sample(fmap[:1], grid.view(1, 1, -1, 2), mode="bilinear",
                            padding_mode="border", align_corners=False)
    return sampled[0, :, 0, :].transpose(0, 1)


def sample_descriptors(fused: FusedMap, keypoints: Sequence[Keypoint], descriptor_dim: int,
                       head: Optional[DescriptorHead] = None,
                       modality: Modality | str = Modality.OPTICAL) -> DescriptorSet:
    """
    Дескрипторы длины descriptor_dim в точках ключевых точек. head: обученная проекция
    C → descriptor_dim; без неё выборка карты только нормируется, и C должно равняться descriptor_dim.
    """
    channels = fused.fmap.shape[1]
    if head is not None and head.dim != descriptor_dim:
        raise InvalidParameterError(f"descriptor head yields {head.dim} dims, expected {descriptor_dim}")
    if head is None and channels != descriptor_dim:
        raise InvalidParameterError(
            f"fused map has {channels} channels; a head is needed for {descriptor_dim}-dim descriptors")
    h_img, w_img = fused.image_size
    kept = [kp for kp in keypoints if kp.inside(h_img, w_img)]
    dropped = len(keypoints) - len(kept)
    if dropped:
        logger.warning(f"Dropped {dropped} out-of-bounds keypoints of {len(keypoints)}")
    if not kept:
        return DescriptorSet(torch.zeros((0, descriptor_dim), dtype=fused.fmap.dtype), (), modality)
    points = torch.from_numpy(keypoints_to_array(kept)).to(fused.fmap.device)
    sampled = sample_points(fused.fmap, points, (h_img, w_img))
    vectors = head(sampled) if head is not None else F.normalize(sampled, dim=-1)
    return DescriptorSet(vectors, tuple(kept), modality)


def info_nce(d_o, d_s, tau: float, symmetric: bool = False) -> torch.Tensor:
    """
    Средний −log softmax(sim/τ) по диагонали; негативы: остальные строки той же пары.
    """
    v_o = d_o.vectors if isinstance(d_o, DescriptorSet) else d_o
    v_s = d_s.vectors if isinstance(d_s, DescriptorSet) else d_s
    if tau <= 0:
        raise InvalidParameterError(f"tau must be positive, got {tau}")
    if v_o.ndim != 2 or v_o.shape != v_s.shape or v_o.shape[0] < 1:
        raise InvalidParameterError(
            f"descriptor sets must be row-aligned and non-empty, got {tuple(v_o.shape)} and {tuple(v_s.shape)}")
    v_o = F.normalize(v_o.double(), dim=1)
    v_s = F.normalize(v_s.double(), dim=1)
    logits = v_o @ v_s.T / tau
    target = torch.arange(v_o.shape[0], device=logits.device)
    loss = F.cross_entropy(logits, target)
    if symmetric:
        loss = 0.5 * (loss + F.cross_entropy(logits.T, target))
    return loss


@dataclass(frozen=True, eq=False)
class TrainingBatch:
    optical: ImageTile
    opt_points: np.ndarray
    sar_points: np.ndarray
    scores: np.ndarray
    augmentation: Homography

    def __len__(self) -> int:
        return len(self.opt_points)


def warp_tile(tile: ImageTile, h: Homography) -> ImageTile:
    warped = cv2.warpPerspective(np.array(tile.pixels), h.m, (tile.width, tile.height),
                                 flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REFLECT)
    if warped.ndim == 2:
        warped = warped[:, :, None]
    return ImageTile(np.clip(warped, 0.0, 1.0), tile.modality, tile.tile_id)


def _inside(points: np.ndarray, height: int, width: int) -> np.ndarray:
    return (points[:, 0] >= 0) & (points[:, 0] < width) & (points[:, 1] >= 0) & (points[:, 1] < height)


def build_training_batch(pair: PairSample, keypoints_opt: Sequence[Keypoint], h_gt: Homography, n_max: int,
                         rng: Optional[np.random.Generator] = None, rot_range_deg=(-10.0, 10.0),
                         scale_range=(0.8, 1.0), min_correspondences: int = 16,
                         augmentation: Optional[Homography] = None) -> Optional[TrainingBatch]:
    """
    Аугментирует оптику поворотом и масштабом вокруг центра и переносит точки:
    в кадр аугментированной оптики через аугментацию, в кадр SAR через h_gt.
    """
    if n_max < 1:
        raise InvalidParameterError(f"n_max must be >= 1, got {n_max}")
    height, width = pair.size
    if augmentation is None:
        rng = rng if rng is not None else np.random.default_rng(0)
        augmentation, _, _ = sample_similarity(rng, rot_range_deg, scale_range, height)

    points = keypoints_to_array(keypoints_opt)
    scores = np.array([kp.score for kp in keypoints_opt], dtype=np.float64)
    opt_points = augmentation.apply(points) if len(points) else points
    sar_points = h_gt.apply(points) if len(points) else points
    keep = _inside(opt_points, height, width) & _inside(sar_points, height, width) if len(points) else np.zeros(0, bool)

    opt_points, sar_points, scores = opt_points[keep], sar_points[keep], scores[keep]
    order = np.argsort(-scores, kind="stable")[:n_max]
    if len(order) < min_correspondences:
        logger.warning(f"Pair {pair.tile_id}: only {len(order)} correspondences survive, skipping")
        return None
    return TrainingBatch(optical=warp_tile(pair.optical, augmentation), opt_points=opt_points[order],
                         sar_points=sar_points[order], scores=scores[order], augmentation=augmentation)
