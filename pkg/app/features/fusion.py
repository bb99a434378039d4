from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from app.errors import InvalidParameterError
from app.features.pyramid import FeaturePyramid


@dataclass(frozen=True, eq=False)
class FusedMap:
    """
    Слитая карта на единой шкале и реализованные веса шкал β.
    """
    fmap: torch.Tensor  # (B, C, H/u, W/u)
    beta: torch.Tensor  # (N,)
    unified_divisor: int

    def __post_init__(self):
        beta = self.beta.detach()
        if beta.ndim != 1 or torch.any(beta <= 0) or abs(float(beta.sum()) - 1.0) > 1e-6:
            raise InvalidParameterError("scale weights must be positive and sum to 1")

    @property
    def image_size(self) -> tuple[int, int]:
        h, w = self.fmap.shape[-2:]
        return h * self.unified_divisor, w * self.unified_divisor


def _identity_init(conv: nn.Conv2d) -> None:
    nn.init.zeros_(conv.weight)
    nn.init.zeros_(conv.bias)
    k = conv.kernel_size[0] // 2
    with torch.no_grad():
        for c in range(min(conv.in_channels, conv.out_channels)):
            conv.weight[c, c, k, k] = 1.0


class MultiScaleAggregation(nn.Module):
    """
    Отдельная голова 3×3 на каждый уровень, билинейное приведение к единой шкале
    и взвешенная сумма с весами softmax(w).
    """

    def __init__(self, in_channels: Sequence[int], channels: int = 64, unified_divisor: int = 4,
                 identity_init: bool = False):
        super().__init__()
        self.in_channels = tuple(in_channels)
        self.channels = channels
        self.unified_divisor = unified_divisor
        self.heads = nn.ModuleList(nn.Conv2d(c, channels, 3, padding=1) for c in self.in_channels)
        if identity_init:
            for head in self.heads:
                _identity_init(head)
        self.logits = nn.Parameter(torch.zeros(len(self.in_channels)))

    def forward(self, pyramid: FeaturePyramid) -> FusedMap:
        return aggregate(project_and_align(self, pyramid), self.logits, self.unified_divisor)


def resample(fmap: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    if tuple(fmap.shape[-2:]) == tuple(size):
        return fmap
    return F.interpolate(fmap, size=size, mode="bilinear", align_corners=False)


def project_and_align(params: MultiScaleAggregation, pyramid: FeaturePyramid) -> list[torch.Tensor]:
    if len(pyramid.levels) != len(params.heads):
        raise InvalidParameterError(
            f"pyramid has {len(pyramid.levels)} levels, aggregation expects {len(params.heads)}")
    if pyramid.channels != params.in_channels:
        raise InvalidParameterError(
            f"pyramid channels {pyramid.channels} do not match aggregation heads {params.in_channels}")
    h, w = pyramid.image_size
    u = params.unified_divisor
    if h % u or w % u:
        raise InvalidParameterError(f"image size {h}x{w} is not divisible by the unified divisor {u}")
    size = (h // u, w // u)
    return [resample(head(level.fmap), size) for head, level in zip(params.heads, pyramid.levels)]


def aggregate(aligned: list[torch.Tensor], w: torch.Tensor, unified_divisor: int = 4) -> FusedMap:
    """
    β = softmax(w), F' = Σ β_i · F_i.
    """
    if not aligned:
        raise InvalidParameterError("aggregate needs at least one aligned map")
    shape = aligned[0].shape
    if any(m.shape != shape for m in aligned):
        raise InvalidParameterError("aligned maps must share one shape")
    if w.shape != (len(aligned),):
        raise InvalidParameterError(f"expected {len(aligned)} scale logits, got shape {tuple(w.shape)}")
    # softmax в float64: β > 0 и при логитах ±50
    beta = torch.softmax(w.double(), dim=0)
    weights = beta.to(aligned[0].dtype)
    fmap = sum(weights[i] * m for i, m in enumerate(aligned))
    return FusedMap(fmap=fmap, beta=beta, unified_divisor=unified_divisor)


class CBAM(nn.Module):
    """
    Канальное внимание (общий MLP по avg и max) и затем пространственное (свёртка k×k).
    """

    def __init__(self, channels: int, reduction: int = 8, spatial_kernel: int = 7):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.mlp = nn.Sequential(
            nn.Conv2d(channels, hidden, 1, bias=False),
            nn.ReLU(),
            nn.Conv2d(hidden, channels, 1, bias=False),
        )
        self.spatial = nn.Conv2d(2, 1, spatial_kernel, padding=spatial_kernel // 2, padding_mode="replicate")

    def channel_attention(self, x: torch.Tensor) -> torch.Tensor:
        avg = F.adaptive_avg_pool2d(x, 1)
        mx = F.adaptive_max_pool2d(x, 1)
        return torch.sigmoid(self.mlp(avg) + self.mlp(mx))

    def spatial_attention(self, x: torch.Tensor) -> torch.Tensor:
        summary = torch.cat([x.mean(dim=1, keepdim=True), x.amax(dim=1, keepdim=True)], dim=1)
        return torch.sigmoid(self.spatial(summary))

    def forward(self, x: torch.Tensor, return_attention: bool = False):
        ca = self.channel_attention(x)
        x = x * ca
        sa = self.spatial_attention(x)
        out = x * sa
        if return_attention:
            return out, ca, sa
        return out


def cbam_refine(params: Optional[CBAM], fused: FusedMap) -> FusedMap:
    if not torch.all(torch.isfinite(fused.fmap)):
        raise InvalidParameterError("fused map contains non-finite values")
    if params is None:
        return fused
    return FusedMap(fmap=params(fused.fmap), beta=fused.beta, unified_divisor=fused.unified_divisor)
