from pathlib import Path
from typing import Optional

import torch
import torch.nn.functional as F
from loguru import logger
from torch import nn

from app.config import OpticalConfig
from app.data.tiles import ImageTile, Modality, TILE_MULTIPLE, tile_to_tensor
from app.digests import parameter_digest
from app.errors import InvalidParameterError
from app.features.pyramid import FeaturePyramid, PyramidLevel
from app.seeding import seeded

COARSE_STRIDE = 16


class FeatureCache:
    """
    Каталог внешних грубых признаков: <tile_id>.pt с тензором (C_coarse, H/16, W/16).
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def path_for(self, tile_id: str) -> Path:
        return self.root / f"{tile_id}.pt"

    def get(self, tile_id: str) -> Optional[torch.Tensor]:
        path = self.path_for(tile_id)
        if not path.is_file():
            return None
        return torch.load(path, map_location="cpu", weights_only=True)

    def put(self, tile_id: str, features: torch.Tensor) -> Path:
        self.root.mkdir(parents=True, exist_ok=True)
        path = self.path_for(tile_id)
        torch.save(features.detach().cpu(), path)
        return path


class CoarseEncoder(nn.Module):
    """
    Замороженный патч-энкодер со страйдом 16 и фиксированным сидом.
    """

    def __init__(self, out_channels: int):
        super().__init__()
        self.patch = nn.Conv2d(3, out_channels, kernel_size=COARSE_STRIDE, stride=COARSE_STRIDE)
        self.mix = nn.Conv2d(out_channels, out_channels, kernel_size=1)

    def forward(self, x):
        return self.mix(F.gelu(self.patch(x)))


class FineEncoder(nn.Module):
    """
    Четыре свёрточных блока 3×3 в духе VGG с двумя понижениями; выходы на делителях 1 и 4.
    """

    def __init__(self, c1: int, c2: int):
        super().__init__()
        self.stage1 = nn.Sequential(
            nn.Conv2d(3, c1, 3, padding=1), nn.ReLU(),
            nn.Conv2d(c1, c1, 3, padding=1), nn.ReLU(),
        )
        self.stage2 = nn.Sequential(
            nn.MaxPool2d(2),
            nn.Conv2d(c1, c2, 3, padding=1), nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(c2, c2, 3, padding=1), nn.ReLU(),
        )

    def forward(self, x):
        f1 = self.stage1(x)
        return self.stage2(f1), f1


class OpticalBackbone(nn.Module):
    """
    Пирамида оптики на делителях 16, 4 и 1; при use_coarse=False грубого уровня нет (4 и 1).
    """

    def __init__(self, channels: int = 64, coarse_channels: int = 96, fine_channels=(32, 64),
                 coarse_seed: int = 0, feature_cache: Optional[str] = None, use_coarse: bool = True):
        super().__init__()
        self.coarse_seed = coarse_seed
        self.coarse: Optional[CoarseEncoder] = None
        self.proj16: Optional[nn.Conv2d] = None
        if use_coarse:
            with seeded(coarse_seed):
                self.coarse = CoarseEncoder(coarse_channels)
            self.coarse.requires_grad_(False)
        c1, c2 = fine_channels
        self.fine = FineEncoder(c1, c2)
        if use_coarse:
            self.proj16 = nn.Conv2d(coarse_channels, channels, 1)
        self.proj4 = nn.Conv2d(c2, channels, 1)
        self.proj1 = nn.Conv2d(c1, channels, 1)
        self.channels = channels
        self.cache = FeatureCache(feature_cache) if feature_cache else None

    @classmethod
    def from_config(cls, cfg: OpticalConfig, seed: int = 0, use_coarse: bool = True) -> "OpticalBackbone":
        with seeded(seed):
            return cls(cfg.channels, cfg.coarse_channels, cfg.fine_channels, cfg.coarse_seed, cfg.feature_cache,
                       use_coarse=use_coarse)

    @property
    def divisors(self) -> tuple[int, ...]:
        return (COARSE_STRIDE, 4, 1) if self.coarse is not None else (4, 1)

    def train(self, mode: bool = True):
        super().train(mode)
        if self.coarse is not None:
            self.coarse.eval()
        return self

    def coarse_features(self, x: torch.Tensor, tile_ids: Optional[list[str]] = None) -> torch.Tensor:
        if self.coarse is None:
            raise InvalidParameterError("this optical encoder was built without the coarse level")
        with torch.no_grad():
            coarse = self.coarse(x)
        if self.cache is not None and tile_ids:
            for i, tile_id in enumerate(tile_ids):
                cached = self.cache.get(tile_id)
                if cached is None:
                    continue
                if cached.shape != coarse.shape[1:]:
                    raise InvalidParameterError(
                        f"cached coarse features for {tile_id} have shape {tuple(cached.shape)}, "
                        f"expected {tuple(coarse.shape[1:])}")
                coarse[i] = cached.to(coarse)
        return coarse

    def forward(self, x: torch.Tensor, tile_ids: Optional[list[str]] = None) -> FeaturePyramid:
        h, w = x.shape[-2:]
        if h % TILE_MULTIPLE or w % TILE_MULTIPLE:
            raise InvalidParameterError(f"optical input {h}x{w} is not divisible by {TILE_MULTIPLE}")
        f4, f1 = self.fine(x)
        levels = [PyramidLevel(4, self.proj4(f4)), PyramidLevel(1, self.proj1(f1))]
        if self.coarse is not None:
            levels.insert(0, PyramidLevel(COARSE_STRIDE, self.proj16(self.coarse_features(x, tile_ids))))
        return FeaturePyramid(levels=tuple(levels), source=Modality.OPTICAL)


def encode_optical(backbone: OpticalBackbone, tile: ImageTile) -> FeaturePyramid:
    if tile.modality != Modality.OPTICAL:
        raise InvalidParameterError(f"encode_optical needs an optical tile, got {tile.modality.value}")
    device = next(backbone.parameters()).device
    return backbone(tile_to_tensor(tile).to(device), tile_ids=[tile.tile_id])


def freeze_report(backbone: OpticalBackbone) -> str:
    """
    Дайджест замороженного грубого энкодера (пустого набора, если уровня 1/16 нет).
    """
    digest = parameter_digest(backbone.coarse if backbone.coarse is not None else [])
    logger.debug(f"Coarse encoder digest {digest[:12]}")
    return digest
