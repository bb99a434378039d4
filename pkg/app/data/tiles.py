import os
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Literal

import cv2
import numpy as np
import torch
from loguru import logger

from app.errors import InvalidParameterError, TileDecodeError, TileErrorCode


MIN_TILE_SIZE = 64
TILE_MULTIPLE = 16

# веса яркости ITU-R BT.601 (как в cv2.cvtColor)
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


class Modality(str, Enum):
    OPTICAL = "optical"
    SAR = "sar"


@dataclass(frozen=True, eq=False)
class ImageTile:
    """
    Растр H×W×C со значениями в [0, 1]; C=3 для оптики, C=1 для SAR.
    """
    pixels: np.ndarray
    modality: Modality
    tile_id: str

    def __post_init__(self):
        pixels = np.array(self.pixels, dtype=np.float32)
        if pixels.ndim == 2:
            pixels = pixels[:, :, None]
        if pixels.ndim != 3:
            raise InvalidParameterError(f"Tile {self.tile_id}: pixels must be H×W×C")
        h, w, c = pixels.shape
        expected = 1 if self.modality == Modality.SAR else 3
        if c != expected:
            raise InvalidParameterError(f"Tile {self.tile_id}: {self.modality.value} tiles need {expected} channel(s), got {c}")
        check_tile_size(h, w)
        if not np.all(np.isfinite(pixels)) or pixels.min() < 0.0 or pixels.max() > 1.0:
            raise InvalidParameterError(f"Tile {self.tile_id}: pixel values must be finite and within [0, 1]")
        pixels.setflags(write=False)
        object.__setattr__(self, "pixels", pixels)
        object.__setattr__(self, "modality", Modality(self.modality))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def luminance(self) -> np.ndarray:
        if self.pixels.shape[2] == 1:
            return self.pixels[:, :, 0].astype(np.float64)
        return self.pixels.astype(np.float64) @ LUMA_WEIGHTS


def check_tile_size(h: int, w: int) -> None:
    if h < MIN_TILE_SIZE or w < MIN_TILE_SIZE or h % TILE_MULTIPLE or w % TILE_MULTIPLE:
        raise InvalidParameterError(
            f"Tile size {h}x{w} invalid: both sides must be >= {MIN_TILE_SIZE} and divisible by {TILE_MULTIPLE}")


def rescale_pixels(raw: np.ndarray, path: str,
                   normalization: Literal["bitdepth", "minmax", "percentile"] = "bitdepth") -> np.ndarray:
    """
    Приводит сырой растр к float в [0, 1] по разрядности или по статистике тайла.
    """
    if raw.dtype == np.uint8:
        scaled = raw.astype(np.float64) / 255.0
    elif raw.dtype == np.uint16:
        scaled = raw.astype(np.float64) / 65535.0
    elif raw.dtype in (np.float32, np.float64):
        scaled = raw.astype(np.float64)
        if not np.all(np.isfinite(scaled)):
            raise TileDecodeError(TileErrorCode.DECODE, path, "non-finite float pixels")
        if normalization == "bitdepth" and (scaled.min() < 0.0 or scaled.max() > 1.0):
            raise TileDecodeError(TileErrorCode.BIT_DEPTH, path, "float raster outside [0, 1]")
    else:
        raise TileDecodeError(TileErrorCode.BIT_DEPTH, path, f"unsupported pixel type {raw.dtype}")

    if normalization == "minmax":
        lo, hi = scaled.min(), scaled.max()
        scaled = (scaled - lo) / (hi - lo) if hi > lo else np.zeros_like(scaled)
    elif normalization == "percentile":
        lo, hi = np.percentile(scaled, [2.0, 98.0])
        scaled = np.clip((scaled - lo) / (hi - lo), 0.0, 1.0) if hi > lo else np.zeros_like(scaled)
    return scaled


def load_tile(path: str | Path, modality: Modality | str, tile_id: str | None = None,
              normalization: Literal["bitdepth", "minmax", "percentile"] = "bitdepth") -> ImageTile:
    """
    Читает PNG/TIFF в ImageTile. SAR сводится к одному каналу по яркости.
    """
    path = Path(path)
    modality = Modality(modality)
    if not path.is_file():
        raise TileDecodeError(TileErrorCode.MISSING, str(path), "file does not exist")
    if os.path.getsize(path) == 0:
        raise TileDecodeError(TileErrorCode.EMPTY, str(path), "zero-byte file")

    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise TileDecodeError(TileErrorCode.DECODE, str(path), "decoder rejected the file")
    if raw.size == 0:
        raise TileDecodeError(TileErrorCode.EMPTY, str(path), "zero-sized image")

    if raw.ndim == 3:
        if raw.shape[2] == 4:
            raw = raw[:, :, :3]
        elif raw.shape[2] == 2:
            raw = raw[:, :, :1]
        if raw.shape[2] == 3:
            raw = raw[:, :, ::-1]  # BGR → RGB
    pixels = rescale_pixels(raw, str(path), normalization)
    if pixels.ndim == 2:
        pixels = pixels[:, :, None]

    if modality == Modality.SAR and pixels.shape[2] == 3:
        pixels = (pixels @ LUMA_WEIGHTS)[:, :, None]
    elif modality == Modality.OPTICAL and pixels.shape[2] == 1:
        pixels = np.repeat(pixels, 3, axis=2)

    h, w = pixels.shape[:2]
    try:
        check_tile_size(h, w)
    except InvalidParameterError as ex:
        raise TileDecodeError(TileErrorCode.SIZE, str(path), str(ex)) from ex

    tile_id = tile_id or path.stem
    logger.debug(f"Loaded {modality.value} tile {tile_id} ({h}x{w}) from {path}")
    return ImageTile(pixels=np.clip(pixels, 0.0, 1.0), modality=modality, tile_id=tile_id)


def save_tile(tile: ImageTile, path: str | Path) -> Path:
    """
    Пишет тайл как float32 TIFF; load_tile возвращает те же значения.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = np.ascontiguousarray(tile.pixels, dtype=np.float32)
    if data.shape[2] == 3:
        data = np.ascontiguousarray(data[:, :, ::-1])
    else:
        data = data[:, :, 0]
    if not cv2.imwrite(str(path), data):
        raise OSError(f"Could not write tile to {path}")
    return path


def tile_to_tensor(tile: ImageTile) -> torch.Tensor:
    """
    (1, C, H, W) float32 тензор из тайла.
    """
    return torch.from_numpy(np.array(tile.pixels.transpose(2, 0, 1))).unsqueeze(0)
