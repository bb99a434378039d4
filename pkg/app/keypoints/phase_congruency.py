import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from app.config import PcConfig
from app.data.tiles import LUMA_WEIGHTS, ImageTile
from app.errors import InvalidParameterError

# сглаживающий низкочастотный фильтр Баттерворта
LOWPASS_CUTOFF = 0.45
LOWPASS_ORDER = 15
# взвешивание по ширине спектра
SPREAD_CUTOFF = 0.5
SPREAD_GAIN = 10.0
# относительный и абсолютный пороги знаменателя
REL_EPSILON = 1e-4
ABS_EPSILON = 1e-8


@dataclass(frozen=True, eq=False)
class PcMap:
    values: np.ndarray
    params_digest: str

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2 or not np.all(np.isfinite(values)):
            raise InvalidParameterError("PC map must be a finite 2-D array")
        if values.min() < -1e-6 or values.max() > 1.0 + 1e-6:
            raise InvalidParameterError("PC values must lie in [0, 1]")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)


def pc_params_digest(cfg: PcConfig) -> str:
    text = json.dumps(cfg.model_dump(mode="json"), sort_keys=True)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _filter_bank(rows: int, cols: int, cfg: PcConfig) -> tuple[np.ndarray, list[np.ndarray]]:
    """
    Радиальные лог-Габор фильтры по масштабам и угловые окна по ориентациям,
    в несдвинутой раскладке numpy.fft.
    """
    fy = np.fft.fftfreq(rows)[:, None]
    fx = np.fft.fftfreq(cols)[None, :]
    radius = np.sqrt(fx ** 2 + fy ** 2)
    radius[0, 0] = 1.0
    theta = np.arctan2(-fy, fx)
    sin_t, cos_t = np.sin(theta), np.cos(theta)

    lowpass = 1.0 / (1.0 + (radius / LOWPASS_CUTOFF) ** (2 * LOWPASS_ORDER))
    radial = np.empty((cfg.n_scales, rows, cols))
    for s in range(cfg.n_scales):
        wavelength = cfg.min_wavelength * cfg.scale_multiplier ** s
        fo = 1.0 / wavelength
        log_gabor = np.exp(-(np.log(radius / fo)) ** 2 / (2.0 * np.log(cfg.sigma_onf) ** 2))
        radial[s] = log_gabor * lowpass
        radial[s, 0, 0] = 0.0

    spreads = []
    for o in range(cfg.n_orientations):
        angle = o * np.pi / cfg.n_orientations
        ds = sin_t * np.cos(angle) - cos_t * np.sin(angle)
        dc = cos_t * np.cos(angle) + sin_t * np.sin(angle)
        dtheta = np.minimum(np.abs(np.arctan2(ds, dc)) * cfg.n_orientations / 2.0, np.pi)
        spreads.append((np.cos(dtheta) + 1.0) / 2.0)
    return radial, spreads


def phase_congruency(image: np.ndarray, cfg: PcConfig) -> np.ndarray:
    """
    Фазовая конгруэнтность: энергия, просуммированная по ориентациям, делённая на
    сумму амплитуд. Порог шума по медиане отклика наименьшего масштаба (Рэлей).
    """
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape
    pad = int(math.ceil(cfg.min_wavelength * cfg.scale_multiplier ** (cfg.n_scales - 1)))
    padded = np.pad(image, pad, mode="reflect") if pad < min(h, w) else np.pad(image, pad, mode="symmetric")
    rows, cols = padded.shape
    spectrum = np.fft.fft2(padded)
    radial, spreads = _filter_bank(rows, cols, cfg)

    energy_total = np.zeros((rows, cols))
    amplitude_total = np.zeros((rows, cols))
    for spread in spreads:
        sum_e = np.zeros((rows, cols))
        sum_o = np.zeros((rows, cols))
        sum_an = np.zeros((rows, cols))
        max_an = np.zeros((rows, cols))
        responses = []
        tau = 0.0
        for s in range(cfg.n_scales):
            eo = np.fft.ifft2(spectrum * radial[s] * spread)
            an = np.abs(eo)
            responses.append(eo)
            sum_an += an
            sum_e += eo.real
            sum_o += eo.imag
            if s == 0:
                tau = np.median(an) / math.sqrt(math.log(4.0))
            np.maximum(max_an, an, out=max_an)

        x_energy = np.sqrt(sum_e ** 2 + sum_o ** 2) + 1e-12
        mean_e, mean_o = sum_e / x_energy, sum_o / x_energy
        energy = np.zeros((rows, cols))
        for eo in responses:
            e, o = eo.real, eo.imag
            energy += e * mean_e + o * mean_o - np.abs(e * mean_o - o * mean_e)

        mult = cfg.scale_multiplier
        total_tau = tau * (1.0 - (1.0 / mult) ** cfg.n_scales) / (1.0 - 1.0 / mult)
        threshold = total_tau * (math.sqrt(math.pi / 2.0) + cfg.noise_k * math.sqrt((4.0 - math.pi) / 2.0))
        energy = np.maximum(energy - threshold, 0.0)

        if cfg.n_scales > 1:
            width = (sum_an / (max_an + 1e-12) - 1.0) / (cfg.n_scales - 1)
            weight = 1.0 / (1.0 + np.exp((SPREAD_CUTOFF - width) * SPREAD_GAIN))
        else:
            weight = np.ones((rows, cols))
        energy_total += weight * energy
        amplitude_total += sum_an

    eps = max(REL_EPSILON * float(amplitude_total.max()), ABS_EPSILON)
    pc = energy_total / (amplitude_total + eps)
    return np.clip(pc[pad:pad + h, pad:pad + w], 0.0, 1.0)


def compute_pc_map(tile: ImageTile | np.ndarray, cfg: PcConfig | None = None) -> PcMap:
    cfg = cfg or PcConfig()
    image = tile.luminance() if isinstance(tile, ImageTile) else np.asarray(tile, dtype=np.float64)
    if image.ndim == 3:
        image = image @ LUMA_WEIGHTS if image.shape[2] == 3 else image.mean(axis=2)
    if min(image.shape) < 2 * cfg.min_wavelength:
        raise InvalidParameterError(
            f"tile {image.shape[0]}x{image.shape[1]} is smaller than 2 * min_wavelength = {2 * cfg.min_wavelength}")
    return PcMap(values=phase_congruency(image, cfg), params_digest=pc_params_digest(cfg))


def export_pc_map(pc: PcMap, path: str | Path) -> Path:
    """
    16-битный PNG для просмотра.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = np.round(np.clip(pc.values, 0.0, 1.0) * 65535.0).astype(np.uint16)
    if not cv2.imwrite(str(path), data):
        raise OSError(f"Could not write PC map to {path}")
    return path
