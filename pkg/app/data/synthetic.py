from dataclasses import dataclass
from typing import Optional

import cv2
import numpy as np
from scipy import ndimage

from app.data.geometry import Homography, sample_similarity
from app.data.tiles import LUMA_WEIGHTS, ImageTile, Modality, check_tile_size
from app.errors import InvalidParameterError
from app.prompts import LAND_USE_CLASSES, N_CLASSES, PromptSpec, build_prompt


ROAD = LAND_USE_CLASSES.index("road")
OTHERS = LAND_USE_CLASSES.index("others")

# базовые цвета классов в оптике (RGB)
CLASS_COLORS = np.array([
    [0.58, 0.62, 0.32],  # farmland
    [0.72, 0.70, 0.68],  # city
    [0.63, 0.52, 0.42],  # village
    [0.10, 0.20, 0.34],  # water
    [0.15, 0.34, 0.17],  # forest
    [0.88, 0.86, 0.82],  # road
    [0.48, 0.44, 0.36],  # others
])

CLASS_LUMA = CLASS_COLORS @ LUMA_WEIGHTS

# SAR: средний уровень класса = CLASS_LUMA ** SAR_CURVE (усиление класса),
# внутри класса яркость пересчитывается степенью SAR_TEXTURE_GAMMA.
# Уровни монотонны по яркости классов: перепад на границе классов не гасится.
SAR_CURVE = 1.5
SAR_LEVEL = CLASS_LUMA ** SAR_CURVE
SAR_TEXTURE_GAMMA = np.array([0.9, 0.7, 0.8, 1.4, 0.8, 1.2, 1.0])

# мера структурного сходства: модуль гауссова градиента логарифма яркости
EDGE_SIGMA = 3.0
EDGE_FLOOR = 1e-3
EDGE_MIN_CORRELATION = 0.5


@dataclass(frozen=True, eq=False)
class PairSample:
    """
    Оптический и SAR тайлы одной сцены, h_gt (оптика → SAR), гистограмма классов и промпт.
    """
    optical: ImageTile
    sar: ImageTile
    h_gt: Optional[Homography]
    land_use: np.ndarray
    prompt: PromptSpec
    tile_id: str

    def __post_init__(self):
        land_use = np.asarray(self.land_use, dtype=np.float64)
        if land_use.shape != (N_CLASSES,) or np.any(land_use < 0) or abs(land_use.sum() - 1.0) > 1e-6:
            raise InvalidParameterError(f"Pair {self.tile_id}: land_use must be a {N_CLASSES}-class histogram")
        if self.optical.pixels.shape[:2] != self.sar.pixels.shape[:2]:
            raise InvalidParameterError(f"Pair {self.tile_id}: optical and SAR tiles must share H×W")
        if self.optical.modality != Modality.OPTICAL or self.sar.modality != Modality.SAR:
            raise InvalidParameterError(f"Pair {self.tile_id}: tile modalities are swapped")
        object.__setattr__(self, "land_use", land_use)

    @property
    def size(self) -> tuple[int, int]:
        return self.optical.height, self.optical.width


def apply_speckle(image: np.ndarray, looks: float, rng: np.random.Generator) -> np.ndarray:
    """
    Мультипликативный гамма-спекл с единичным средним (форма looks, масштаб 1/looks).
    """
    if looks <= 0:
        raise InvalidParameterError("speckle looks must be positive")
    return image * rng.gamma(shape=looks, scale=1.0 / looks, size=image.shape)


def _label_layout(rng: np.random.Generator, canvas: int, size: int, mix: np.ndarray) -> np.ndarray:
    # слой 1: гладкие области по argmax случайных полей со сдвигом log(mix)
    region_mix = mix.copy()
    if region_mix[ROAD] < 1.0:
        region_mix[ROAD] = 0.0
    with np.errstate(divide="ignore"):
        bias = np.log(region_mix / region_mix.sum())
    sigma = size / 10.0
    fields = np.empty((N_CLASSES, canvas, canvas))
    for k in range(N_CLASSES):
        field = ndimage.gaussian_filter(rng.standard_normal((canvas, canvas)), sigma, mode="wrap")
        fields[k] = field / (field.std() + 1e-12) + bias[k]
    labels = np.argmax(fields, axis=0).astype(np.uint8)

    # слой 2: дороги, прямые полосы поверх областей; каждая проходит через кадр тайла
    if 0.0 < mix[ROAD] < 1.0:
        pad = (canvas - size) // 2
        n_roads = 1 + int(rng.integers(0, 2)) + int(mix[ROAD] > 0.2)
        for _ in range(n_roads):
            x0, y0 = rng.uniform(pad, pad + size, size=2)
            angle = rng.uniform(0, np.pi)
            dx, dy = np.cos(angle) * 2 * canvas, np.sin(angle) * 2 * canvas
            p1 = (int(round(x0 - dx)), int(round(y0 - dy)))
            p2 = (int(round(x0 + dx)), int(round(y0 + dy)))
            cv2.line(labels, p1, p2, color=ROAD, thickness=3)
    return labels


def _render_optical(rng: np.random.Generator, labels: np.ndarray) -> np.ndarray:
    canvas = labels.shape[0]
    yy, xx = np.mgrid[0:canvas, 0:canvas].astype(np.float64)
    phi = rng.uniform(0, np.pi)
    period = rng.uniform(6.0, 10.0)
    textures = np.zeros((N_CLASSES, canvas, canvas))
    textures[0] = 0.07 * np.sin(2 * np.pi * (xx * np.cos(phi) + yy * np.sin(phi)) / period)
    textures[1] = 0.10 * (((xx // 6) + (yy // 6)) % 2) - 0.05
    textures[2] = 0.06 * (((xx // 4) + (yy // 3)) % 2) - 0.03
    textures[3] = 0.02 * ndimage.gaussian_filter(rng.standard_normal((canvas, canvas)), 3.0)
    textures[4] = 0.25 * ndimage.gaussian_filter(rng.standard_normal((canvas, canvas)), 1.5)
    textures[6] = 0.15 * ndimage.gaussian_filter(rng.standard_normal((canvas, canvas)), 2.0)

    texture = np.take_along_axis(textures, labels[None].astype(np.intp), axis=0)[0]
    rgb = CLASS_COLORS[labels] + texture[:, :, None]
    shading = ndimage.gaussian_filter(rng.standard_normal((canvas, canvas)), canvas / 6.0, mode="wrap")
    illumination = np.clip(1.0 + 0.05 * shading / (shading.std() + 1e-12), 0.85, 1.15)
    return np.clip(rgb * illumination[:, :, None], 0.0, 1.0)


def _render_sar(rng: np.random.Generator, luminance: np.ndarray, labels: np.ndarray,
                looks: float, blur_sigma: float) -> np.ndarray:
    luminance = np.clip(luminance.astype(np.float64), EDGE_FLOOR, 1.0)
    remapped = SAR_LEVEL[labels] * np.power(luminance / CLASS_LUMA[labels], SAR_TEXTURE_GAMMA[labels])
    speckled = apply_speckle(remapped, looks, rng)
    if blur_sigma > 0:
        speckled = ndimage.gaussian_filter(speckled, blur_sigma, mode="reflect")
    return np.clip(speckled, 0.0, 1.0)


def _scene(rng_seed: int, size: int, class_mix) -> tuple[np.random.Generator, np.ndarray, int]:
    # сцена на холсте 2×size; кадр SAR целиком лежит внутри содержимого
    rng = np.random.default_rng(rng_seed)
    if class_mix is None:
        mix = rng.dirichlet(np.full(N_CLASSES, 0.8))
    else:
        mix = np.asarray(class_mix, dtype=np.float64)
        if mix.shape != (N_CLASSES,) or np.any(mix < 0) or mix.sum() <= 0:
            raise InvalidParameterError(f"class_mix must be a non-negative {N_CLASSES}-vector with positive sum")
        mix = mix / mix.sum()
    pad = size // 2
    return rng, _label_layout(rng, size + 2 * pad, size, mix), pad


def label_layout(rng_seed: int, size: int = 128, class_mix=None) -> np.ndarray:
    """
    Карта классов оптического тайла (size×size, uint8) для тех же аргументов,
    что и у generate_synthetic_pair.
    """
    check_tile_size(size, size)
    _, labels, pad = _scene(rng_seed, size, class_mix)
    return labels[pad:pad + size, pad:pad + size].copy()


def edge_correlation(pair: PairSample, sigma: float = EDGE_SIGMA) -> float:
    """
    Структурное сходство пары без учёта радиометрии: яркость оптики переносится
    в кадр SAR по h_gt, на обоих тайлах берётся модуль гауссова градиента (σ px)
    от log(I + EDGE_FLOOR), затем корреляция Пирсона по области, покрытой оптикой,
    без полосы 3σ у краёв. NaN, если одна из карт постоянна.
    """
    if pair.h_gt is None:
        raise InvalidParameterError(f"Pair {pair.tile_id}: edge correlation needs h_gt")
    h, w = pair.size
    warped = cv2.warpPerspective(pair.optical.luminance().astype(np.float32), pair.h_gt.m, (w, h),
                                 flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REFLECT)
    covered = cv2.warpPerspective(np.ones((h, w), np.uint8), pair.h_gt.m, (w, h),
                                  flags=cv2.INTER_NEAREST, borderMode=cv2.BORDER_CONSTANT, borderValue=0)
    margin = int(np.ceil(3.0 * sigma)) + 1
    valid = ndimage.binary_erosion(covered > 0, iterations=margin)
    edges_opt = ndimage.gaussian_gradient_magnitude(np.log(warped.astype(np.float64) + EDGE_FLOOR), sigma)
    edges_sar = ndimage.gaussian_gradient_magnitude(np.log(pair.sar.luminance() + EDGE_FLOOR), sigma)
    a, b = edges_opt[valid], edges_sar[valid]
    if a.size < 2 or a.std() == 0 or b.std() == 0:
        return float("nan")
    return float(np.corrcoef(a, b)[0, 1])


def generate_synthetic_pair(rng_seed: int, size: int = 128, class_mix=None,
                            rot_range_deg=(-10.0, 10.0), scale_range=(0.8, 1.0),
                            speckle_looks: float = 4.0, blur_sigma: float = 1.0,
                            tile_id: Optional[str] = None) -> PairSample:
    """
    Детерминированная пара: оптика из слоёв классов, SAR: та же сцена после h_gt,
    нелинейного пересчёта яркости по классам, спекла и размытия.
    """
    try:
        check_tile_size(size, size)
    except InvalidParameterError as ex:
        raise InvalidParameterError(f"size must be >= 64 and divisible by 16, got {size}") from ex

    rng, labels, pad = _scene(rng_seed, size, class_mix)
    optical_canvas = _render_optical(rng, labels)

    h_gt, _, _ = sample_similarity(rng, rot_range_deg, scale_range, size)
    canvas_to_optical = Homography(np.array([[1.0, 0.0, -pad], [0.0, 1.0, -pad], [0.0, 0.0, 1.0]]))
    canvas_to_sar = h_gt.compose(canvas_to_optical)

    luminance = (optical_canvas @ LUMA_WEIGHTS).astype(np.float32)
    sar_luminance = cv2.warpPerspective(luminance, canvas_to_sar.m, (size, size),
                                        flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REFLECT)
    sar_labels = cv2.warpPerspective(labels, canvas_to_sar.m, (size, size),
                                     flags=cv2.INTER_NEAREST, borderMode=cv2.BORDER_REFLECT)
    sar = _render_sar(rng, sar_luminance, sar_labels, speckle_looks, blur_sigma)

    optical_labels = labels[pad:pad + size, pad:pad + size]
    land_use = np.bincount(optical_labels.reshape(-1), minlength=N_CLASSES) / float(size * size)

    tile_id = tile_id or f"synth_{rng_seed}"
    return PairSample(
        optical=ImageTile(optical_canvas[pad:pad + size, pad:pad + size], Modality.OPTICAL, f"{tile_id}_opt"),
        sar=ImageTile(sar, Modality.SAR, f"{tile_id}_sar"),
        h_gt=h_gt,
        land_use=land_use,
        prompt=build_prompt(land_use),
        tile_id=tile_id,
    )


def make_eval_pair(optical: ImageTile, sar: ImageTile, rng_seed: int,
                   rot_range_deg=(-10.0, 10.0), scale_range=(0.8, 1.0),
                   land_use=None, tile_id: Optional[str] = None) -> PairSample:
    """
    Пара для протокола оценки из совмещённых тайлов: оптика поворачивается и
    масштабируется, h_gt: обратное преобразование (кадр оптики → кадр SAR).
    """
    h, w = optical.height, optical.width
    rng = np.random.default_rng(rng_seed)
    warp, _, _ = sample_similarity(rng, rot_range_deg, scale_range, h)
    perturbed = cv2.warpPerspective(np.array(optical.pixels), warp.m, (w, h),
                                    flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REFLECT)
    if land_use is None:
        land_use = np.zeros(N_CLASSES)
        land_use[OTHERS] = 1.0
    tile_id = tile_id or optical.tile_id
    return PairSample(
        optical=ImageTile(np.clip(perturbed, 0.0, 1.0), Modality.OPTICAL, optical.tile_id),
        sar=sar,
        h_gt=warp.inverse(),
        land_use=np.asarray(land_use, dtype=np.float64),
        prompt=build_prompt(land_use),
        tile_id=tile_id,
    )
