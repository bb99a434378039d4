import hashlib
from pathlib import Path
from typing import Iterator

import numpy as np
from loguru import logger
from tqdm import tqdm

from app.data.geometry import Homography
from app.data.synthetic import EDGE_MIN_CORRELATION, PairSample, edge_correlation, generate_synthetic_pair
from app.data.tiles import Modality, load_tile, save_tile
from app.errors import InvalidParameterError, UsageError
from app.prompts import build_prompt
from app.schemas import PairManifest
from app.seeding import derive_seed


MANIFEST_DIR = "manifests"
TILE_DIR = "tiles"


def pair_seed(seed: int, index: int) -> int:
    return derive_seed(seed, index)


def write_pair(pair: PairSample, root: str | Path, seed: int | None = None) -> Path:
    root = Path(root)
    opt_rel = f"{TILE_DIR}/{pair.tile_id}_opt.tiff"
    sar_rel = f"{TILE_DIR}/{pair.tile_id}_sar.tiff"
    save_tile(pair.optical, root / opt_rel)
    save_tile(pair.sar, root / sar_rel)
    manifest = PairManifest(
        tile_id=pair.tile_id,
        optical_path=opt_rel,
        sar_path=sar_rel,
        h_gt=pair.h_gt.to_list() if pair.h_gt is not None else None,
        land_use=[float(v) for v in pair.land_use],
        prompt=pair.prompt.text,
        seed=seed,
        size=pair.optical.height,
    )
    path = root / MANIFEST_DIR / f"{pair.tile_id}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(manifest.model_dump_json(indent=2), encoding="utf-8")
    return path


def write_dataset(root: str | Path, n_pairs: int, seed: int, size: int = 128, **synth_kwargs) -> list[Path]:
    """
    Пишет n_pairs синтетических пар: тайлы float32 TIFF + JSON-манифест на пару.
    """
    if n_pairs < 1:
        raise UsageError(f"n_pairs must be at least 1, got {n_pairs}")
    root = Path(root)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as ex:
        raise UsageError(f"Output directory {root} is not writable: {ex}") from ex

    paths = []
    for index in tqdm(range(n_pairs), desc="synth", leave=False):
        s = pair_seed(seed, index)
        pair = generate_synthetic_pair(s, size=size, tile_id=f"pair_{index:05d}", **synth_kwargs)
        corr = edge_correlation(pair)
        if not corr > EDGE_MIN_CORRELATION:
            logger.warning(f"Pair {pair.tile_id}: optical/SAR edge correlation {corr:.3f} "
                           f"is below {EDGE_MIN_CORRELATION}")
        paths.append(write_pair(pair, root, seed=s))
    logger.info(f"Wrote {n_pairs} synthetic pairs to {root}")
    return paths


def read_manifest(path: str | Path) -> PairManifest:
    return PairManifest.model_validate_json(Path(path).read_text(encoding="utf-8"))


def load_pair(manifest_path: str | Path) -> PairSample:
    """
    Собирает PairSample из манифеста; отсутствующая h_gt остаётся None.
    """
    manifest_path = Path(manifest_path)
    manifest = read_manifest(manifest_path)
    root = manifest_path.parent.parent if manifest_path.parent.name == MANIFEST_DIR else manifest_path.parent
    optical = load_tile(root / manifest.optical_path, Modality.OPTICAL, tile_id=f"{manifest.tile_id}_opt")
    sar = load_tile(root / manifest.sar_path, Modality.SAR, tile_id=f"{manifest.tile_id}_sar")
    land_use = manifest.land_use if manifest.land_use is not None else np.zeros(7)
    prompt = build_prompt(land_use)
    if manifest.prompt and manifest.prompt != prompt.text:
        logger.warning(f"Manifest prompt for {manifest.tile_id} differs from the rebuilt prompt")
    h_gt = Homography.from_list(manifest.h_gt) if manifest.h_gt is not None else None
    return PairSample(optical=optical, sar=sar, h_gt=h_gt, land_use=prompt.class_vector,
                      prompt=prompt, tile_id=manifest.tile_id)


def manifest_paths(root: str | Path) -> list[Path]:
    """
    Манифесты каталога датасета (или один файл манифеста) в отсортированном порядке.
    """
    root = Path(root)
    if root.is_file():
        return [root]
    directory = root / MANIFEST_DIR
    if not directory.is_dir():
        raise InvalidParameterError(f"No manifests directory under {root}")
    return sorted(directory.glob("*.json"))


def iter_pairs(root: str | Path) -> Iterator[PairSample]:
    for path in manifest_paths(root):
        yield load_pair(path)


def load_dataset(root: str | Path) -> list[PairSample]:
    return list(iter_pairs(root))


def dataset_digest(root: str | Path) -> str:
    """
    SHA-256 по манифестам и пикселям тайлов в порядке имён.
    """
    digest = hashlib.sha256()
    for path in manifest_paths(root):
        digest.update(path.read_bytes())
        pair = load_pair(path)
        digest.update(np.ascontiguousarray(pair.optical.pixels).tobytes())
        digest.update(np.ascontiguousarray(pair.sar.pixels).tobytes())
    return digest.hexdigest()
