import numpy as np
import pytest

from app.data.geometry import decompose_similarity
from app.data.storage import dataset_digest, load_dataset, load_pair, manifest_paths, write_dataset
from app.data.synthetic import (
    EDGE_MIN_CORRELATION,
    PairSample,
    apply_speckle,
    edge_correlation,
    generate_synthetic_pair,
    label_layout,
    make_eval_pair,
)
from app.errors import InvalidParameterError, UsageError
from app.prompts import LAND_USE_CLASSES, PROMPT_TEMPLATE
from app.seeding import derive_seed


def test_speckle_has_unit_mean_and_gamma_variance():
    rng = np.random.default_rng(0)
    noisy = apply_speckle(np.ones(400_000), 4.0, rng)
    assert abs(noisy.mean() - 1.0) < 0.01
    assert abs(noisy.var() - 0.25) < 0.01


def test_speckle_rejects_non_positive_looks():
    with pytest.raises(InvalidParameterError):
        apply_speckle(np.ones(4), 0.0, np.random.default_rng(0))


def test_pair_is_deterministic():
    a = generate_synthetic_pair(5, size=64)
    b = generate_synthetic_pair(5, size=64)
    np.testing.assert_array_equal(a.optical.pixels, b.optical.pixels)
    np.testing.assert_array_equal(a.sar.pixels, b.sar.pixels)
    np.testing.assert_array_equal(a.h_gt.m, b.h_gt.m)


def test_pair_contents(pair128):
    assert pair128.optical.pixels.shape == (128, 128, 3)
    assert pair128.sar.pixels.shape == (128, 128, 1)
    assert abs(pair128.land_use.sum() - 1.0) < 1e-9
    theta, scale = decompose_similarity(pair128.h_gt)
    assert -10.0 - 1e-9 <= theta <= 10.0 + 1e-9 and 0.8 - 1e-9 <= scale <= 1.0 + 1e-9
    assert pair128.prompt.text.startswith(PROMPT_TEMPLATE.split("{")[0])


def test_pure_class_mix_names_single_class():
    mix = np.zeros(len(LAND_USE_CLASSES))
    mix[LAND_USE_CLASSES.index("water")] = 1.0
    pair = generate_synthetic_pair(1, size=64, class_mix=mix)
    assert pair.prompt.text.endswith("water")


@pytest.mark.parametrize("seed", range(50))
def test_sar_keeps_optical_edges(seed):
    pair = generate_synthetic_pair(derive_seed(2024, seed), size=128)
    assert edge_correlation(pair) > EDGE_MIN_CORRELATION


def test_edge_correlation_drops_for_unrelated_scene(pair128):
    other = generate_synthetic_pair(8, size=128)
    mixed = PairSample(optical=other.optical, sar=pair128.sar, h_gt=pair128.h_gt,
                       land_use=pair128.land_use, prompt=pair128.prompt, tile_id="mixed")
    assert edge_correlation(mixed) < edge_correlation(pair128)


def test_edge_correlation_needs_ground_truth(pair128):
    pair = PairSample(optical=pair128.optical, sar=pair128.sar, h_gt=None,
                      land_use=pair128.land_use, prompt=pair128.prompt, tile_id="no_h")
    with pytest.raises(InvalidParameterError):
        edge_correlation(pair)


@pytest.mark.parametrize("seed", [3, 11, 42])
def test_land_use_is_pixel_count_of_layout(seed):
    pair = generate_synthetic_pair(seed, size=128)
    labels = label_layout(seed, size=128)
    np.testing.assert_array_equal(labels, label_layout(seed, size=128))
    counts = np.bincount(labels.reshape(-1), minlength=len(LAND_USE_CLASSES))
    np.testing.assert_array_equal(pair.land_use, counts / float(128 * 128))


def test_invalid_size_rejected():
    with pytest.raises(InvalidParameterError):
        generate_synthetic_pair(0, size=72)


def test_eval_pair_perturbation(pair128):
    pair = make_eval_pair(pair128.optical, pair128.sar, rng_seed=3)
    theta, scale = decompose_similarity(pair.h_gt.inverse())
    assert -10.0 - 1e-9 <= theta <= 10.0 + 1e-9 and 0.8 - 1e-9 <= scale <= 1.0 + 1e-9
    assert pair.prompt.text.endswith("others")


def test_dataset_digest_is_reproducible(tmp_path):
    write_dataset(tmp_path / "a", 3, seed=1, size=64)
    write_dataset(tmp_path / "b", 3, seed=1, size=64)
    assert dataset_digest(tmp_path / "a") == dataset_digest(tmp_path / "b")
    write_dataset(tmp_path / "c", 3, seed=2, size=64)
    assert dataset_digest(tmp_path / "a") != dataset_digest(tmp_path / "c")


def test_manifest_round_trip(tmp_path):
    paths = write_dataset(tmp_path, 2, seed=4, size=64)
    assert [p.name for p in manifest_paths(tmp_path)] == ["pair_00000.json", "pair_00001.json"]
    loaded = load_pair(paths[0])
    original = load_dataset(tmp_path)[0]
    np.testing.assert_array_equal(loaded.optical.pixels, original.optical.pixels)
    np.testing.assert_allclose(loaded.h_gt.m, original.h_gt.m)
    np.testing.assert_allclose(loaded.land_use, original.land_use)


def test_zero_pairs_is_usage_error(tmp_path):
    with pytest.raises(UsageError):
        write_dataset(tmp_path, 0, seed=0)
