import numpy as np
import pytest

from app.data.geometry import Homography, similarity_about_point
from app.errors import EstimationFailedError, InvalidParameterError
from app.features.descriptors import Keypoint
from app.matching.homography import estimate_homography, ransac_points, transfer_errors
from app.matching.matcher import Match, MatchSet, mutual_nn_match


def _unit_rows(n, d, seed):
    v = np.random.default_rng(seed).standard_normal((n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def test_identity_descriptors_match_themselves():
    matches = mutual_nn_match(np.eye(5), np.eye(5), ("a_opt", "a_sar"))
    assert sorted((m.opt_index, m.sar_index) for m in matches) == [(i, i) for i in range(5)]
    assert matches.provenance == ("a_opt", "a_sar")


def test_permutation_is_recovered():
    d = _unit_rows(20, 16, 0)
    perm = np.random.default_rng(1).permutation(20)
    matches = mutual_nn_match(d, d[perm])
    inverse = np.argsort(perm)
    assert len(matches) == 20
    assert all(m.sar_index == inverse[m.opt_index] for m in matches)


def test_matches_are_injective_and_sorted():
    matches = mutual_nn_match(_unit_rows(40, 8, 2), _unit_rows(30, 8, 3))
    opt, sar = matches.indices()
    assert len(set(opt)) == len(opt) and len(set(sar)) == len(sar)
    sims = [m.similarity for m in matches]
    assert sims == sorted(sims, reverse=True)


def test_ties_go_to_lower_index():
    matches = mutual_nn_match(np.array([[1.0, 0.0], [1.0, 0.0]]), np.array([[1.0, 0.0]]))
    assert [(m.opt_index, m.sar_index) for m in matches] == [(0, 0)]


def test_empty_side_gives_empty_set():
    assert len(mutual_nn_match(np.zeros((0, 4)), _unit_rows(3, 4, 0))) == 0
    assert len(mutual_nn_match(_unit_rows(3, 4, 0), np.zeros((0, 4)))) == 0


def test_match_set_rejects_duplicates():
    with pytest.raises(InvalidParameterError):
        MatchSet((Match(0, 1, 0.9), Match(0, 2, 0.8)))


def _similarity_points(n=40, seed=0):
    rng = np.random.default_rng(seed)
    src = rng.uniform(10, 118, size=(n, 2))
    h = similarity_about_point(7.0, 0.9, 64.0, 64.0).m @ np.array([[1, 0, 3.0], [0, 1, -2.0], [0, 0, 1]])
    return src, Homography(h).apply(src), h


def test_ransac_recovers_clean_similarity():
    src, dst, h = _similarity_points()
    model, mask = ransac_points(src, dst, seed=0)
    assert mask.all()
    np.testing.assert_allclose(model.m / model.m[2, 2], h / h[2, 2], atol=1e-4)
    assert transfer_errors(model.m, src, dst).max() < 1e-6


def test_ransac_rejects_outliers():
    src, dst, h = _similarity_points(100, seed=4)
    rng = np.random.default_rng(5)
    outliers = np.arange(50, 100)
    dst[outliers] = rng.uniform(0, 128, size=(50, 2))
    far = transfer_errors(h, src[outliers], dst[outliers]) > 3.0
    model, mask = ransac_points(src, dst, threshold_px=3.0, max_iters=2000, seed=1)
    assert mask[:50].all()
    assert mask[outliers][far].sum() <= 0.05 * far.sum()
    np.testing.assert_allclose(model.m / model.m[2, 2], h / h[2, 2], atol=1e-3)


def test_ransac_is_seeded():
    src, dst, _ = _similarity_points(30, seed=6)
    dst[::3] += 25.0
    a, mask_a = ransac_points(src, dst, seed=2)
    b, mask_b = ransac_points(src, dst, seed=2)
    np.testing.assert_array_equal(a.m, b.m)
    np.testing.assert_array_equal(mask_a, mask_b)


def test_too_few_matches_fail():
    src, dst, _ = _similarity_points(3)
    with pytest.raises(EstimationFailedError):
        ransac_points(src, dst)


def test_collinear_points_fail():
    src = np.stack([np.linspace(0, 100, 12), np.linspace(5, 60, 12)], axis=1)
    with pytest.raises(EstimationFailedError):
        ransac_points(src, src + 1.0)


def test_estimate_from_keypoints_and_matches():
    src, dst, h = _similarity_points(12, seed=8)
    kp_o = [Keypoint(float(x), float(y), 1.0) for x, y in src]
    kp_s = [Keypoint(float(x), float(y), 1.0) for x, y in dst[::-1]]
    matches = MatchSet(tuple(Match(i, 11 - i, 0.9) for i in range(12)))
    model, mask = estimate_homography(matches, kp_o, kp_s, 3.0, 500, 0)
    assert mask.all()
    np.testing.assert_allclose(model.m / model.m[2, 2], h / h[2, 2], atol=1e-4)
    with pytest.raises(EstimationFailedError):
        estimate_homography(MatchSet(matches.pairs[:3]), kp_o, kp_s, 3.0, 500, 0)
