import math

import numpy as np
import pandas as pd
import pytest

from app.data.geometry import Homography
from app.errors import InvalidParameterError, UsageError
from app.matching.matcher import Match, MatchSet
from app.matching.metrics import (FAILURE_RMSE, TABLE_COLUMNS, aggregate_report, comparison_table, evaluate_pair,
                                  metrics_from_errors, read_report, write_report)
from app.schemas import PairMetrics


def _instance(offsets, tile_id="t"):
    """
    Точки SAR: точки оптики плюс заданные сдвиги; h_gt тождественная.
    """
    offsets = np.asarray(offsets, dtype=np.float64).reshape(-1, 2)
    kp_o = np.arange(2 * len(offsets), dtype=np.float64).reshape(-1, 2) * 3.0
    kp_s = kp_o + offsets
    matches = MatchSet(tuple(Match(i, i, 0.5) for i in range(len(offsets))), (tile_id, tile_id))
    return matches, kp_o, kp_s


def test_exact_matches():
    m = evaluate_pair(*_instance(np.zeros((15, 2))), Homography.identity())
    assert (m.ncm, m.rmse, m.success, m.excluded) == (15, 0.0, True, False)


def test_nine_correct_is_a_failure():
    offsets = np.vstack([np.zeros((9, 2)), np.full((5, 2), 10.0)])
    m = evaluate_pair(*_instance(offsets), Homography.identity())
    assert (m.ncm, m.rmse, m.success, m.excluded) == (9, FAILURE_RMSE, False, True)
    assert m.n_matches == 14


def test_hand_computed_rmse():
    offsets = [(1.0, 0.0)] * 6 + [(0.0, 2.0)] * 6
    m = evaluate_pair(*_instance(offsets), Homography.identity())
    assert m.ncm == 12
    assert m.rmse == pytest.approx(math.sqrt(2.5), abs=1e-12)


def test_eps_is_strict_and_positive():
    offsets = [(3.0, 0.0)] * 12
    assert evaluate_pair(*_instance(offsets), Homography.identity(), eps_px=3.0).ncm == 0
    assert evaluate_pair(*_instance(offsets), Homography.identity(), eps_px=3.5).ncm == 12
    with pytest.raises(InvalidParameterError):
        metrics_from_errors(np.zeros(3), eps_px=0.0)


def test_ground_truth_is_applied_to_optical_points():
    shift = Homography(np.array([[1.0, 0.0, 5.0], [0.0, 1.0, -2.0], [0.0, 0.0, 1.0]]))
    matches, kp_o, _ = _instance(np.zeros((12, 2)))
    m = evaluate_pair(matches, kp_o, shift.apply(kp_o), shift)
    assert m.ncm == 12 and m.rmse == pytest.approx(0.0, abs=1e-12)


def test_order_invariance():
    rng = np.random.default_rng(0)
    errors = rng.uniform(0, 4, size=40)
    a = metrics_from_errors(errors, 3.0)
    b = metrics_from_errors(errors[rng.permutation(40)], 3.0)
    assert a.rmse == b.rmse and a.ncm == b.ncm


def _brute_force(offsets, eps):
    errs = [math.hypot(dx, dy) for dx, dy in offsets]
    correct = [e for e in errs if e < eps]
    if len(correct) < 10:
        return len(correct), 20.0, False
    return len(correct), math.sqrt(sum(e * e for e in correct) / len(correct)), True


def test_matches_brute_force_on_random_instances():
    rng = np.random.default_rng(42)
    for _ in range(100):
        n = int(rng.integers(0, 51))
        offsets = rng.normal(0, 2.5, size=(n, 2))
        eps = float(rng.choice([1.0, 3.0, 5.0]))
        m = evaluate_pair(*_instance(offsets), Homography.identity(), eps_px=eps)
        ncm, rmse, success = _brute_force(offsets, eps)
        assert m.ncm == ncm and m.success == success
        assert abs(m.rmse - rmse) < 1e-9


def test_success_rate_is_monotone_in_eps():
    rng = np.random.default_rng(7)
    pairs = [rng.normal(0, 3, size=(30, 2)) for _ in range(8)]
    rates = []
    for eps in (1.0, 2.0, 3.0, 5.0, 8.0):
        metrics = [evaluate_pair(*_instance(o, f"p{i}"), Homography.identity(), eps_px=eps) for i, o in enumerate(pairs)]
        rates.append(aggregate_report(metrics, eps).sr_percent)
    assert rates == sorted(rates)


def _pm(tile_id, ncm, rmse=1.0):
    success = ncm >= 10
    return PairMetrics(tile_id=tile_id, n_matches=ncm, ncm=ncm, rmse=rmse if success else 20.0,
                       success=success, excluded=not success)


def test_aggregate_cases():
    both = aggregate_report([_pm("a", 100), _pm("b", 200)])
    assert both.sr_percent == 100.0 and both.mean_ncm == 150.0
    mixed = aggregate_report([_pm("b", 3), _pm("a", 40, rmse=1.5)])
    assert mixed.sr_percent == 50.0 and mixed.mean_ncm == 40.0 and mixed.mean_rmse == 1.5
    assert [m.tile_id for m in mixed.per_pair] == ["a", "b"]
    none = aggregate_report([_pm("a", 2), _pm("b", 0)])
    assert none.sr_percent == 0.0 and none.mean_ncm is None and none.mean_rmse is None
    with pytest.raises(InvalidParameterError):
        aggregate_report([])


def test_failure_flag_must_negate_success():
    with pytest.raises(ValueError):
        PairMetrics(tile_id="x", n_matches=0, ncm=0, rmse=20.0, success=False, excluded=False)


def test_write_and_read_report(tmp_path):
    report = aggregate_report([_pm("a", 12), _pm("b", 4)], eps_px=3.0, config_digest="abc", method="full")
    json_path, csv_path = write_report(report, tmp_path / "eval")
    assert read_report(tmp_path / "eval") == read_report(json_path)
    back = read_report(json_path)
    assert back.sr_percent == 50.0 and back.config_digest == "abc"
    frame = pd.read_csv(csv_path)
    assert list(frame["tile_id"]) == ["a", "b"]
    with pytest.raises(UsageError):
        read_report(tmp_path / "missing")


def test_comparison_table():
    one = comparison_table([aggregate_report([_pm("a", 12)], eps_px=3.0, method="full")])
    assert list(one.columns) == TABLE_COLUMNS
    assert list(one.columns[1:4]) == ["SR", "NCM", "RMSE"]
    assert len(one) == 1 and one["warning"].iloc[0] == ""
    two = comparison_table([aggregate_report([_pm("a", 12)], eps_px=3.0, method="full"),
                            aggregate_report([_pm("a", 12)], eps_px=5.0, method="no_msaa")])
    assert len(two) == 2
    assert all("eps_px differs" in w for w in two["warning"])
    with pytest.raises(UsageError):
        comparison_table([])


def test_comparison_table_lists_ablations_in_fixed_order():
    reports = [aggregate_report([_pm("a", 12)], eps_px=3.0, method=m)
               for m in ("baseline", "custom", "no_msaa", "full", "no_vfm", "untrained_diffusion")]
    table = comparison_table(reports)
    assert list(table["method"]) == ["full", "no_vfm", "no_msaa", "untrained_diffusion", "baseline", "custom"]
