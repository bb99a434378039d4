import pytest

from app.db_depends import get_db
from app.errors import UsageError
from app.matching.metrics import aggregate_report
from app.models import CheckpointRecord, Run
from app.registry import (finish_run, get_run, record_checkpoint, record_pair_results, reports_for_run,
                          start_run)
from app.schemas import PairMetrics


def _pm(tile_id, ncm):
    success = ncm >= 10
    return PairMetrics(tile_id=tile_id, n_matches=ncm, ncm=ncm, rmse=1.0 if success else 20.0,
                       success=success, excluded=not success)


def test_run_lifecycle():
    run_id = start_run("synth", "d" * 64, "runs/x")
    assert get_run(run_id).status == "running"
    finish_run(run_id, "ok", 0)
    record = get_run(run_id)
    assert record.status == "ok" and record.finished_at is not None
    with get_db() as db:
        assert db.get(Run, run_id).exit_code == 0


def test_unknown_run():
    finish_run("missing", "failed", 1)
    with pytest.raises(UsageError):
        get_run("missing")


def test_checkpoint_records():
    run_id = start_run("train-diffusion", "d" * 64, "runs/s1")
    record_checkpoint(run_id, "diffusion", "runs/s1/diffusion.pt", "a" * 64, "b" * 64, 3)
    with get_db() as db:
        run = db.get(Run, run_id)
        assert [(c.stage, c.epoch) for c in run.checkpoints] == [("diffusion", 3)]
        assert db.query(CheckpointRecord).count() == 1


def test_reports_rebuilt_from_pair_results():
    run_id = start_run("match", "c" * 64, "runs/m")
    report = aggregate_report([_pm("a", 30), _pm("b", 4), _pm("c", 50)], eps_px=3.0, method="full")
    assert record_pair_results(run_id, report) == 3
    rebuilt = reports_for_run(run_id)
    assert len(rebuilt) == 1
    assert rebuilt[0].sr_percent == pytest.approx(report.sr_percent)
    assert rebuilt[0].mean_ncm == report.mean_ncm
    assert rebuilt[0].config_digest == "c" * 64
    with pytest.raises(UsageError):
        reports_for_run(start_run("match", "c" * 64, "runs/empty"))
