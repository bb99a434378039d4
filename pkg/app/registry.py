from datetime import datetime
from typing import Optional
from uuid import uuid4

from loguru import logger
from sqlalchemy import select

from app.db_depends import get_db
from app.errors import UsageError
from app.matching.metrics import aggregate_report
from app.models import CheckpointRecord, PairResult, Run
from app.schemas import EvalReport, PairMetrics, RunRecord


def start_run(command: str, config_digest: str, out_dir: str, run_id: Optional[str] = None) -> str:
    run_id = run_id or str(uuid4())
    with get_db() as db:
        db.add(Run(id=run_id, command=command, status="running", config_digest=config_digest,
                   out_dir=str(out_dir), started_at=datetime.now()))
    return run_id


def finish_run(run_id: str, status: str, exit_code: int) -> None:
    with get_db() as db:
        run = db.get(Run, run_id)
        if run is None:
            logger.debug(f"Run {run_id} is not in the registry")
            return
        run.status = status
        run.exit_code = exit_code
        run.finished_at = datetime.now()


def get_run(run_id: str) -> RunRecord:
    with get_db() as db:
        run = db.get(Run, run_id)
        if run is None:
            raise UsageError(f"Run {run_id} not found in the registry")
        return RunRecord.model_validate(run)


def record_checkpoint(run_id: str, stage: str, path: str, digest: str, frozen_digest: str, epoch: int) -> None:
    with get_db() as db:
        db.add(CheckpointRecord(run_id=run_id, stage=stage, path=str(path), digest=digest,
                                frozen_digest=frozen_digest, epoch=epoch))


def record_pair_results(run_id: str, report: EvalReport) -> int:
    with get_db() as db:
        db.add_all([PairResult(run_id=run_id, method=report.method, eps_px=report.eps_px, tile_id=m.tile_id,
                               n_matches=m.n_matches, ncm=m.ncm, rmse=m.rmse, success=m.success,
                               excluded=m.excluded)
                    for m in report.per_pair])
    return len(report.per_pair)


def reports_for_run(run_id: str) -> list[EvalReport]:
    """
    Восстанавливает отчёты запуска из строк pair_results (по одному на метод и eps_px).
    """
    run = get_run(run_id)
    with get_db() as db:
        rows = db.scalars(select(PairResult).where(PairResult.run_id == run_id)
                          .order_by(PairResult.method, PairResult.eps_px, PairResult.tile_id)).all()
    if not rows:
        raise UsageError(f"Run {run_id} has no recorded pair results")
    groups: dict[tuple[str, float], list[PairMetrics]] = {}
    for row in rows:
        groups.setdefault((row.method, row.eps_px), []).append(
            PairMetrics(tile_id=row.tile_id, n_matches=row.n_matches, ncm=row.ncm, rmse=row.rmse,
                        success=row.success, excluded=row.excluded))
    return [aggregate_report(metrics, eps_px, run.config_digest, method)
            for (method, eps_px), metrics in groups.items()]
