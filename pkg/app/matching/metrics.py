import math
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import pandas as pd
from loguru import logger

from app.config import ABLATIONS
from app.data.geometry import Homography
from app.errors import InvalidParameterError, UsageError
from app.features.descriptors import Keypoint, keypoints_to_array
from app.matching.matcher import MatchSet
from app.schemas import EvalReport, PairMetrics

MIN_NCM = 10
FAILURE_RMSE = 20.0
REPORT_JSON = "report.json"
REPORT_CSV = "report.csv"
COMPARISON_CSV = "comparison.csv"
PER_PAIR_COLUMNS = ["tile_id", "ncm", "rmse", "success", "excluded", "n_matches"]
# порядок столбцов сводной таблицы фиксирован
TABLE_COLUMNS = ["method", "SR", "NCM", "RMSE", "n_pairs", "eps_px", "warning"]


def match_errors(matches: MatchSet, kp_o: Sequence[Keypoint] | np.ndarray, kp_s: Sequence[Keypoint] | np.ndarray,
                 h_gt: Homography) -> np.ndarray:
    """
    ‖h_gt(p_o) − p_s‖₂ для каждого соответствия.
    """
    if len(matches) == 0:
        return np.zeros(0)
    pts_o = kp_o if isinstance(kp_o, np.ndarray) else keypoints_to_array(kp_o)
    pts_s = kp_s if isinstance(kp_s, np.ndarray) else keypoints_to_array(kp_s)
    opt_idx, sar_idx = matches.indices()
    projected = h_gt.apply(pts_o[opt_idx])
    return np.sqrt(((projected - pts_s[sar_idx]) ** 2).sum(axis=1))


def metrics_from_errors(errors: np.ndarray, eps_px: float, tile_id: str = "", min_ncm: int = MIN_NCM,
                        failure_rmse: float = FAILURE_RMSE) -> PairMetrics:
    if eps_px <= 0:
        raise InvalidParameterError(f"eps_px must be positive, got {eps_px}")
    errors = np.asarray(errors, dtype=np.float64)
    correct = np.sort(errors[errors < eps_px])
    ncm = int(len(correct))
    if ncm < min_ncm:
        return PairMetrics(tile_id=tile_id, n_matches=len(errors), ncm=ncm, rmse=failure_rmse,
                           success=False, excluded=True)
    # сумма по отсортированным ошибкам: результат не зависит от порядка соответствий
    rmse = math.sqrt(float(np.sum(correct ** 2)) / ncm)
    return PairMetrics(tile_id=tile_id, n_matches=len(errors), ncm=ncm, rmse=rmse, success=True, excluded=False)


def evaluate_pair(matches: MatchSet, kp_o, kp_s, h_gt: Homography, eps_px: float = 3.0,
                  tile_id: Optional[str] = None, min_ncm: int = MIN_NCM,
                  failure_rmse: float = FAILURE_RMSE) -> PairMetrics:
    """
    Соответствие верно, если ошибка по h_gt меньше eps_px. При NCM < 10 пара
    неуспешна: RMSE = 20, пара исключается из средних.
    """
    tile_id = tile_id if tile_id is not None else matches.provenance[0]
    return metrics_from_errors(match_errors(matches, kp_o, kp_s, h_gt), eps_px, tile_id, min_ncm, failure_rmse)


def aggregate_report(metrics: Iterable[PairMetrics], eps_px: float = 3.0, config_digest: str = "",
                     method: str = "full", timings: Optional[dict[str, float]] = None) -> EvalReport:
    """
    SR по всем парам; средние NCM и RMSE только по успешным (None, если таких нет).
    """
    per_pair = sorted(metrics, key=lambda m: m.tile_id)
    if not per_pair:
        raise InvalidParameterError("cannot aggregate an empty list of pair metrics")
    successes = [m for m in per_pair if m.success]
    sr = 100.0 * len(successes) / len(per_pair)
    mean_ncm = float(np.mean([m.ncm for m in successes])) if successes else None
    mean_rmse = float(np.mean([m.rmse for m in successes])) if successes else None
    return EvalReport(method=method, sr_percent=sr, mean_ncm=mean_ncm, mean_rmse=mean_rmse,
                      n_pairs=len(per_pair), eps_px=eps_px, per_pair=per_pair,
                      config_digest=config_digest, timings=dict(timings or {}))


def write_report(report: EvalReport, out_dir: str | Path) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path, csv_path = out_dir / REPORT_JSON, out_dir / REPORT_CSV
    json_path.write_text(report.model_dump_json(indent=2), encoding="utf-8")
    frame = pd.DataFrame([m.model_dump() for m in report.per_pair], columns=PER_PAIR_COLUMNS)
    frame.to_csv(csv_path, index=False)
    logger.info(f"Report: SR {report.sr_percent:.1f}%, NCM {report.mean_ncm}, RMSE {report.mean_rmse} "
                f"over {report.n_pairs} pairs -> {json_path}")
    return json_path, csv_path


def read_report(path: str | Path) -> EvalReport:
    path = Path(path)
    if path.is_dir():
        path = path / REPORT_JSON
    if not path.is_file():
        raise UsageError(f"Report not found: {path}")
    return EvalReport.model_validate_json(path.read_text(encoding="utf-8"))


def comparison_table(reports: Sequence[EvalReport]) -> pd.DataFrame:
    """
    Одна строка на отчёт: SR, NCM, RMSE. Варианты абляции идут в порядке ABLATIONS,
    прочие методы за ними в исходном порядке. Разные eps_px помечаются предупреждением.
    """
    if not reports:
        raise UsageError("report needs at least one input report")
    rank = {name: i for i, name in enumerate(ABLATIONS)}
    reports = sorted(reports, key=lambda r: rank.get(r.method, len(rank)))
    eps_values = {r.eps_px for r in reports}
    warning = ""
    if len(eps_values) > 1:
        warning = f"eps_px differs across reports: {sorted(eps_values)}"
        logger.warning(warning)
    rows = [{"method": r.method, "SR": r.sr_percent, "NCM": r.mean_ncm, "RMSE": r.mean_rmse,
             "n_pairs": r.n_pairs, "eps_px": r.eps_px, "warning": warning} for r in reports]
    return pd.DataFrame(rows, columns=TABLE_COLUMNS)
