import json
import time
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from loguru import logger

from app.checkpoints import Stage2Bundle
from app.config import RunConfig, config_digest
from app.data.geometry import Homography
from app.data.synthetic import PairSample
from app.data.tiles import Modality, tile_to_tensor
from app.diffusion.denoiser import Condition
from app.diffusion.features import extract_sar_features
from app.errors import EstimationFailedError, UsageError
from app.features.descriptors import DescriptorSet, Keypoint, sample_descriptors
from app.keypoints.fast import detect_keypoints
from app.matching.homography import estimate_homography
from app.matching.matcher import Match, MatchSet, mutual_nn_match
from app.matching.metrics import aggregate_report, match_errors, metrics_from_errors, write_report
from app.matching.visualize import draw_matches
from app.schemas import EvalReport, MatchDump, MatchRecord, PairMetrics

MATCH_DIR = "matches"
OVERLAY_DIR = "overlays"


@dataclass
class PairOutcome:
    tile_id: str
    keypoints_opt: list[Keypoint]
    keypoints_sar: list[Keypoint]
    matches: MatchSet
    h_gt: Optional[Homography]
    h_est: Optional[Homography] = None
    inliers: Optional[np.ndarray] = None
    metrics: Optional[PairMetrics] = None
    timings: dict[str, float] = field(default_factory=dict)

    def to_dump(self) -> MatchDump:
        return MatchDump(
            tile_id=self.tile_id,
            keypoints_opt=[(kp.x, kp.y, kp.score) for kp in self.keypoints_opt],
            keypoints_sar=[(kp.x, kp.y, kp.score) for kp in self.keypoints_sar],
            matches=[MatchRecord(opt_index=m.opt_index, sar_index=m.sar_index, similarity=m.similarity)
                     for m in self.matches],
            h_gt=self.h_gt.to_list() if self.h_gt is not None else None,
            h_est=self.h_est.to_list() if self.h_est is not None else None,
            n_inliers=int(self.inliers.sum()) if self.inliers is not None else None,
        )


@dataclass
class MatchRun:
    outcomes: list[PairOutcome]
    report: Optional[EvalReport]
    report_paths: Optional[tuple[Path, Path]] = None


class _Timer:
    def __init__(self, timings: dict[str, float], stage: str):
        self.timings, self.stage = timings, stage

    def __enter__(self):
        self.started = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.timings[self.stage] = self.timings.get(self.stage, 0.0) + time.perf_counter() - self.started
        return False


@torch.no_grad()
def _describe_optical(bundle: Stage2Bundle, tile, keypoints: Sequence[Keypoint], device) -> DescriptorSet:
    fused = bundle.model.fuse_optical(tile_to_tensor(tile).to(device), [tile.tile_id])
    return sample_descriptors(fused, keypoints, bundle.cfg.descriptor.dim, bundle.model.head, Modality.OPTICAL)


@torch.no_grad()
def _describe_sar(bundle: Stage2Bundle, pair: PairSample, keypoints: Sequence[Keypoint], cfg: RunConfig,
                  device) -> DescriptorSet:
    stage1 = bundle.stage1
    cond = Condition.from_pair(pair, stage1.net.prompt_encoder, device)
    pyramid = extract_sar_features(stage1, cond, t_star=cfg.diffusion.t_star, noise_seed=cfg.diffusion.noise_seed)
    fused = bundle.model.fuse_sar(pyramid)
    return sample_descriptors(fused, keypoints, bundle.cfg.descriptor.dim, bundle.model.head, Modality.SAR)


def match_pair(bundle: Stage2Bundle, pair: PairSample, cfg: RunConfig, self_match: bool = False) -> PairOutcome:
    """
    Полный проход по паре: PC-FAST на оптике и (независимо) на SAR, дескрипторы,
    взаимные ближайшие соседи, RANSAC и метрики, если известна h_gt.
    self_match: оптика подаётся на обе стороны через оптическую ветку, h_gt тождественная.
    """
    device = next(bundle.model.parameters()).device
    timings: dict[str, float] = {}
    bundle.model.eval()

    with _Timer(timings, "detect"):
        kp_o = detect_keypoints(pair.optical, cfg.fast, cfg.pc)
        kp_s = kp_o if self_match else detect_keypoints(pair.sar, cfg.fast, cfg.pc)
    with _Timer(timings, "describe"):
        d_o = _describe_optical(bundle, pair.optical, kp_o, device)
        d_s = d_o if self_match else _describe_sar(bundle, pair, kp_s, cfg, device)
    kp_o, kp_s = list(d_o.keypoints), list(d_s.keypoints)
    with _Timer(timings, "match"):
        matches = mutual_nn_match(d_o, d_s, provenance=(pair.tile_id, pair.tile_id))

    h_gt = Homography.identity() if self_match else pair.h_gt
    outcome = PairOutcome(pair.tile_id, kp_o, kp_s, matches, h_gt, timings=timings)
    with _Timer(timings, "ransac"):
        try:
            outcome.h_est, outcome.inliers = estimate_homography(
                matches, kp_o, kp_s, cfg.eval.ransac_threshold_px, cfg.eval.ransac_iters, cfg.eval.ransac_seed)
        except EstimationFailedError as ex:
            logger.warning(f"Pair {pair.tile_id}: homography estimation failed ({ex})")
    if h_gt is not None:
        with _Timer(timings, "evaluate"):
            errors = match_errors(matches, kp_o, kp_s, h_gt)
            outcome.metrics = metrics_from_errors(errors, cfg.eval.eps_px, pair.tile_id,
                                                  cfg.eval.min_ncm, cfg.eval.failure_rmse)
    logger.debug(f"Pair {pair.tile_id}: {len(kp_o)}/{len(kp_s)} keypoints, {len(matches)} matches, "
                 f"metrics {outcome.metrics}")
    return outcome


def _save_outputs(outcome: PairOutcome, pair: PairSample, out_dir: Path, cfg: RunConfig,
                  visualize: bool) -> None:
    dump_path = out_dir / MATCH_DIR / f"{outcome.tile_id}.json"
    dump_path.parent.mkdir(parents=True, exist_ok=True)
    dump_path.write_text(outcome.to_dump().model_dump_json(indent=2), encoding="utf-8")
    if visualize:
        correct = None
        if outcome.h_gt is not None:
            correct = match_errors(outcome.matches, outcome.keypoints_opt, outcome.keypoints_sar,
                                   outcome.h_gt) < cfg.eval.eps_px
        draw_matches(pair.optical, pair.sar, outcome.matches, outcome.keypoints_opt, outcome.keypoints_sar,
                     out_dir / OVERLAY_DIR / f"{outcome.tile_id}.png", correct=correct)


def _total_timings(outcomes: Sequence[PairOutcome]) -> dict[str, float]:
    totals: dict[str, float] = defaultdict(float)
    for outcome in outcomes:
        for stage, seconds in outcome.timings.items():
            totals[stage] += seconds
    return dict(totals)


def match_tiles(bundle: Stage2Bundle, pairs: Sequence[PairSample], cfg: RunConfig,
                out_dir: Optional[str | Path] = None, workers: int = 1, visualize: bool = True,
                self_match: bool = False, method: Optional[str] = None) -> MatchRun:
    """
    Сопоставляет пары (параллельно при workers > 1) и собирает отчёт по парам с h_gt.
    Порядок результатов не зависит от порядка завершения.
    """
    if not pairs:
        raise UsageError("nothing to match: no pairs given")
    bundle.model.eval()
    bundle.stage1.net.eval()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(lambda p: match_pair(bundle, p, cfg, self_match), pairs))
    else:
        outcomes = [match_pair(bundle, p, cfg, self_match) for p in pairs]
    by_id = {p.tile_id: p for p in pairs}
    outcomes.sort(key=lambda o: o.tile_id)

    metrics = [o.metrics for o in outcomes if o.metrics is not None]
    report = None
    if metrics:
        report = aggregate_report(metrics, cfg.eval.eps_px, config_digest(cfg), method or cfg.ablation,
                                  _total_timings(outcomes))
    else:
        logger.warning("No pair carries a ground-truth homography; metrics omitted")

    run = MatchRun(outcomes=outcomes, report=report)
    if out_dir is not None:
        out_dir = Path(out_dir)
        for outcome in outcomes:
            _save_outputs(outcome, by_id[outcome.tile_id], out_dir, cfg, visualize)
        if report is not None:
            run.report_paths = write_report(report, out_dir)
    return run


def load_dumps(dump_dir: str | Path) -> list[MatchDump]:
    dump_dir = Path(dump_dir)
    if (dump_dir / MATCH_DIR).is_dir():
        dump_dir = dump_dir / MATCH_DIR
    paths = sorted(dump_dir.glob("*.json"))
    if not paths:
        raise UsageError(f"No match dumps found in {dump_dir}")
    return [MatchDump.model_validate(json.loads(p.read_text(encoding="utf-8"))) for p in paths]


def evaluate_dumps(dumps: Sequence[MatchDump], cfg: RunConfig, method: Optional[str] = None) -> EvalReport:
    """
    Пересчёт метрик по сохранённым ключевым точкам и соответствиям, без сети.
    """
    metrics = []
    for dump in dumps:
        if dump.h_gt is None:
            logger.warning(f"Dump {dump.tile_id} has no ground truth; skipped")
            continue
        kp_o = np.array([kp[:2] for kp in dump.keypoints_opt], dtype=np.float64).reshape(-1, 2)
        kp_s = np.array([kp[:2] for kp in dump.keypoints_sar], dtype=np.float64).reshape(-1, 2)
        matches = MatchSet(tuple(Match(m.opt_index, m.sar_index, m.similarity) for m in dump.matches),
                           (dump.tile_id, dump.tile_id))
        errors = match_errors(matches, kp_o, kp_s, Homography.from_list(dump.h_gt))
        metrics.append(metrics_from_errors(errors, cfg.eval.eps_px, dump.tile_id,
                                           cfg.eval.min_ncm, cfg.eval.failure_rmse))
    if not metrics:
        raise UsageError("none of the match dumps carries a ground-truth homography")
    return aggregate_report(metrics, cfg.eval.eps_px, config_digest(cfg), method or cfg.ablation)
