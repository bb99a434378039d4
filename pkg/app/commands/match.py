import argparse
import json
from pathlib import Path

from loguru import logger

from app.checkpoints import load_stage2
from app.commands.common import add_common_flags, begin_run, resolve_config
from app.config import RESOLVED_CONFIG_NAME, RunConfig, model_digest
from app.data.storage import load_pair, load_dataset
from app.errors import ConfigMismatchError, UsageError
from app.matching.metrics import COMPARISON_CSV, comparison_table, write_report
from app.matching.pipeline import evaluate_dumps, load_dumps, match_tiles
from app.registry import record_pair_results


def register(subparsers) -> None:
    match = subparsers.add_parser("match", help="Detect, describe, match and evaluate pairs")
    add_common_flags(match)
    match.add_argument("--ckpt", required=True, help="Descriptor checkpoint from train-descriptors")
    match.add_argument("--stage1", help="Diffusion checkpoint (defaults to the one referenced by --ckpt)")
    source = match.add_mutually_exclusive_group()
    source.add_argument("--data", help="Dataset directory")
    source.add_argument("--pair", help="Single pair manifest")
    match.add_argument("--self-match", action="store_true", dest="self_match",
                       help="Match each optical tile against itself through the optical branch")
    match.add_argument("--no-viz", action="store_true", dest="no_viz", help="Skip match overlays")
    match.add_argument("--method", help="Method name in the report (defaults to the ablation)")
    match.set_defaults(handler=cmd_match, command="match")

    evaluate = subparsers.add_parser("evaluate", help="Recompute a report from saved match dumps")
    add_common_flags(evaluate)
    evaluate.add_argument("--dumps", required=True, action="append",
                          help="Output directory of a match run; repeat to compare methods")
    evaluate.add_argument("--method", help="Method name in the report")
    evaluate.set_defaults(handler=cmd_evaluate, command="evaluate")


def cmd_match(args: argparse.Namespace, run_id: str) -> int:
    """
    Конфигурация чекпоинта служит базой; файл и флаги могут менять только параметры инференса.
    """
    bundle = load_stage2(args.ckpt, stage1_path=args.stage1)
    cfg = resolve_config(args, base=bundle.cfg.model_dump(mode="json"))
    if model_digest(cfg) != bundle.state["model_digest"]:
        raise ConfigMismatchError(
            f"configuration does not match checkpoint {args.ckpt}: model-shaping settings differ "
            f"({model_digest(cfg)[:12]} vs {bundle.state['model_digest'][:12]})")
    bundle.model.to(cfg.device)
    bundle.stage1.net.to(cfg.device)

    pairs = [load_pair(args.pair)] if args.pair else load_dataset(args.data or cfg.data_dir)
    if not pairs:
        raise UsageError("no pairs to match")
    out_dir = Path(args.out) if args.out else Path(args.ckpt).parent / "match"
    cfg = cfg.model_copy(update={"out_dir": str(out_dir)})
    begin_run(run_id, "match", cfg, out_dir)
    run = match_tiles(bundle, pairs, cfg, out_dir=out_dir, workers=cfg.workers, visualize=not args.no_viz,
                      self_match=args.self_match, method=args.method)
    if run.report is not None:
        record_pair_results(run_id, run.report)
        logger.info(f"Report written to {run.report_paths[0]}")
    return 0


def _dumps_config(args: argparse.Namespace, dumps_dir: Path) -> RunConfig:
    base = None
    stored = dumps_dir / RESOLVED_CONFIG_NAME
    if stored.is_file():
        base = json.loads(stored.read_text(encoding="utf-8"))
    return resolve_config(args, base=base)


def cmd_evaluate(args: argparse.Namespace, run_id: str) -> int:
    """
    Каждый каталог --dumps оценивается со своей сохранённой конфигурацией; метод берётся
    из её абляции. Для нескольких каталогов пишется сводная таблица в --out.
    """
    dumps_dirs = [Path(d) for d in args.dumps]
    if len(dumps_dirs) == 1:
        cfg = _dumps_config(args, dumps_dirs[0])
        out_dir = Path(args.out) if args.out else dumps_dirs[0] / f"eval_eps{cfg.eval.eps_px:g}"
        cfg = cfg.model_copy(update={"out_dir": str(out_dir)})
        begin_run(run_id, "evaluate", cfg, out_dir)
        report = evaluate_dumps(load_dumps(dumps_dirs[0]), cfg, method=args.method)
        write_report(report, out_dir)
        record_pair_results(run_id, report)
        return 0

    if args.method:
        raise UsageError("--method names a single report; drop it when passing several --dumps")
    if not args.out:
        raise UsageError("evaluate with several --dumps needs --out for the comparison table")
    out_dir = Path(args.out)
    configs = [_dumps_config(args, d) for d in dumps_dirs]
    begin_run(run_id, "evaluate", configs[0].model_copy(update={"out_dir": str(out_dir)}), out_dir)
    reports = []
    for index, (dumps_dir, cfg) in enumerate(zip(dumps_dirs, configs)):
        report = evaluate_dumps(load_dumps(dumps_dir), cfg)
        write_report(report, out_dir / f"{index:02d}_{report.method}")
        record_pair_results(run_id, report)
        reports.append(report)
    table = comparison_table(reports)
    table.to_csv(out_dir / COMPARISON_CSV, index=False)
    logger.info(f"Comparison of {len(reports)} method(s) written to {out_dir / COMPARISON_CSV}")
    print(table.to_string(index=False))
    return 0
