import argparse
from pathlib import Path

from loguru import logger

from app.commands.common import begin_run
from app.config import RunConfig
from app.errors import UsageError
from app.matching.metrics import COMPARISON_CSV, comparison_table, read_report
from app.matching.visualize import plot_rmse_histogram, plot_sr_bar
from app.registry import reports_for_run

RMSE_PLOT = "rmse_hist.png"
SR_PLOT = "sr_bar.png"


def register(subparsers) -> None:
    parser = subparsers.add_parser("report", help="Merge reports into a comparison table with plots")
    parser.add_argument("reports", nargs="*", help="report.json files or match output directories")
    parser.add_argument("--run-id", action="append", dest="run_ids", default=[],
                        help="Pull reports recorded in the registry for this run")
    parser.add_argument("--out", default="runs/report", help="Output directory")
    parser.set_defaults(handler=cmd_report, command="report")


def cmd_report(args: argparse.Namespace, run_id: str) -> int:
    reports = [read_report(path) for path in args.reports]
    for recorded in args.run_ids:
        reports.extend(reports_for_run(recorded))
    if not reports:
        raise UsageError("report needs at least one report path or --run-id")
    out_dir = Path(args.out)
    begin_run(run_id, "report", RunConfig(out_dir=str(out_dir)), out_dir)
    table = comparison_table(reports)
    table.to_csv(out_dir / COMPARISON_CSV, index=False)
    plot_rmse_histogram(reports, out_dir / RMSE_PLOT)
    plot_sr_bar(reports, out_dir / SR_PLOT)
    logger.info(f"Comparison of {len(reports)} report(s) written to {out_dir / COMPARISON_CSV}")
    print(table.to_string(index=False))
    return 0
