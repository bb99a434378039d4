import argparse
import sys
from typing import Optional, Sequence
from uuid import uuid4

from loguru import logger

from app.commands import match, report, synth, train
from app.config import LOG_FILE, LOG_LEVEL
from app.database import init_registry
from app.errors import MatcherError
from app.registry import finish_run

logger.remove()
logger.configure(extra={"log_id": "-"})
logger.add(sys.stderr, level=LOG_LEVEL)
logger.add(LOG_FILE,
           format="Log: [{extra[log_id]}:{time} - {level} - {message}]",
           level="INFO",
           enqueue=True)


def build_parser() -> argparse.ArgumentParser:
    # Создаём парсер командной строки
    parser = argparse.ArgumentParser(
        prog="optsar",
        description="Optical-SAR matching: synthetic data, two-stage training, matching and evaluation",
    )
    subparsers = parser.add_subparsers(dest="verb", required=True)

    # Подключаем команды
    synth.register(subparsers)
    train.register(subparsers)
    match.register(subparsers)
    report.register(subparsers)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Точка входа CLI. Коды возврата: 0: успех, 2: ошибка использования,
    3: нет нужного чекпоинта, 4: обучение прервано.
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as ex:
        return int(ex.code or 0)

    run_id = str(uuid4())
    with logger.contextualize(log_id=run_id):
        try:
            init_registry()
            code = args.handler(args, run_id)
            logger.info(f"Command {args.command} succeeded. Exit code: {code}")
        except MatcherError as ex:
            code = ex.exit_code
            logger.warning(f"Command {args.command} failed. Exit code: {code}. {type(ex).__name__}: {ex}")
        except Exception as ex:
            code = 1
            logger.error(f"Command {args.command} failed. Exception: {ex}")
        try:
            finish_run(run_id, "ok" if code == 0 else "failed", code)
        except Exception as ex:
            logger.error(f"Could not update run {run_id} in the registry: {ex}")
    return code


if __name__ == "__main__":
    sys.exit(main())
