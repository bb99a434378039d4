import argparse

from loguru import logger

from app.commands.common import add_common_flags, begin_run, resolve_config
from app.data.storage import dataset_digest, write_dataset
from app.errors import UsageError


def register(subparsers) -> None:
    parser = subparsers.add_parser("synth", help="Generate synthetic optical / pseudo-SAR pairs")
    add_common_flags(parser)
    parser.add_argument("--n-pairs", type=int, dest="n_pairs", help="Number of pairs")
    parser.add_argument("--size", type=int, help="Tile side, px")
    parser.set_defaults(handler=cmd_synth, command="synth")


def cmd_synth(args: argparse.Namespace, run_id: str) -> int:
    """
    Пишет N пар с манифестами в --out (или data_dir) и печатает дайджест датасета.
    """
    cfg = resolve_config(args)
    out_dir = args.out or cfg.data_dir
    cfg = cfg.model_copy(update={"data_dir": str(out_dir), "out_dir": str(out_dir)})
    s = cfg.synth
    if s.n_pairs < 1:
        raise UsageError(f"synth needs at least one pair, got n_pairs={s.n_pairs}")
    begin_run(run_id, "synth", cfg, out_dir)
    write_dataset(out_dir, s.n_pairs, cfg.seed, size=s.size, rot_range_deg=s.rot_range_deg,
                  scale_range=s.scale_range, speckle_looks=s.speckle_looks, blur_sigma=s.blur_sigma)
    digest = dataset_digest(out_dir)
    logger.info(f"Dataset digest {digest}")
    print(digest)
    return 0
