import argparse

from loguru import logger

from app.checkpoints import load_stage1
from app.commands.common import add_common_flags, begin_run, resolve_config
from app.data.storage import load_dataset
from app.diffusion.trainer import train_stage1
from app.digests import parameter_digest
from app.errors import MissingPrerequisiteError
from app.features.optical import freeze_report
from app.features.trainer import train_stage2
from app.registry import record_checkpoint


def register(subparsers) -> None:
    diffusion = subparsers.add_parser("train-diffusion", help="Stage 1: train the SAR-conditioned denoiser")
    add_common_flags(diffusion)
    diffusion.add_argument("--data", help="Dataset directory")
    diffusion.add_argument("--epochs", type=int)
    diffusion.add_argument("--resume", help="Resume from a diffusion checkpoint")
    diffusion.set_defaults(handler=cmd_train_diffusion, command="train-diffusion", epochs_section="stage1")

    descriptors = subparsers.add_parser("train-descriptors", help="Stage 2: train fusion and descriptors")
    add_common_flags(descriptors)
    descriptors.add_argument("--data", help="Dataset directory")
    descriptors.add_argument("--epochs", type=int)
    descriptors.add_argument("--stage1", help="Diffusion checkpoint from train-diffusion")
    descriptors.add_argument("--resume", help="Resume from a descriptor checkpoint")
    descriptors.set_defaults(handler=cmd_train_descriptors, command="train-descriptors", epochs_section="stage2")


def cmd_train_diffusion(args: argparse.Namespace, run_id: str) -> int:
    cfg = resolve_config(args)
    out_dir = begin_run(run_id, "train-diffusion", cfg, cfg.out_dir)
    dataset = load_dataset(cfg.data_dir)
    result = train_stage1(dataset, cfg, out_dir, resume=args.resume)
    net = result.bundle.net
    record_checkpoint(run_id, "diffusion", str(result.checkpoint), parameter_digest(net),
                      parameter_digest(net.base), result.bundle.epoch)
    logger.info(f"Diffusion checkpoint: {result.checkpoint}, log: {result.log}")
    print(result.checkpoint)
    return 0


def cmd_train_descriptors(args: argparse.Namespace, run_id: str) -> int:
    """
    Второй этап. Секции schedule и diffusion (кроме t* и сида шума) берутся из чекпоинта первого этапа.
    """
    cfg = resolve_config(args)
    stage1 = None
    if not cfg.removes("diffusion"):
        if not args.stage1:
            raise MissingPrerequisiteError("train-descriptors needs --stage1 <diffusion checkpoint>")
        stage1 = load_stage1(args.stage1, device=cfg.device)
        diffusion = stage1.cfg.diffusion.model_copy(
            update={"t_star": cfg.diffusion.t_star, "noise_seed": cfg.diffusion.noise_seed})
        cfg = cfg.model_copy(update={"schedule": stage1.cfg.schedule, "diffusion": diffusion})
    out_dir = begin_run(run_id, "train-descriptors", cfg, cfg.out_dir)
    dataset = load_dataset(cfg.data_dir)
    result = train_stage2(dataset, stage1, cfg, out_dir, resume=args.resume)
    model = result.bundle.model
    record_checkpoint(run_id, "descriptors", str(result.checkpoint), parameter_digest(model),
                      freeze_report(model.optical), result.bundle.epoch)
    logger.info(f"Descriptor checkpoint: {result.checkpoint}, log: {result.log}")
    print(result.checkpoint)
    return 0
