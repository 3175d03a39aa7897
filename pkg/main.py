"""
Command-line entry point: one subcommand per pipeline stage, plus `all`
"""
import argparse
import logging
import os
import sys
from typing import Callable, Dict, List, Optional

from core.config import CONFIG_FILENAME, EXIT_MISSING_DEPENDENCY, EXIT_OK, EXIT_UNEXPECTED, resolve_device
from core.exceptions import BaseCustomException, log_error
from models.experiment import ExperimentConfig
from models.records import Label, TrainRegime
from services.training import seed_everything
from stages.audit import run_audit
from stages.classification import run_evaluate, run_train_multimodal, run_train_unimodal
from stages.data import accepted_synthetic, load_dataset, pipeline_modalities, run_prepare
from stages.filtering import run_gate, run_train_filter
from stages.generation import run_sample, run_train_ddpm
from stages.registry import RunContext
from stages.reports import run_explain, run_report
from utils.structured_logging import setup_logging, track_error

logger = logging.getLogger(__name__)

REGIMES = [r.value for r in TrainRegime]

SIMPLE_STAGES: Dict[str, Callable[[RunContext], object]] = {
    "prepare": run_prepare,
    "train-ddpm": run_train_ddpm,
    "sample": run_sample,
    "train-filter": run_train_filter,
    "gate": run_gate,
    "audit": run_audit,
    "evaluate": run_evaluate,
    "explain": run_explain,
    "report": run_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="retina-synth",
        description="Class-conditional retinal image synthesis, gating, audit and AmyloidPET classification",
    )
    parser.add_argument("--config", help="YAML experiment config; defaults to <run-dir>/config.yaml, then the desk preset")
    parser.add_argument("--run-dir", help="Run directory (overrides output_dir)")
    parser.add_argument("--workers", type=int, help="Cap on intra-stage parallelism")
    parser.add_argument("--device", help="Torch device, e.g. cpu or cuda")
    parser.add_argument("--allow-config-mismatch", action="store_true",
                        help="Accept upstream artifacts produced under a different config")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SIMPLE_STAGES:
        sub.add_parser(name)
    unimodal = sub.add_parser("train-unimodal")
    unimodal.add_argument("--regime", choices=REGIMES, default=TrainRegime.REAL_ONLY.value)
    multimodal = sub.add_parser("train-multimodal")
    multimodal.add_argument("--regime", choices=REGIMES, default=TrainRegime.REAL_ONLY.value)
    multimodal.add_argument("--metadata", action="store_true", help="Append encoded age and sex to the fusion input")
    sub.add_parser("all", help="Every stage, every regime, fusion with and without metadata")
    return parser


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    if args.config:
        config = ExperimentConfig.load(args.config)
    elif args.run_dir and os.path.exists(os.path.join(args.run_dir, CONFIG_FILENAME)):
        config = ExperimentConfig.load(os.path.join(args.run_dir, CONFIG_FILENAME))
    else:
        config = ExperimentConfig.desk_scale()
    config = config.with_env_overrides()
    updates = {}
    if args.run_dir:
        updates["output_dir"] = args.run_dir
    if args.workers:
        updates["workers"] = max(1, args.workers)
    if args.device:
        updates["device"] = args.device
    return config.model_copy(update=updates) if updates else config


def _trainable_regimes(ctx: RunContext) -> List[TrainRegime]:
    """Synthetic regimes need accepted images of both labels for every pipeline modality"""
    pools = {(e.modality, e.label) for e in accepted_synthetic(ctx).entries}
    missing = sorted(f"{m.value}/{lb.value}" for m in pipeline_modalities(load_dataset(ctx))
                     for lb in (Label.POS, Label.NEG) if (m, lb) not in pools)
    if not missing:
        return list(TrainRegime)
    logger.warning(f"Gate accepted no images for {missing}; skipping synthetic regimes",
                   extra={"stage": "all", "details": {"missing": missing}})
    return [TrainRegime.REAL_ONLY]


def run_pipeline(ctx: RunContext):
    for name in ("prepare", "train-ddpm", "sample", "train-filter", "gate", "audit"):
        SIMPLE_STAGES[name](ctx)
    for regime in _trainable_regimes(ctx):
        run_train_unimodal(ctx, regime)
        run_train_multimodal(ctx, regime, metadata=False)
        run_train_multimodal(ctx, regime, metadata=True)
    for name in ("evaluate", "explain", "report"):
        SIMPLE_STAGES[name](ctx)


def dispatch(args: argparse.Namespace, ctx: RunContext):
    if args.command == "all":
        run_pipeline(ctx)
    elif args.command == "train-unimodal":
        run_train_unimodal(ctx, TrainRegime(args.regime))
    elif args.command == "train-multimodal":
        run_train_multimodal(ctx, TrainRegime(args.regime), args.metadata)
    else:
        SIMPLE_STAGES[args.command](ctx)


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = resolve_config(args)
        setup_logging(config.output_dir)
        ctx = RunContext(
            config=config,
            run_dir=config.output_dir,
            device=resolve_device(config.device),
            workers=config.workers,
            allow_config_mismatch=args.allow_config_mismatch,
        )
        seed_everything(config.seed)
        logger.info(f"Running '{args.command}' in {ctx.run_dir}",
                    extra={"stage": args.command, "details": {"config_hash": ctx.config_hash, "device": ctx.device}})
        dispatch(args, ctx)
    except BaseCustomException as e:
        log_error(e, stage=args.command)
        return e.exit_code
    except ImportError as e:
        track_error("ImportError", str(e), {"stage": args.command})
        logger.error(f"Missing dependency: {e}", extra={"stage": args.command})
        return EXIT_MISSING_DEPENDENCY
    except Exception as e:
        track_error(type(e).__name__, str(e), {"stage": args.command})
        logger.exception(f"Unexpected failure in '{args.command}'", extra={"stage": args.command})
        return EXIT_UNEXPECTED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
