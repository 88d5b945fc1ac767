"""fifo-desk - Fog-invariant segmentation with fog-pass filters, at desk scale.

This package provides:
- A procedural three-domain dataset: clear weather, synthetic fog, real-fog proxy
- A small segmentation network on a reverse-mode autodiff core
- Fog-pass filters and alternating training with fog style matching
- Evaluation (mIoU) and fog-style analysis of trained checkpoints
- A gradient-check battery for every primitive and loss

Commands: init, gen-data, train, eval, analyze, grad-check.
"""

import argparse
import logging
import sys
from importlib.metadata import version as get_package_version
from pathlib import Path
from typing import Any

from fifo_desk.config import (
    RunConfig,
    get_config,
    get_config_path,
    init_config,
    load_config,
    set_config,
    set_config_path,
)
from fifo_desk.errors import (
    ConfigError,
    DatasetIOError,
    FifoError,
    TrainingAborted,
    VerificationFailed,
)

try:
    __version__ = get_package_version("fifo-desk")
except Exception:
    __version__ = "0.0.0"

__all__ = ["main"]

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_ABORTED = 4
EXIT_VERIFICATION = 5


def _configure_logging() -> None:
    """Configure logging based on configuration."""
    config = get_config()

    handlers: list[logging.Handler] = []
    if config.log_file:
        handlers.append(logging.FileHandler(config.log_file))

    logging.basicConfig(
        level=getattr(logging, config.log_level.upper(), logging.WARNING),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        handlers=handlers if handlers else None,
    )


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fifo-desk",
        description="Fog-invariant segmentation with fog-pass filters, at desk scale.",
        epilog=(
            "Config file: ~/.config/fifo-desk/config.yaml. Environment variables override "
            "config file settings (prefix: FIFO_DESK_); flags override both."
        ),
    )
    parser.add_argument("--version", action="version", version=f"fifo-desk {__version__}")
    parser.add_argument("--config", type=Path, help="use this config file")
    commands = parser.add_subparsers(dest="command", required=True)

    init = commands.add_parser("init", help="create the default config file")
    init.add_argument("--force", "-f", action="store_true", help="overwrite an existing file")

    gen = commands.add_parser("gen-data", help="generate the three-domain dataset")
    gen.add_argument("--out", type=Path, help="dataset root (default: dataset_root)")
    gen.add_argument("--seed", type=int, dest="master_seed", help="master seed")
    gen.add_argument("--workers", type=int, dest="gen_workers", help="generator threads")

    train = commands.add_parser("train", help="pretrain, warm up filters, train with FIFO")
    train.add_argument("--data", type=Path, help="dataset root (default: dataset_root)")
    train.add_argument("--out", type=Path, required=True, help="run directory")
    train.add_argument("--seed", type=int, dest="master_seed")
    train.add_argument("--fsm-direction", dest="fsm_direction")
    train.add_argument("--fsm-representation", dest="fsm_representation")
    train.add_argument("--lambda-fsm", type=float, dest="lambda_fsm")
    train.add_argument("--lambda-con", type=float, dest="lambda_con")
    train.add_argument("--beta", type=float, help="synthetic fog attenuation (1/m)")
    train.add_argument("--taps", dest="tap_layers", help="comma-separated taps, e.g. C1,R1")
    train.add_argument("--domain-pairs", dest="domain_pairs", help="e.g. CW-SF,CW-RF")
    train.add_argument("--pretrain-iters", type=int, dest="pretrain_iters")
    train.add_argument("--warmup-iters", type=int, dest="warmup_iters")
    train.add_argument("--total-iters", type=int, dest="total_iters")
    train.add_argument("--init-checkpoint", dest="init_checkpoint")

    ev = commands.add_parser("eval", help="per-class IoU and mIoU of a checkpoint")
    ev.add_argument("--checkpoint", type=Path, required=True)
    ev.add_argument("--data", type=Path, help="dataset root (default: dataset_root)")
    ev.add_argument("--split", choices=["train", "eval"], default="eval")
    ev.add_argument("--out", type=Path, help="CSV path (default: <checkpoint>/eval_<split>.csv)")

    analyze = commands.add_parser("analyze", help="fog-style analysis against a baseline")
    analyze.add_argument("--checkpoint", type=Path, required=True)
    analyze.add_argument("--baseline", type=Path, required=True)
    analyze.add_argument("--data", type=Path, help="dataset root (default: dataset_root)")
    analyze.add_argument("--filters", type=Path, help="fog-pass filters to measure with")
    analyze.add_argument("--out", type=Path, help="report directory (default: <checkpoint>)")

    check = commands.add_parser("grad-check", help="run the gradient-check battery")
    check.add_argument("--scale", choices=["micro", "small"], default="micro")
    check.add_argument("--seed", type=int, default=0)
    return parser


OVERRIDE_KEYS: dict[str, tuple[str, ...]] = {
    "gen-data": ("master_seed", "gen_workers"),
    "train": (
        "master_seed",
        "fsm_direction",
        "fsm_representation",
        "lambda_fsm",
        "lambda_con",
        "beta",
        "tap_layers",
        "domain_pairs",
        "pretrain_iters",
        "warmup_iters",
        "total_iters",
        "init_checkpoint",
    ),
}


def _overrides(args: argparse.Namespace) -> dict[str, Any]:
    return {key: getattr(args, key) for key in OVERRIDE_KEYS.get(args.command, ())}


def _data_root(args: argparse.Namespace, config: RunConfig) -> Path:
    return Path(args.data or config.dataset_root)


def _handle_init(args: argparse.Namespace) -> int:
    try:
        config_path = init_config(force=args.force, path=args.config)
    except FileExistsError:
        print(f"Config file already exists: {args.config or get_config_path()}")
        print("Use --force to overwrite.")
        return 1
    print(f"Created config file: {config_path}")
    print(f"Edit {config_path} to customize.")
    return EXIT_OK


def _handle_gen_data(args: argparse.Namespace, config: RunConfig) -> int:
    from fifo_desk.scenegen import FogDataset, build_dataset

    root = build_dataset(config, args.out or Path(config.dataset_root))
    dataset = FogDataset(root)
    census: dict[str, int] = {}
    for row in dataset:
        key = f"{row.split.value}/{row.domain.value}"
        census[key] = census.get(key, 0) + 1
    summary = " ".join(f"{k}={v}" for k, v in sorted(census.items()))
    print(f"Wrote {len(dataset)} samples to {root}: {summary}")
    return EXIT_OK


def _handle_train(args: argparse.Namespace, config: RunConfig) -> int:
    from fifo_desk.trainer import train

    result = train(config, _data_root(args, config), args.out)
    print(f"Training finished: final checkpoint {result.final}, log {result.log_path}")
    return EXIT_OK


def _handle_eval(args: argparse.Namespace, config: RunConfig) -> int:
    from fifo_desk.analysis import evaluate, format_eval_table, write_eval_csv
    from fifo_desk.fifo_types import Split
    from fifo_desk.scenegen import FogDataset
    from fifo_desk.segnet import SegNetwork

    split = Split(args.split)
    net = SegNetwork.load(args.checkpoint, config.leaky_slope)
    results = evaluate(net, FogDataset(_data_root(args, config)), split, config)
    out = args.out or args.checkpoint / f"eval_{split.value}.csv"
    write_eval_csv(out, results)
    print(format_eval_table(results))
    print(f"Wrote {out}")
    return EXIT_OK


def _handle_analyze(args: argparse.Namespace, config: RunConfig) -> int:
    from fifo_desk.analysis import analyze_pair
    from fifo_desk.scenegen import FogDataset

    path = analyze_pair(
        args.checkpoint,
        args.baseline,
        FogDataset(_data_root(args, config)),
        config,
        args.out or args.checkpoint,
        args.filters,
    )
    print(f"Wrote {path}")
    return EXIT_OK


def _handle_grad_check(args: argparse.Namespace) -> int:
    from fifo_desk.verification import format_report, verify

    verify(args.scale, args.seed, report=lambda results: print(format_report(results)))
    return EXIT_OK


def _run(args: argparse.Namespace) -> int:
    if args.command == "init":
        return _handle_init(args)

    set_config_path(args.config)
    config = load_config(overrides=_overrides(args))
    set_config(config)
    _configure_logging()
    logger.debug("Running %s with config %s", args.command, get_config_path())

    if args.command == "gen-data":
        return _handle_gen_data(args, config)
    if args.command == "train":
        return _handle_train(args, config)
    if args.command == "eval":
        return _handle_eval(args, config)
    if args.command == "analyze":
        return _handle_analyze(args, config)
    return _handle_grad_check(args)


def main(argv: list[str] | None = None) -> None:
    """Command-line entry point; exits with the command's status code."""
    args = _build_parser().parse_args(argv)
    try:
        code = _run(args)
    except ConfigError as e:
        print(f"Configuration error: {e}", file=sys.stderr)
        code = EXIT_CONFIG
    except TrainingAborted as e:
        last = f" (last checkpoint: {e.last_checkpoint})" if e.last_checkpoint else ""
        print(f"Training aborted: {e}{last}", file=sys.stderr)
        code = EXIT_ABORTED
    except VerificationFailed as e:
        print(f"Verification failed: {e}", file=sys.stderr)
        code = EXIT_VERIFICATION
    except (DatasetIOError, OSError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        code = EXIT_IO
    except FifoError as e:
        print(f"Error: {e}", file=sys.stderr)
        code = 1
    if code:
        sys.exit(code)
