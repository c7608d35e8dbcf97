import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from .commands import cmd_ablate, cmd_eval, cmd_generate, cmd_train, cmd_visualize
from .config import build_run_config, configure_logging, parse_overrides
from .errors import CheckpointMismatchError, ConfigError, DatasetError, MsvitError
from .schemas import AblationAxis

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 3
EXIT_MISSING_FILE = 4
EXIT_CHECKPOINT_MISMATCH = 5
EXIT_DATASET = 6
EXIT_IO = 7

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="msvit",
        description="Multi-modal selective ViT for AMD gene prediction on fundus, OCT and record data",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="flat key = value config file")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", help="output directory (dataset directory for generate)")
    common.add_argument("--data", help="dataset directory")
    common.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="override one config key"
    )

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="write a synthetic dataset")
    sub.add_parser("train", parents=[common], help="5-fold cross-validated training")

    eval_parser = sub.add_parser("eval", parents=[common], help="evaluate a fold checkpoint on its test split")
    eval_parser.add_argument("--checkpoint", type=Path, required=True)
    eval_parser.add_argument("--fold", type=int, required=True)

    ablate = sub.add_parser("ablate", parents=[common], help="cross-validate along one ablation axis")
    ablate.add_argument("--axis", required=True, choices=[a.value for a in AblationAxis])

    visualize = sub.add_parser("visualize", parents=[common], help="write selection-frequency maps")
    visualize.add_argument("--checkpoint", type=Path, required=True)
    visualize.add_argument("--ids", help="comma-separated patient ids")
    return parser


def resolve_config(args: argparse.Namespace):
    """defaults < config file < --set overrides < dedicated flags"""
    overrides = parse_overrides(args.overrides)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.data is not None:
        overrides["data_dir"] = args.data
    if args.out is not None:
        overrides["data_dir" if args.command == "generate" else "out_dir"] = args.out
    return build_run_config(args.config, overrides)


def run(args: argparse.Namespace) -> None:
    cfg = resolve_config(args)
    if args.command == "generate":
        cmd_generate(cfg)
    elif args.command == "train":
        cmd_train(cfg)
    elif args.command == "eval":
        cmd_eval(cfg, args.checkpoint, args.fold)
    elif args.command == "ablate":
        cmd_ablate(cfg, AblationAxis(args.axis))
    elif args.command == "visualize":
        ids = [i.strip() for i in args.ids.split(",") if i.strip()] if args.ids else None
        cmd_visualize(cfg, args.checkpoint, ids)


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging()
    try:
        run(args)
    except (MsvitError, OSError) as e:
        logger.error(f"{args.command} failed: {str(e)}")
        print(f"msvit {args.command}: {str(e)}".replace("\n", " "), file=sys.stderr)
        return exit_code(e)
    return EXIT_OK


def exit_code(error: Exception) -> int:
    if isinstance(error, ConfigError):
        return EXIT_CONFIG
    if isinstance(error, FileNotFoundError):
        return EXIT_MISSING_FILE
    if isinstance(error, CheckpointMismatchError):
        return EXIT_CHECKPOINT_MISMATCH
    if isinstance(error, DatasetError):
        return EXIT_DATASET
    if isinstance(error, OSError):
        return EXIT_IO
    return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
