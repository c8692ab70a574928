"""Main entry point for the forcing lab"""

import argparse
import os
import sys

from dotenv import load_dotenv

sys.path.insert(0, os.path.join(os.path.dirname(os.path.abspath(__file__)), "forcing_lab"))

from src.config import default_config, load_config  # noqa: E402
from src.experiment import GENERATION_MODES, ExperimentRunner  # noqa: E402
from src.exceptions import ForcingLabError  # noqa: E402
from src.regimes import REGIME_TYPES  # noqa: E402
from src.utils import logger  # noqa: E402

# Load environment variables from .env
load_dotenv()

DEFAULT_CONFIG_PATH = "config/config.yaml"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Train and compare sequence-to-sequence training regimes")
    parser.add_argument("--dump-config", action="store_true", help="print the resolved configuration and exit")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help=f"YAML config (default: {DEFAULT_CONFIG_PATH} if present)")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out-dir", default=None)
    common.add_argument("--regime", choices=sorted(REGIME_TYPES), default=None)
    common.add_argument("--gamma", type=float, default=None)
    common.add_argument("--beam-width", type=int, default=None)
    common.add_argument("--teacher-checkpoint", default=None)
    common.add_argument("--max-steps", type=int, default=None)

    commands = parser.add_subparsers(dest="command")

    train = commands.add_parser("train", parents=[common], help="train one regime")
    train.add_argument("--train-teacher", action="store_true",
                       help="train a teacher-forced teacher first (attention forcing)")
    train.add_argument("--resume", action="store_true", help="continue from the checkpoint in --out-dir")

    generate = commands.add_parser("generate", parents=[common], help="decode a dataset with a checkpoint")
    generate.add_argument("--checkpoint", required=True)
    generate.add_argument("--input", required=True)
    generate.add_argument("--output", default=None)
    generate.add_argument("--mode", choices=GENERATION_MODES, default="free")

    evaluate = commands.add_parser("evaluate", parents=[common], help="free-running metrics of a checkpoint")
    evaluate.add_argument("--checkpoint", required=True)
    evaluate.add_argument("--input", default=None, help="dataset file (default: the generated valid split)")

    compare = commands.add_parser("compare-regimes", parents=[common], help="regime x seed comparison table")
    compare.add_argument("--regimes", nargs="+", choices=sorted(REGIME_TYPES), required=True)
    compare.add_argument("--seeds", nargs="+", type=int, default=[0])
    compare.add_argument("--workers", type=int, default=1)

    gradcheck = commands.add_parser("gradcheck", parents=[common], help="finite-difference check of every rule")
    gradcheck.add_argument("--seeds", type=int, default=3)

    commands.add_parser("make-data", parents=[common], help="write generated train/valid splits")

    cascade = commands.add_parser("cascade", parents=[common], help="train the upsampler on guided features")
    cascade.add_argument("--checkpoint", required=True, help="upstream frame model")
    cascade.add_argument("--mode", choices=("teacher_forced", "attention_forced"), default=None)
    return parser


def resolve_config(args):
    config_path = args.config
    if config_path is None and os.path.exists(DEFAULT_CONFIG_PATH):
        config_path = DEFAULT_CONFIG_PATH
    overrides = {
        "training.seed": args.seed,
        "output.dir": args.out_dir,
        "regime.name": args.regime,
        "regime.gamma": args.gamma,
        "evaluation.beam_width": args.beam_width,
        "training.max_steps": args.max_steps,
    }
    return load_config(config_path, overrides)


def run(args) -> int:
    config = resolve_config(args)
    runner = ExperimentRunner(config)

    if args.command == "train":
        summary = runner.cmd_train(args.train_teacher, args.teacher_checkpoint, args.resume)
        print(f"Trained {config.regime_name} for {summary.step} steps")
        print(f"Checkpoint: {summary.checkpoint_path}")
        print(f"Metrics: {summary.metrics_path}")
        if summary.final_loss is not None:
            print(f"Final loss: {summary.final_loss:.4f}")
    elif args.command == "generate":
        path = runner.cmd_generate(args.checkpoint, args.input, args.mode, args.output, args.beam_width,
                                   args.teacher_checkpoint)
        print(f"Outputs saved to {path}")
    elif args.command == "evaluate":
        metrics = runner.cmd_evaluate(args.checkpoint, args.input)
        for name, value in metrics.items():
            print(f"{name:>20}: {value:.4f}")
    elif args.command == "compare-regimes":
        path = runner.cmd_compare_regimes(args.regimes, args.seeds, args.workers)
        print(f"Comparison saved to {path}")
    elif args.command == "gradcheck":
        report = runner.cmd_gradcheck(args.seeds)
        for line in report.lines():
            print(line)
        if not report.passed:
            print(f"ERROR: gradient check failed for {', '.join(report.failures)}")
            return 1
        print("All gradient checks passed.")
    elif args.command == "make-data":
        for split, path in runner.cmd_make_data().items():
            print(f"{split}: {path}")
    elif args.command == "cascade":
        metrics = runner.cmd_cascade(args.checkpoint, args.teacher_checkpoint, args.mode)
        for name, value in metrics.items():
            print(f"{name:>20}: {value:.4f}")
    return 0


def main():
    """
    Program entry point.
    Parses the command line, resolves the configuration and runs one subcommand.
    """
    parser = build_parser()
    args = parser.parse_args()

    if args.dump_config:
        print(default_config().dump())
        return
    if args.command is None:
        parser.print_help()
        sys.exit(1)

    try:
        status = run(args)
    except ForcingLabError as e:
        logger.error(f"{args.command} failed: {e}", exc_info=True)
        print(f"ERROR: {e}")
        sys.exit(1)
    except Exception as e:
        logger.error(f"Error in main: {e}", exc_info=True)
        print(f"ERROR: {e}")
        sys.exit(1)
    sys.exit(status)


if __name__ == "__main__":
    main()
