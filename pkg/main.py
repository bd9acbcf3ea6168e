import argparse
import sys
from typing import List, Optional

from config import DATA_DIR, OUTPUT_DIR, TrainConfig
from exceptions import JaketError
from logger import setup_logger
from orchestrator import (
    run_bench_memory,
    run_eval,
    run_finetune,
    run_gen_data,
    run_grad_check,
    run_pretrain,
)

logger = setup_logger(__name__)

COMMANDS = ('gen-data', 'pretrain', 'finetune', 'eval', 'grad-check', 'bench-memory')


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Joint knowledge/text pre-training on a synthetic world.")
    parser.add_argument("command", choices=COMMANDS, help="What to run")
    parser.add_argument("--config", default=None, help="key=value config file applied on top of the preset")
    parser.add_argument("--preset", choices=['desk', 'paper', 'full-scale', 'tiny'], default=None,
                        help="Base configuration (default: desk; tiny for grad-check)")
    parser.add_argument("--data", default=DATA_DIR, help=f"Generated data directory (default: {DATA_DIR})")
    parser.add_argument("--out", default=OUTPUT_DIR, help=f"Output directory (default: {OUTPUT_DIR})")
    parser.add_argument("--seed", type=int, default=None, help="Overrides seed and train_seed")
    parser.add_argument("--steps", type=int, default=None, help="Stop pre-training (or benchmarking) after this step")
    parser.add_argument("--task", default=None,
                        help="finetune: entity|kgqa|fewshot|ablation; eval: masked-entity|kgqa|fewshot")
    parser.add_argument("--checkpoint", default=None,
                        help="Checkpoint to start from ('latest' resumes pretrain from --out)")
    parser.add_argument("--corrupt", default=None, help=argparse.SUPPRESS)
    return parser


def resolve_config(args: argparse.Namespace) -> TrainConfig:
    """Preset, then the config file, then flags."""
    preset = args.preset or ('tiny' if args.command == 'grad-check' else 'desk')
    config = TrainConfig.preset(preset)
    if args.config:
        config = TrainConfig.from_file(args.config, base=config)
    if args.seed is not None:
        config = config.with_overrides(seed=args.seed, train_seed=args.seed)
    return config


def run(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    if args.command == 'gen-data':
        result = run_gen_data(config, args.data, status_callback=logger.info)
    elif args.command == 'pretrain':
        result = run_pretrain(config, args.data, args.out, steps=args.steps, resume=args.checkpoint,
                              status_callback=logger.info)
    elif args.command == 'finetune':
        result = run_finetune(config, args.data, args.out, args.task or 'entity', args.checkpoint,
                              status_callback=logger.info)
    elif args.command == 'eval':
        result = run_eval(config, args.data, args.out, args.task or 'masked-entity', args.checkpoint,
                          status_callback=logger.info)
    elif args.command == 'grad-check':
        result = run_grad_check(config, args.out, corrupt=args.corrupt, status_callback=logger.info)
    else:
        result = run_bench_memory(config, args.data, args.out, steps=args.steps, status_callback=logger.info)

    if not result.ok:
        logger.error("%s", result.message)
        return 1
    logger.info("Done! %s%s", result.message, f" ({result.output_path})" if result.output_path else "")
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return run(args)
    except JaketError as exc:
        logger.error("%s failed: %s", args.command, exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
