"""
Command-line entry point.

    python -m virl <command> [--config PATH] [--seed N] [--out DIR] [--threads N]

Exit status: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""
import argparse
import os
import sys
from dataclasses import replace
from enum import IntEnum

import torch
from loguru import logger

from .config import RunConfig, default_log_level, echo_config, load_config, with_overrides
from .do_everything import (do_everything, run_adapt, run_embed, run_gen, run_pretrain, run_reconstruct,
                            run_report, run_sweep)
from .errors import UsageError, VirlError
from .utils import OutputLock


class ExitStatus(IntEnum):
    OK = 0
    USAGE = 1
    DATA = 2
    NUMERICAL = 3


COMMANDS = {
    'gen': 'generate the synthetic part corpus with labels',
    'pretrain': 'volume-informed pretraining of the encoder',
    'adapt': 'fit one downstream strategy and report its R2',
    'report': 'few-shot evaluation table over tasks, strategies and shots',
    'reconstruct': 'decode SDF grids from a checkpoint',
    'sweep': 'SVR probe quality of every pretraining checkpoint',
    'embed': '2-D PCA of the frozen latents',
    'all': 'gen, pretrain and report in one go',
}


def _split(value: str) -> tuple:
    return tuple(v.strip() for v in value.split(',') if v.strip())


class ArgumentParser(argparse.ArgumentParser):
    """Reports bad command lines as UsageError instead of exiting with status 2."""

    def error(self, message):
        raise UsageError(f'{self.prog}: {message}')


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog='virl', description='Volume-informed representation learning for CAD parts')
    sub = parser.add_subparsers(dest='command', required=True)
    for name, help_text in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument('--config', help='RunConfig JSON file')
        p.add_argument('--seed', type=int, help='override every seed in the config')
        p.add_argument('--out', help='output directory')
        p.add_argument('--threads', type=int, help='worker threads')
        p.add_argument('--checkpoint', help="'best', 'last', a step number or a checkpoint path")
        if name == 'pretrain':
            p.add_argument('--until', type=int, help='stop at this step (resumable)')
        if name == 'adapt':
            p.add_argument('--task')
            p.add_argument('--strategy')
            p.add_argument('--normalization')
            p.add_argument('--shots', type=int)
        if name == 'report':
            p.add_argument('--strategies', type=_split, help='comma-separated strategy list')
        if name == 'reconstruct':
            p.add_argument('--part', action='append', default=[], help='part id (repeatable; default all)')
            p.add_argument('--n', type=int, help='grid size per axis')
    return parser


def resolve_config(args) -> RunConfig:
    config = load_config(args.config) if args.config else RunConfig()
    config = with_overrides(config, args.seed, args.out, args.threads)
    if args.checkpoint:
        config = replace(config, adapt=replace(config.adapt, checkpoint=args.checkpoint),
                         report=replace(config.report, checkpoint=args.checkpoint))
    if args.command == 'adapt':
        changes = {k: getattr(args, k) for k in ('task', 'strategy', 'normalization', 'shots')
                   if getattr(args, k) is not None}
        config = replace(config, adapt=replace(config.adapt, **changes))
    if args.command == 'report' and args.strategies is not None:
        config = replace(config, report=replace(config.report, strategies=args.strategies))
    if args.command == 'reconstruct' and args.n is not None:
        config = replace(config, report=replace(config.report, reconstruct_n=args.n))
    return config


def run_command(args, config: RunConfig) -> str:
    if args.command == 'gen':
        return run_gen(config)
    if args.command == 'pretrain':
        return run_pretrain(config, args.until)
    if args.command == 'adapt':
        return run_adapt(config)
    if args.command == 'report':
        return run_report(config)
    if args.command == 'reconstruct':
        return run_reconstruct(config, args.part)
    if args.command == 'sweep':
        return run_sweep(config)
    if args.command == 'embed':
        return run_embed(config)
    return do_everything(config)


def main(argv=None) -> int:
    logger.remove()
    logger.add(sys.stderr, level=default_log_level())
    try:
        args = build_parser().parse_args(argv)
        config = resolve_config(args)
    except VirlError as e:
        logger.error(str(e))
        return int(e.exit_status)

    os.makedirs(config.out, exist_ok=True)
    sink = logger.add(os.path.join(config.out, 'virl.log'), level='DEBUG', encoding='utf-8')
    torch.set_num_threads(config.threads)
    try:
        with OutputLock(config.out):
            echo_config(config, config.out)
            summary = run_command(args, config)
        logger.info(summary)
        status = ExitStatus.OK
    except UsageError as e:
        logger.error(f'Usage error: {e}')
        status = ExitStatus.USAGE
    except VirlError as e:
        logger.error(f'{type(e).__name__}: {e}')
        status = ExitStatus(e.exit_status)
    finally:
        logger.remove(sink)
    return int(status)


if __name__ == '__main__':
    sys.exit(main())
