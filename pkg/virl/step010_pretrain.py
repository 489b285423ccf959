import json
import os
import time
from dataclasses import asdict

from loguru import logger

from .encoder import EncoderConfig, HierarchicalEncoder, describe
from .errors import ConfigError, DataError
from .pretrain import (LOSS_COLUMNS, PretrainConfig, Trainer, load_checkpoint, model_from_checkpoint,
                       save_checkpoint, split_corpus)
from .step000_generate_dataset import load_corpus
from .utils import atomic_write_text, format_float, write_csv

CHECKPOINT_DIR = 'checkpoints'
BEST_NAME = 'best.virl'
LAST_NAME = 'last.virl'
BEST_INFO = 'best.json'


def checkpoint_path(folder: str, step: int) -> str:
    return os.path.join(folder, CHECKPOINT_DIR, f'ckpt_{step:07d}.virl')


def _cell(value):
    if value == '' or isinstance(value, int):
        return value
    return format_float(value)


def write_loss_csv(folder: str, history: list) -> None:
    write_csv(os.path.join(folder, 'loss.csv'), list(LOSS_COLUMNS),
              [[_cell(row[c]) for c in LOSS_COLUMNS] for row in history])


def _read_best(folder: str) -> dict:
    path = os.path.join(folder, BEST_INFO)
    if not os.path.exists(path):
        return {}
    with open(path, 'r', encoding='utf-8') as f:
        return json.load(f)


def pretrain_under_folder(folder: str, dataset_folder: str, config: PretrainConfig,
                          encoder_config: EncoderConfig, threads: int = 1, until: int = None) -> str:
    """Pretrain on the dataset, resuming from last.virl when it matches the configuration."""
    os.makedirs(os.path.join(folder, CHECKPOINT_DIR), exist_ok=True)
    echo = {'encoder': asdict(encoder_config), 'pretrain': asdict(config)}
    last_path = os.path.join(folder, LAST_NAME)
    resume = None
    if os.path.exists(last_path):
        resume = load_checkpoint(last_path)
        if resume.config != json.loads(json.dumps(echo)):
            raise ConfigError(f'{last_path} was trained with a different configuration; '
                              f'choose another output directory')

    corpus = load_corpus(dataset_folder, threads)
    train_parts, _ = split_corpus(corpus, config.test_fraction)
    total = config.total_steps(len(train_parts))
    target = total if until is None else min(until, total)
    if resume is not None and resume.step >= target:
        logger.info(f'Pretraining already reached step {resume.step} in {folder}')
        return f'Pretraining already complete at step {resume.step}'
    if resume is not None:
        logger.info(f'Resuming pretraining from step {resume.step}')

    logger.info(f'Encoder: {describe(encoder_config)}')
    best = _read_best(folder)
    t_start = time.time()
    trainer = Trainer(corpus, config, encoder_config, resume, threads)
    for ckpt in trainer.run(until):
        save_checkpoint(checkpoint_path(folder, ckpt.step), ckpt, config.checkpoint_dtype)
        save_checkpoint(last_path, ckpt, config.checkpoint_dtype)
        if not best or ckpt.test_loss < best['test_loss']:
            save_checkpoint(os.path.join(folder, BEST_NAME), ckpt, config.checkpoint_dtype)
            best = {'step': ckpt.step, 'test_loss': ckpt.test_loss}
            atomic_write_text(os.path.join(folder, BEST_INFO), json.dumps(best, indent=2) + '\n')
        write_loss_csv(folder, ckpt.history)
    t_end = time.time()
    logger.info(f'Pretraining finished in {t_end - t_start:.2f} seconds, best test loss '
                f'{best["test_loss"]:.4g} at step {best["step"]}')
    return f'Pretrained to step {trainer.step}; best test loss {best["test_loss"]:.4g} at step {best["step"]}'


def list_checkpoints(folder: str) -> list:
    """(step, path) for every periodic checkpoint, in step order."""
    ckpt_dir = os.path.join(folder, CHECKPOINT_DIR)
    if not os.path.isdir(ckpt_dir):
        return []
    out = []
    for name in os.listdir(ckpt_dir):
        if name.startswith('ckpt_') and name.endswith('.virl'):
            out.append((int(name[5:-5]), os.path.join(ckpt_dir, name)))
    return sorted(out)


def resolve_checkpoint(folder: str, which='best') -> str:
    """'best', 'last', a step number or a file path."""
    which = str(which)
    if which in ('best', 'last'):
        path = os.path.join(folder, BEST_NAME if which == 'best' else LAST_NAME)
    elif which.isdigit():
        path = checkpoint_path(folder, int(which))
    else:
        path = which
    if not os.path.exists(path):
        raise DataError(f'Checkpoint {path} does not exist; run the pretrain command first')
    return path


def load_encoder(path: str) -> HierarchicalEncoder:
    model = model_from_checkpoint(load_checkpoint(path))
    model.encoder.eval()
    return model.encoder
