import os

import numpy as np
from loguru import logger

from .downstream import DownstreamSettings, run_protocol
from .step010_pretrain import list_checkpoints, load_encoder
from .step020_adapt import build_labeled_corpus
from .utils import format_float, write_csv

SWEEP_COLUMNS = ('step', 'task', 'shots', 'r2_mean', 'r2_std')


def sweep_under_folder(folder: str, pretrain_folder: str, dataset_folder: str, tasks, shots=(100, 200),
                       settings: DownstreamSettings = None, threads: int = 1) -> str:
    """SVR probe quality of every saved checkpoint, to follow downstream quality through pretraining."""
    settings = settings or DownstreamSettings()
    checkpoints = list_checkpoints(pretrain_folder)
    if not checkpoints:
        logger.warning(f'No checkpoints in {pretrain_folder}')
        return 'No checkpoints to sweep'
    rows = []
    for step, path in checkpoints:
        encoder = load_encoder(path)
        corpus = build_labeled_corpus(dataset_folder, encoder)
        report = run_protocol(corpus, encoder, tasks, ['probe-svr'], shots, ('static',), settings, threads)
        cells = report.aggregates()
        for cell in cells:
            rows.append([step, cell['task'], cell['shots'], format_float(cell['r2_mean']),
                         format_float(cell['r2_std'])])
        if cells:
            logger.info(f'Checkpoint {step}: best SVR probe R2 {max(c["r2_mean"] for c in cells):.4f}')
    os.makedirs(folder, exist_ok=True)
    write_csv(os.path.join(folder, 'sweep.csv'), list(SWEEP_COLUMNS), rows)
    if not rows:
        return f'Swept {len(checkpoints)} checkpoints; no scorable task'
    r2 = np.array([float(r[3]) for r in rows])
    return f'Swept {len(checkpoints)} checkpoints; R2 range {r2.min():.4f} to {r2.max():.4f}'
