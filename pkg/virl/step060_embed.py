import os

from loguru import logger

from .downstream import LabeledCorpus, pca_embed
from .synth import LABEL_COLUMNS
from .utils import format_float, write_csv


def embed_under_folder(folder: str, corpus: LabeledCorpus) -> str:
    """2-D principal projection of the frozen latents, one row per part with its labels."""
    coords = pca_embed(corpus.latents, 2)
    os.makedirs(folder, exist_ok=True)
    path = os.path.join(folder, 'embedding.csv')
    rows = [[pid, format_float(x), format_float(y), *(format_float(corpus.labels[t][i]) for t in LABEL_COLUMNS)]
            for i, (pid, (x, y)) in enumerate(zip(corpus.part_ids, coords))]
    write_csv(path, ['part_id', 'pc1', 'pc2', *LABEL_COLUMNS], rows)
    logger.info(f'Embedded {len(rows)} parts to {path}')
    return path
