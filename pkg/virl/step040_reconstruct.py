import os

from loguru import logger

from .geometry import bake_grid, save_grid
from .pretrain import VirlModel, reconstruct_grid, voxel_iou
from .step000_generate_dataset import load_corpus
from .utils import format_float, write_csv


def reconstruct_under_folder(folder: str, dataset_folder: str, model: VirlModel, n: int = 40,
                             part_ids=None, threads: int = 1) -> str:
    """Decoded grids for the requested parts (all when part_ids is empty) with their voxel IoU."""
    corpus = load_corpus(dataset_folder, threads)
    wanted = set(part_ids or [])
    items = [c for c in corpus if not wanted or c.id in wanted]
    missing = wanted - {c.id for c in items}
    if missing:
        logger.warning(f'Unknown part ids skipped: {", ".join(sorted(missing))}')
    os.makedirs(folder, exist_ok=True)
    rows = []
    for item in items:
        path = os.path.join(folder, f'{item.id}.pred.vsdf')
        predicted = reconstruct_grid(model, item.graph, n)
        save_grid(path, predicted)
        iou = voxel_iou(predicted, bake_grid(item.part, n))
        rows.append([item.id, format_float(iou)])
        logger.debug(f'{item.id}: IoU {iou:.4f}')
    write_csv(os.path.join(folder, 'iou.csv'), ['part_id', 'iou'], rows)
    mean = sum(float(r[1]) for r in rows) / len(rows) if rows else float('nan')
    logger.info(f'Reconstructed {len(rows)} parts, mean IoU {mean:.4f}')
    return f'Reconstructed {len(rows)} parts, mean IoU {mean:.4f}'
