import json
import os
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from loguru import logger

from .augmentation import all_codes, apply_to_extents
from .encoder import load_graph, save_graph
from .errors import DataError
from .geometry import bake_grid, load_grid, load_part, save_grid, save_part
from .heuristics import SUBTRACTED_GUARD, am_feature_from_properties, subtracted_from_volumes
from .pretrain import CorpusPart
from .synth import (LABEL_COLUMNS, PartMeasures, PartSpec, generate_part_with_graph, labels_from_measures,
                    measure_part, oracle_features_from_measures)
from .utils import atomic_write_text, read_csv, write_csv

MANIFEST_NAME = 'manifest.json'
MANIFEST_VERSION = 1
MEASURE_COLUMNS = tuple(PartMeasures.__dataclass_fields__)


def part_seed(dataset_seed: int, index: int) -> int:
    return dataset_seed * 1_000_000 + index


def part_files(folder: str, part_id: str) -> dict:
    return {
        'part': os.path.join('parts', f'{part_id}.csg'),
        'graph': os.path.join('graphs', f'{part_id}.graph'),
        'grid': os.path.join('grids', f'{part_id}.vsdf'),
    }


def generate_single_part(folder: str, seed: int, grid_n: int = 40, mass_resolution: int = 64) -> dict:
    spec = PartSpec.random(seed)
    files = part_files(folder, spec.part_id)
    paths = {k: os.path.join(folder, v) for k, v in files.items()}
    if all(os.path.exists(p) for p in paths.values()):
        logger.debug(f'{spec.part_id} already exists in {folder}')
        part = load_part(paths['part'])
    else:
        part, graph = generate_part_with_graph(spec)
        save_part(paths['part'], part)
        save_graph(paths['graph'], graph)
        save_grid(paths['grid'], bake_grid(part, grid_n))
    measures = measure_part(part, mass_resolution)
    labels = labels_from_measures(part.id, measures)
    return {'id': part.id, 'seed': seed, 'spec': spec, 'files': files, 'measures': measures, 'labels': labels,
            'extents': part.bbox.extents}


def _write_tables(folder: str, records: list) -> None:
    write_csv(os.path.join(folder, 'labels.csv'), ['part_id', *LABEL_COLUMNS],
              [[r['id'], *(repr(r['labels'].value(t)) for t in LABEL_COLUMNS)] for r in records])
    write_csv(os.path.join(folder, 'measures.csv'), ['part_id', *MEASURE_COLUMNS],
              [[r['id'], *(v if isinstance(v, str) else repr(v) for v in r['measures'].to_dict().values())]
               for r in records])
    codes = all_codes()
    aug_rows = []
    for r in records:
        for code in codes:
            aug_rows.append([r['id'], *code.as_tuple(),
                             *(repr(float(e)) for e in apply_to_extents(code, r['extents']))])
    write_csv(os.path.join(folder, 'augmentations.csv'),
              ['part_id', 'f_x', 'f_y', 'f_z', 'perm_major', 'perm_order', 'ext_x', 'ext_y', 'ext_z'], aug_rows)


def generate_all_parts_under_folder(folder: str, n_parts: int, seed: int = 0, grid_n: int = 40,
                                    mass_resolution: int = 64, threads: int = 1) -> str:
    """Parts, graphs, grids, measures and labels for n_parts procedural parts."""
    manifest_path = os.path.join(folder, MANIFEST_NAME)
    settings = {'n_parts': n_parts, 'seed': seed, 'grid_n': grid_n, 'mass_resolution': mass_resolution}
    if os.path.exists(manifest_path):
        with open(manifest_path, 'r', encoding='utf-8') as f:
            manifest = json.load(f)
        if manifest.get('settings') == settings:
            logger.info(f'Dataset already exists in {folder}')
            return f'Dataset already exists: {len(manifest["parts"])} parts in {folder}'
        logger.warning(f'Dataset in {folder} was built with {manifest.get("settings")}; regenerating')

    for sub in ('parts', 'graphs', 'grids'):
        os.makedirs(os.path.join(folder, sub), exist_ok=True)
    t_start = time.time()
    seeds = [part_seed(seed, i) for i in range(n_parts)]
    with ThreadPoolExecutor(max_workers=max(1, threads)) as executor:
        records = list(executor.map(
            lambda s: generate_single_part(folder, s, grid_n, mass_resolution), seeds))
    _write_tables(folder, records)

    manifest = {
        'version': MANIFEST_VERSION,
        'settings': settings,
        'parts': [{'id': r['id'], 'seed': r['seed'], 'primitive_count': r['spec'].primitive_count,
                   **r['files']} for r in records],
    }
    atomic_write_text(manifest_path, json.dumps(manifest, indent=2) + '\n')
    t_end = time.time()
    logger.info(f'Generated {n_parts} parts in {t_end - t_start:.2f} seconds')
    return f'Generated {n_parts} parts in {folder}'


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------

def load_manifest(folder: str) -> dict:
    path = os.path.join(folder, MANIFEST_NAME)
    if not os.path.exists(path):
        raise DataError(f'No dataset manifest in {folder}; run the gen command first')
    with open(path, 'r', encoding='utf-8') as f:
        return json.load(f)


def load_corpus(folder: str, threads: int = 1) -> list:
    """CorpusPart list in manifest order."""
    manifest = load_manifest(folder)

    def load(entry):
        return CorpusPart(load_part(os.path.join(folder, entry['part'])),
                          load_graph(os.path.join(folder, entry['graph'])),
                          load_grid(os.path.join(folder, entry['grid'])))

    with ThreadPoolExecutor(max_workers=max(1, threads)) as executor:
        return list(executor.map(load, manifest['parts']))


def load_graphs(folder: str) -> tuple:
    manifest = load_manifest(folder)
    ids = [entry['id'] for entry in manifest['parts']]
    graphs = [load_graph(os.path.join(folder, entry['graph'])) for entry in manifest['parts']]
    return ids, graphs


def load_labels(folder: str, part_ids: list) -> dict:
    rows = {row['part_id']: row for row in read_csv(os.path.join(folder, 'labels.csv'))}
    missing = [pid for pid in part_ids if pid not in rows]
    if missing:
        raise DataError(f'labels.csv lacks {len(missing)} parts, e.g. {missing[0]}')
    return {task: np.array([float(rows[pid][task]) for pid in part_ids]) for task in LABEL_COLUMNS}


def load_measures(folder: str, part_ids: list) -> list:
    rows = {row['part_id']: row for row in read_csv(os.path.join(folder, 'measures.csv'))}
    out = []
    for pid in part_ids:
        row = rows[pid]
        values = {}
        for name, f in PartMeasures.__dataclass_fields__.items():
            values[name] = row[name] if f.type is str else (int(row[name]) if f.type is int else float(row[name]))
        out.append(PartMeasures(**values))
    return out


def _subtracted(m: PartMeasures) -> float:
    try:
        return subtracted_from_volumes(m.stock_volume, m.volume)
    except DataError as e:
        logger.warning(f'{e}; using the guard floor')
        return SUBTRACTED_GUARD * m.stock_volume


def tdi_inputs(measures: list) -> tuple:
    """(AM feature, subtracted volume) per part, from stored measures."""
    am = np.array([am_feature_from_properties(m.volume, m.area) for m in measures])
    sub = np.array([_subtracted(m) for m in measures])
    return am, sub


def oracle_matrix(measures: list) -> np.ndarray:
    return np.stack([oracle_features_from_measures(m) for m in measures])
