import hashlib
import json
import os
import time
from dataclasses import asdict

import numpy as np
from loguru import logger

from .downstream import (AdaptedModel, DownstreamSettings, LabeledCorpus, OracleRegressor, SvrRegressor,
                         encode_corpus, fit_strategy, r2_score, shot_subset, split_indices)
from .encoder import HierarchicalEncoder
from .errors import DataError
from .pretrain import Checkpoint, save_checkpoint
from .step000_generate_dataset import load_graphs, load_labels, load_measures, oracle_matrix, tdi_inputs
from .utils import atomic_write_text, derive_seed, format_float, settings_match, write_csv, write_settings


def build_labeled_corpus(dataset_folder: str, encoder: HierarchicalEncoder) -> LabeledCorpus:
    """Graphs, frozen latents, labels and heuristic inputs for every dataset part."""
    t_start = time.time()
    part_ids, graphs = load_graphs(dataset_folder)
    measures = load_measures(dataset_folder, part_ids)
    am, sub = tdi_inputs(measures)
    latents = encode_corpus(encoder, graphs)
    t_end = time.time()
    logger.info(f'Encoded {len(part_ids)} parts in {t_end - t_start:.2f} seconds')
    return LabeledCorpus(part_ids, graphs, latents, load_labels(dataset_folder, part_ids), am, sub,
                         oracle_matrix(measures))


def corpus_fingerprint(corpus: LabeledCorpus, encoder: HierarchicalEncoder) -> str:
    """Digest of the encoder weights, part ids and labels."""
    digest = hashlib.sha256()
    for name, tensor in sorted(encoder.state_dict().items()):
        digest.update(name.encode('utf-8'))
        digest.update(tensor.detach().cpu().numpy().tobytes())
    digest.update('\n'.join(corpus.part_ids).encode('utf-8'))
    for task in sorted(corpus.labels):
        digest.update(task.encode('utf-8'))
        digest.update(np.ascontiguousarray(corpus.labels[task], dtype=np.float64).tobytes())
    return digest.hexdigest()


def adapt_folder_name(task: str, strategy: str, normalization: str, shots: int) -> str:
    return f'{task}_{strategy}_{normalization.replace("+", "-")}_{shots}'


def _save_model(folder: str, fitted, meta: dict) -> str:
    model = fitted.model
    if isinstance(model, AdaptedModel):
        path = os.path.join(folder, 'model.virl')
        tensors = {name: t.detach().numpy().copy() for name, t in model.state_dict().items()}
        config = {**meta, 'normalizer': asdict(model.normalizer), 'tdi_input': model.tdi_input}
        if model.encoder is not None:
            config['encoder'] = asdict(model.encoder.config)
        save_checkpoint(path, Checkpoint(0, config, tensors))
        return path
    path = os.path.join(folder, 'model.json')
    if isinstance(model, SvrRegressor):
        payload = {**meta, 'kind': 'svr', 'normalizer': asdict(model.normalizer), 'tdi_input': model.tdi_input,
                   'gamma': model.svr.gamma, 'sweeps': model.svr.sweeps,
                   'support': model.svr.support.tolist(), 'coef': model.svr.coef.tolist()}
    elif isinstance(model, OracleRegressor):
        payload = {**meta, 'kind': 'oracle', 'weights': model.weights.tolist()}
    else:
        raise TypeError(f'Cannot persist {type(model).__name__}')
    atomic_write_text(path, json.dumps(payload, indent=2) + '\n')
    return path


def adapt_under_folder(folder: str, corpus: LabeledCorpus, encoder: HierarchicalEncoder, task: str,
                       strategy: str, normalization: str, shots: int,
                       settings: DownstreamSettings = None) -> str:
    """Fit one strategy on a shot subset of the pool and score it on the held-out parts."""
    settings = settings or DownstreamSettings()
    metrics_path = os.path.join(folder, 'metrics.json')
    run_settings = {'task': task, 'strategy': strategy, 'normalization': normalization, 'shots': shots,
                    'downstream': asdict(settings), 'corpus': corpus_fingerprint(corpus, encoder)}
    if os.path.exists(metrics_path):
        if settings_match(folder, run_settings):
            with open(metrics_path, 'r', encoding='utf-8') as f:
                metrics = json.load(f)
            logger.info(f'Adaptation already exists in {folder}')
            return f'R2 {metrics["r2"]:.4f} (cached)'
        logger.warning(f'Adaptation in {folder} was fitted with other settings; refitting')
        os.remove(metrics_path)

    os.makedirs(folder, exist_ok=True)
    pool, test_idx = split_indices(len(corpus), settings.n_test, shots)
    run_seed = derive_seed(settings.seed, 'run', 0)
    train_idx = shot_subset(pool, shots, run_seed)
    fitted = fit_strategy(corpus, encoder, task, strategy, normalization, train_idx, run_seed, settings)
    pred = fitted.predict(corpus, test_idx)
    truth = corpus.labels[task][test_idx]
    if not np.all(np.isfinite(pred)):
        raise DataError(f'{strategy} produced non-finite predictions on {task}')
    r2 = r2_score(pred, truth)

    meta = {'task': task, 'strategy': strategy, 'normalization': normalization, 'shots': shots,
            'run_seed': run_seed}
    model_path = _save_model(folder, fitted, meta)
    write_csv(os.path.join(folder, 'predictions.csv'), ['part_id', 'label', 'prediction'],
              [[corpus.part_ids[i], format_float(t), format_float(p)] for i, t, p in zip(test_idx, truth, pred)])
    metrics = {**meta, 'r2': r2, 'trainable_params': fitted.trainable,
               'train_parts': [corpus.part_ids[i] for i in train_idx], 'n_test': len(test_idx),
               'tdi_model': fitted.tdi_model, 'model': os.path.basename(model_path)}
    if settings.record_timings:
        metrics['fit_seconds'] = fitted.seconds
    write_settings(folder, run_settings)
    atomic_write_text(metrics_path, json.dumps(metrics, indent=2) + '\n')
    logger.info(f'{strategy} on {task} ({normalization}, {shots} shots): R2 {r2:.4f}, '
                f'{fitted.trainable:,} trainable parameters')
    return f'R2 {r2:.4f} with {fitted.trainable:,} trainable parameters'
