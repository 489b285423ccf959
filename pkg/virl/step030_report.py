import json
import os
import time
from dataclasses import asdict, replace

from loguru import logger

from .downstream import REPORT_COLUMNS, DownstreamSettings, LabeledCorpus, run_protocol
from .encoder import EncoderConfig, HierarchicalEncoder
from .errors import UsageError
from .pretrain import PretrainConfig
from .step000_generate_dataset import load_manifest
from .step010_pretrain import load_encoder, pretrain_under_folder, resolve_checkpoint
from .step020_adapt import build_labeled_corpus, corpus_fingerprint
from .utils import atomic_write_text, format_float, settings_match, write_csv, write_settings

ABLATION_COLUMNS = ('axis', 'width', 'strategy', 'shots', 'r2_mean', 'r2_std', 'encoder_params')


def report_under_folder(folder: str, corpus: LabeledCorpus, encoder: HierarchicalEncoder, tasks, strategies,
                        shots, normalizations=('static',), include_oracle: bool = True,
                        settings: DownstreamSettings = None, threads: int = 1) -> str:
    """Every (task, strategy, normalization, shots) cell over n_runs shared shot subsets."""
    settings = settings or DownstreamSettings()
    csv_path = os.path.join(folder, 'report.csv')
    strategies = list(strategies)
    if not strategies:
        raise UsageError('Report needs at least one strategy')
    if include_oracle and 'oracle' not in strategies:
        strategies.append('oracle')
    run_settings = {'tasks': list(tasks), 'strategies': strategies, 'shots': list(shots),
                    'normalizations': list(normalizations), 'downstream': asdict(settings),
                    'corpus': corpus_fingerprint(corpus, encoder)}
    if os.path.exists(csv_path):
        if settings_match(folder, run_settings):
            logger.info(f'Report already exists in {folder}')
            return f'Report already exists: {csv_path}'
        logger.warning(f'Report in {folder} was computed with other settings; recomputing')
        os.remove(csv_path)

    t_start = time.time()
    report = run_protocol(corpus, encoder, tasks, strategies, shots, normalizations, settings, threads)
    os.makedirs(folder, exist_ok=True)
    write_settings(folder, run_settings)
    atomic_write_text(os.path.join(folder, 'report.json'), json.dumps(report.to_json(), indent=2) + '\n')
    write_csv(csv_path, list(REPORT_COLUMNS), [row.csv_row(settings.record_timings) for row in report.sorted_rows()])
    t_end = time.time()
    for cell in report.aggregates():
        logger.info(f'{cell["task"]:>12} {cell["strategy"]:>10} {cell["normalization"]:>10} '
                    f'{cell["shots"]:>5} shots: R2 {cell["r2_mean"]:.4f} +/- {cell["r2_std"]:.4f}')
    logger.info(f'Report of {len(report.rows)} fits in {t_end - t_start:.2f} seconds')
    return f'Report of {len(report.rows)} fits written to {csv_path}'


def ablation_under_folder(folder: str, dataset_folder: str, encoder_config: EncoderConfig,
                          pretrain_config: PretrainConfig, latent_widths=(), hidden_widths=(), task: str = 'am_time',
                          probe_shots: int = 100, finetune_shots: int = 100,
                          settings: DownstreamSettings = None, threads: int = 1) -> str:
    """Pretrain one model per width, then score probe-mlp and finetune with each."""
    settings = settings or DownstreamSettings()
    csv_path = os.path.join(folder, 'ablation.csv')
    run_settings = {'latent_widths': list(latent_widths), 'hidden_widths': list(hidden_widths), 'task': task,
                    'probe_shots': probe_shots, 'finetune_shots': finetune_shots,
                    'encoder': asdict(encoder_config), 'pretrain': asdict(pretrain_config),
                    'downstream': asdict(settings), 'dataset': load_manifest(dataset_folder).get('settings')}
    if os.path.exists(csv_path):
        if settings_match(folder, run_settings):
            logger.info(f'Ablation already exists in {folder}')
            return f'Ablation already exists: {csv_path}'
        logger.warning(f'Ablation in {folder} was computed with other settings; recomputing')
        os.remove(csv_path)
    variants = [('latent', w, replace(encoder_config, latent_width=int(w))) for w in latent_widths]
    variants += [('hidden', w, replace(encoder_config, hidden_width=int(w))) for w in hidden_widths]
    if not variants:
        logger.info('No ablation widths configured')
        return 'No ablation widths configured'

    rows = []
    for axis, width, config in variants:
        variant_folder = os.path.join(folder, f'{axis}_{width}')
        logger.info(f'Ablation {axis} width {width}')
        pretrain_under_folder(variant_folder, dataset_folder, pretrain_config, config, threads)
        encoder = load_encoder(resolve_checkpoint(variant_folder, 'best'))
        corpus = build_labeled_corpus(dataset_folder, encoder)
        for strategy, shots in (('probe-mlp', probe_shots), ('finetune', finetune_shots)):
            report = run_protocol(corpus, encoder, [task], [strategy], [shots], ('static',), settings, threads)
            if not report.rows:
                continue
            cell = report.aggregates()[0]
            rows.append([axis, width, strategy, shots, format_float(cell['r2_mean']), format_float(cell['r2_std']),
                         encoder.parameter_count()])
    write_settings(folder, run_settings)
    write_csv(csv_path, list(ABLATION_COLUMNS), rows)
    return f'Ablation of {len(variants)} widths written to {csv_path}'
