import os
import time

from loguru import logger

from .config import RunConfig, echo_config
from .errors import UsageError
from .pretrain import load_checkpoint, model_from_checkpoint
from .step000_generate_dataset import generate_all_parts_under_folder
from .step010_pretrain import load_encoder, pretrain_under_folder, resolve_checkpoint
from .step020_adapt import adapt_folder_name, adapt_under_folder, build_labeled_corpus
from .step030_report import ablation_under_folder, report_under_folder
from .step040_reconstruct import reconstruct_under_folder
from .step050_sweep_checkpoints import sweep_under_folder
from .step060_embed import embed_under_folder


def run_gen(config: RunConfig) -> str:
    folder = config.folder('dataset')
    d = config.dataset
    result = generate_all_parts_under_folder(folder, d.n_parts, d.seed, d.grid_n, d.mass_resolution, config.threads)
    echo_config(config, folder)
    return result


def run_pretrain(config: RunConfig, until: int = None) -> str:
    folder = config.folder('pretrain')
    os.makedirs(folder, exist_ok=True)
    echo_config(config, folder)
    return pretrain_under_folder(folder, config.folder('dataset'), config.pretrain, config.encoder,
                                 config.threads, until)


def _encoder_and_corpus(config: RunConfig, which: str):
    encoder = load_encoder(resolve_checkpoint(config.folder('pretrain'), which))
    return encoder, build_labeled_corpus(config.folder('dataset'), encoder)


def run_adapt(config: RunConfig) -> str:
    a = config.adapt
    folder = os.path.join(config.folder('adapt'), adapt_folder_name(a.task, a.strategy, a.normalization, a.shots))
    encoder, corpus = _encoder_and_corpus(config, a.checkpoint)
    result = adapt_under_folder(folder, corpus, encoder, a.task, a.strategy, a.normalization, a.shots,
                                config.downstream)
    echo_config(config, folder)
    return result


def run_report(config: RunConfig) -> str:
    r = config.report
    if not r.strategies:
        raise UsageError('Report needs at least one strategy')
    folder = config.folder('report')
    encoder, corpus = _encoder_and_corpus(config, r.checkpoint)
    results = [report_under_folder(folder, corpus, encoder, r.tasks, r.strategies, r.shots, r.normalizations,
                                   r.include_oracle, config.downstream, config.threads)]
    if r.ablation_latent_widths or r.ablation_hidden_widths:
        results.append(ablation_under_folder(
            os.path.join(folder, 'ablation'), config.folder('dataset'), config.encoder, config.pretrain,
            r.ablation_latent_widths, r.ablation_hidden_widths, r.tasks[0], r.ablation_probe_shots,
            max(r.shots), config.downstream, config.threads))
    echo_config(config, folder)
    return '\n'.join(results)


def run_reconstruct(config: RunConfig, part_ids=None) -> str:
    folder = config.folder('reconstruct')
    ckpt = load_checkpoint(resolve_checkpoint(config.folder('pretrain'), config.report.checkpoint))
    model = model_from_checkpoint(ckpt)
    model.eval()
    result = reconstruct_under_folder(folder, config.folder('dataset'), model, config.report.reconstruct_n,
                                      part_ids, config.threads)
    echo_config(config, folder)
    return result


def run_sweep(config: RunConfig) -> str:
    folder = config.folder('sweep')
    result = sweep_under_folder(folder, config.folder('pretrain'), config.folder('dataset'), config.report.tasks,
                                config.report.sweep_shots, config.downstream, config.threads)
    echo_config(config, folder)
    return result


def run_embed(config: RunConfig) -> str:
    folder = config.folder('embed')
    _, corpus = _encoder_and_corpus(config, config.report.checkpoint)
    result = embed_under_folder(folder, corpus)
    echo_config(config, folder)
    return result


def do_everything(config: RunConfig) -> str:
    """Dataset, pretraining and the downstream report, each step skipping finished work."""
    t_start = time.time()
    results = []
    for name, step in (('gen', run_gen), ('pretrain', run_pretrain), ('report', run_report)):
        logger.info(f'Running {name} into {config.out}')
        results.append(f'{name}: {step(config)}')
    t_end = time.time()
    logger.info(f'All steps finished in {t_end - t_start:.2f} seconds')
    return '\n'.join(results)
