"""End-to-end runs of the command steps on small corpora."""
import filecmp
import json
import os
from dataclasses import replace

import numpy as np
import pytest

from virl.cli import ExitStatus, main
from virl.config import load_config
from virl.do_everything import do_everything
from virl.downstream import DownstreamSettings, LabeledCorpus, run_protocol
from virl.encoder import EncoderConfig, HierarchicalEncoder
from virl.step000_generate_dataset import generate_all_parts_under_folder, generate_single_part, part_files
from virl.step010_pretrain import BEST_NAME, LAST_NAME, list_checkpoints
from virl.step020_adapt import adapt_under_folder, build_labeled_corpus
from virl.step030_report import report_under_folder
from virl.synth import LABEL_COLUMNS
from virl.utils import derive_seed, read_csv

SMOKE_CONFIG = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), 'config', 'smoke.json')


@pytest.fixture(scope='module')
def smoke_run(tmp_path_factory):
    out = str(tmp_path_factory.mktemp('smoke'))
    config = replace(load_config(SMOKE_CONFIG), out=out, threads=1)
    summary = do_everything(config)
    return config, summary


def _cli(config, *argv):
    return main([*argv, '--config', SMOKE_CONFIG, '--out', config.out, '--threads', '1'])


def test_all_writes_every_step(smoke_run):
    config, summary = smoke_run
    assert summary.startswith('gen: Generated 16 parts')
    dataset = config.folder('dataset')
    labels = read_csv(os.path.join(dataset, 'labels.csv'))
    assert len(labels) == 16
    assert all(float(row['am_time']) > 0.0 for row in labels)
    assert len(read_csv(os.path.join(dataset, 'augmentations.csv'))) == 16 * 48

    pretrain = config.folder('pretrain')
    for name in (BEST_NAME, LAST_NAME, 'loss.csv', 'best.json'):
        assert os.path.exists(os.path.join(pretrain, name))
    # 14 training parts, batch 8, one epoch
    assert [step for step, _ in list_checkpoints(pretrain)] == [1, 2]

    rows = read_csv(os.path.join(config.folder('report'), 'report.csv'))
    assert {row['strategy'] for row in rows} == {'probe-mlp', 'scratch', 'oracle'}
    assert all(np.isfinite(float(row['r2'])) for row in rows)
    assert all(row['fit_seconds'] == '' for row in rows)


def test_rerun_skips_finished_steps(smoke_run):
    config, _ = smoke_run
    summary = do_everything(config)
    assert 'Dataset already exists' in summary
    assert 'Pretraining already complete' in summary
    assert 'Report already exists' in summary


def test_commands_on_a_finished_run(smoke_run):
    config, _ = smoke_run
    assert _cli(config, 'adapt', '--shots', '4') == ExitStatus.OK
    metrics_files = [os.path.join(root, f) for root, _, files in os.walk(config.folder('adapt')) for f in files
                     if f == 'metrics.json']
    assert len(metrics_files) == 1
    with open(metrics_files[0], 'r', encoding='utf-8') as f:
        metrics = json.load(f)
    assert len(metrics['train_parts']) == 4

    assert _cli(config, 'reconstruct', '--part', 'part_000000', '--n', '8') == ExitStatus.OK
    iou = read_csv(os.path.join(config.folder('reconstruct'), 'iou.csv'))
    assert [row['part_id'] for row in iou] == ['part_000000']
    assert 0.0 <= float(iou[0]['iou']) <= 1.0

    assert _cli(config, 'embed') == ExitStatus.OK
    assert len(read_csv(os.path.join(config.folder('embed'), 'embedding.csv'))) == 16

    assert _cli(config, 'sweep') == ExitStatus.OK
    assert os.path.exists(os.path.join(config.folder('sweep'), 'sweep.csv'))


def test_generation_is_deterministic(tmp_path):
    a = generate_single_part(str(tmp_path / 'a'), 7, grid_n=6)
    b = generate_single_part(str(tmp_path / 'b'), 7, grid_n=6)
    assert a['labels'] == b['labels']
    for rel in part_files('', a['id']).values():
        assert filecmp.cmp(tmp_path / 'a' / rel, tmp_path / 'b' / rel, shallow=False)


def _oracle_corpus(n=30):
    """Labels linear in the oracle features; no graphs, so only the oracle can fit it."""
    rng = np.random.default_rng(0)
    am = rng.uniform(1.0, 3.0, n)
    sub = rng.uniform(0.1, 2.0, n)
    labels = {'am_time': 2.0 * am + 1.0, 'sm_time': 3.0 * sub + 0.5}
    return LabeledCorpus([f'p{i}' for i in range(n)], [None] * n, rng.normal(size=(n, 4)), labels, am, sub,
                         np.column_stack([am, sub]))


def test_report_follows_its_settings(tmp_path):
    corpus = _oracle_corpus()
    encoder = HierarchicalEncoder(EncoderConfig(hidden_width=8, latent_width=4))
    settings = DownstreamSettings(n_test=10, n_runs=2)
    folder = str(tmp_path / 'report')

    report_under_folder(folder, corpus, encoder, ['am_time'], ['oracle'], [5], settings=settings)
    again = report_under_folder(folder, corpus, encoder, ['am_time'], ['oracle'], [5], settings=settings)
    assert again.startswith('Report already exists')

    result = report_under_folder(folder, corpus, encoder, ['am_time', 'sm_time'], ['oracle'], [5, 10],
                                 settings=settings)
    assert 'already exists' not in result
    rows = read_csv(os.path.join(folder, 'report.csv'))
    assert {(row['task'], row['shots']) for row in rows} == {
        (task, shots) for task in ('am_time', 'sm_time') for shots in ('5', '10')}

    other = HierarchicalEncoder(EncoderConfig(hidden_width=8, latent_width=4, seed=1))
    result = report_under_folder(folder, corpus, other, ['am_time', 'sm_time'], ['oracle'], [5, 10],
                                 settings=settings)
    assert 'already exists' not in result


def test_adapt_follows_its_settings(tmp_path):
    corpus = _oracle_corpus()
    encoder = HierarchicalEncoder(EncoderConfig(hidden_width=8, latent_width=4))
    folder = str(tmp_path / 'adapt')
    args = (corpus, encoder, 'am_time', 'oracle', 'static', 5)

    adapt_under_folder(folder, *args, settings=DownstreamSettings(n_test=10))
    assert adapt_under_folder(folder, *args, settings=DownstreamSettings(n_test=10)).endswith('(cached)')

    result = adapt_under_folder(folder, *args, settings=DownstreamSettings(n_test=10, seed=4))
    assert not result.endswith('(cached)')
    with open(os.path.join(folder, 'metrics.json'), 'r', encoding='utf-8') as f:
        metrics = json.load(f)
    assert metrics['run_seed'] == derive_seed(4, 'run', 0)
    assert adapt_under_folder(folder, *args, settings=DownstreamSettings(n_test=10, seed=4)).endswith('(cached)')


@pytest.mark.slow
def test_oracle_ceiling(tmp_path):
    """A linear fit on the measured quantities explains every label."""
    folder = str(tmp_path / 'dataset')
    generate_all_parts_under_folder(folder, 150, seed=1, grid_n=8, threads=4)
    encoder = HierarchicalEncoder(EncoderConfig(hidden_width=8, latent_width=4))
    corpus = build_labeled_corpus(folder, encoder)
    settings = DownstreamSettings(n_test=50, n_runs=3)
    report = run_protocol(corpus, encoder, LABEL_COLUMNS, ['oracle'], [100], settings=settings)
    assert report.rows
    for cell in report.aggregates():
        assert cell['r2_mean'] > 0.95, cell
