import json
import os

import pytest

from virl.config import (ECHO_NAME, RunConfig, config_from_dict, default_threads, dump_config, echo_config,
                         load_config, with_overrides)
from virl.errors import ConfigError

SMOKE_CONFIG = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), 'config', 'smoke.json')
DEFAULT_CONFIG = os.path.join(os.path.dirname(SMOKE_CONFIG), 'default.json')


def test_smoke_config_loads():
    config = load_config(SMOKE_CONFIG)
    assert config.dataset.n_parts == 16
    assert config.encoder.latent_width == 16
    assert config.report.shots == (4, 8)
    assert config.report.strategies == ('probe-mlp', 'scratch')


def test_default_config_compares_lora_ranks():
    config = load_config(DEFAULT_CONFIG)
    assert config.downstream.lora_rank == 1
    assert {'lora', 'lora-8', 'probe-svr', 'probe-mlp', 'finetune'} <= set(config.report.strategies)


@pytest.mark.parametrize('data', [
    {'colour': 'red'},
    {'encoder': {'width': 3}},
    {'pretrain': {'batch_size': 8, 'lr': 0.1}},
])
def test_unknown_keys_rejected(data):
    with pytest.raises(ConfigError):
        config_from_dict(data)


@pytest.mark.parametrize('data', [
    {'adapt': {'strategy': 'boosting'}},
    {'report': {'strategies': ['probe-mlp', 'gbm']}},
    {'report': {'normalizations': ['zscore']}},
    {'report': {'tasks': ['cost']}},
    {'dataset': {'mass_resolution': 32}},
    {'encoder': {'pooling': 'sum'}},
    {'pretrain': {'batch_size': 0}},
    {'encoder': 3},
])
def test_bad_values_rejected(data):
    with pytest.raises(ConfigError):
        config_from_dict(data)


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / 'nope.json'))
    bad = tmp_path / 'bad.json'
    bad.write_text('{"seed": ', encoding='utf-8')
    with pytest.raises(ConfigError):
        load_config(str(bad))


def test_echo_reproduces_the_config(tmp_path):
    config = load_config(SMOKE_CONFIG)
    path = echo_config(config, str(tmp_path))
    assert path.endswith(ECHO_NAME)
    again = load_config(path)
    assert again == config
    assert dump_config(again) == dump_config(config)


def test_seed_override_reaches_every_section():
    config = with_overrides(RunConfig(), seed=7)
    assert {config.seed, config.dataset.seed, config.encoder.seed, config.pretrain.seed,
            config.downstream.seed} == {7}


def test_out_and_threads_override():
    config = with_overrides(RunConfig(), out='elsewhere', threads=3)
    assert (config.out, config.threads) == ('elsewhere', 3)
    with pytest.raises(ConfigError):
        with_overrides(RunConfig(), threads=0)


def test_dataset_dir(tmp_path):
    config = config_from_dict({'out': str(tmp_path), 'dataset_dir': 'shared/data'})
    assert config.folder('dataset') == 'shared/data'
    assert config.folder('pretrain') == str(tmp_path / 'pretrain')


def test_threads_from_environment(monkeypatch):
    monkeypatch.setenv('VIRL_THREADS', '4')
    assert default_threads() == 4
    monkeypatch.setenv('VIRL_THREADS', 'many')
    assert default_threads() == 1
    monkeypatch.setenv('VIRL_THREADS', '0')
    assert default_threads() == 1


def test_json_lists_become_tuples():
    config = config_from_dict(json.loads('{"report": {"shots": [3, 6], "sweep_shots": [3]}}'))
    assert config.report.shots == (3, 6)
