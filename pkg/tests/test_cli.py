import json
import os

import pytest

from virl.cli import ExitStatus, build_parser, main, resolve_config
from virl.errors import UsageError


def _run(tmp_path, *argv):
    return main([*argv, '--out', str(tmp_path / 'run'), '--threads', '1'])


def test_empty_strategy_list_is_a_usage_error(tmp_path):
    assert _run(tmp_path, 'report', '--strategies', '') == ExitStatus.USAGE


def test_unknown_config_key(tmp_path):
    path = tmp_path / 'bad.json'
    path.write_text(json.dumps({'encoder': {'latent': 4}}), encoding='utf-8')
    assert _run(tmp_path, 'gen', '--config', str(path)) == ExitStatus.USAGE


def test_missing_config_file(tmp_path):
    assert _run(tmp_path, 'gen', '--config', str(tmp_path / 'missing.json')) == ExitStatus.USAGE


def test_adapt_without_checkpoint_is_a_data_error(tmp_path):
    assert _run(tmp_path, 'adapt') == ExitStatus.DATA
    assert not os.path.exists(tmp_path / 'run' / '.lock')
    assert os.path.exists(tmp_path / 'run' / 'virl.log')
    assert os.path.exists(tmp_path / 'run' / 'config.echo.json')


def test_locked_output_directory(tmp_path):
    os.makedirs(tmp_path / 'run')
    (tmp_path / 'run' / '.lock').write_text('123', encoding='ascii')
    assert _run(tmp_path, 'adapt') == ExitStatus.USAGE
    assert os.path.exists(tmp_path / 'run' / '.lock')


def test_unknown_command():
    assert main(['teleport']) == ExitStatus.USAGE


def test_malformed_flags_are_usage_errors(tmp_path):
    assert _run(tmp_path, 'adapt', '--shots', 'many') == ExitStatus.USAGE
    assert _run(tmp_path, 'gen', '--frobnicate') == ExitStatus.USAGE
    assert main([]) == ExitStatus.USAGE


def test_flags_reach_the_config(tmp_path):
    args = build_parser().parse_args(['adapt', '--task', 'sm_time', '--strategy', 'lora-2', '--shots', '12',
                                      '--checkpoint', 'last', '--seed', '9', '--out', str(tmp_path)])
    config = resolve_config(args)
    assert (config.adapt.task, config.adapt.strategy, config.adapt.shots) == ('sm_time', 'lora-2', 12)
    assert config.adapt.checkpoint == config.report.checkpoint == 'last'
    assert config.encoder.seed == 9


def test_bad_flag_value_is_a_usage_error(tmp_path):
    assert _run(tmp_path, 'adapt', '--strategy', 'boosting') == ExitStatus.USAGE


def test_parser_raises_usage_error():
    with pytest.raises(UsageError, match='invalid choice'):
        build_parser().parse_args(['teleport'])
