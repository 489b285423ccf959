"""
Run configuration: a JSON file parsed into nested dataclasses.

Unknown keys are rejected at every level. Every step writes the fully
resolved config to <out>/config.echo.json, and loading that echo
reproduces the run.
"""
import json
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace

from dotenv import load_dotenv
from loguru import logger

from .downstream import NORMALIZATIONS, DownstreamSettings, check_strategy
from .encoder import EncoderConfig
from .errors import ConfigError, UsageError
from .geometry import MIN_MASS_RESOLUTION
from .pretrain import PretrainConfig
from .synth import LABEL_COLUMNS
from .utils import atomic_write_text

load_dotenv()

ECHO_NAME = 'config.echo.json'


def default_data_root() -> str:
    return os.getenv('VIRL_DATA_ROOT', 'runs')


def default_threads() -> int:
    try:
        return max(1, int(os.getenv('VIRL_THREADS', '1')))
    except ValueError:
        logger.warning(f'Ignoring non-integer VIRL_THREADS={os.getenv("VIRL_THREADS")!r}')
        return 1


def default_log_level() -> str:
    return os.getenv('VIRL_LOG_LEVEL', 'INFO')


@dataclass(frozen=True)
class DatasetSettings:
    n_parts: int = 64
    grid_n: int = 40
    mass_resolution: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.n_parts < 1:
            raise ConfigError(f'dataset.n_parts must be >= 1, got {self.n_parts}')
        if self.grid_n < 2:
            raise ConfigError(f'dataset.grid_n must be >= 2, got {self.grid_n}')
        if self.mass_resolution < MIN_MASS_RESOLUTION:
            raise ConfigError(f'dataset.mass_resolution must be >= {MIN_MASS_RESOLUTION}, got {self.mass_resolution}')


@dataclass(frozen=True)
class AdaptSettings:
    task: str = 'am_time'
    strategy: str = 'probe-mlp'
    normalization: str = 'static'
    shots: int = 100
    # 'best', 'last' or a checkpoint step
    checkpoint: str = 'best'

    def __post_init__(self):
        _check_tasks([self.task])
        check_strategy(self.strategy)
        _check_normalizations([self.normalization])


@dataclass(frozen=True)
class ReportSettings:
    tasks: tuple = LABEL_COLUMNS
    strategies: tuple = ('probe-mlp', 'scratch')
    shots: tuple = (50, 100)
    normalizations: tuple = ('static',)
    include_oracle: bool = True
    checkpoint: str = 'best'
    ablation_latent_widths: tuple = ()
    ablation_hidden_widths: tuple = ()
    ablation_probe_shots: int = 100
    sweep_shots: tuple = (100, 200)
    embed_color: str = 'am_time'
    reconstruct_n: int = 40

    def __post_init__(self):
        for name in ('tasks', 'strategies', 'shots', 'normalizations', 'ablation_latent_widths',
                     'ablation_hidden_widths', 'sweep_shots'):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        _check_tasks(self.tasks)
        for s in self.strategies:
            check_strategy(s)
        _check_normalizations(self.normalizations)
        if any(int(s) < 1 for s in self.shots + self.sweep_shots):
            raise ConfigError('Shot counts must be >= 1')
        if self.embed_color not in LABEL_COLUMNS:
            raise ConfigError(f'report.embed_color must be one of {LABEL_COLUMNS}')


def _check_tasks(tasks):
    for task in tasks:
        if task not in LABEL_COLUMNS:
            raise ConfigError(f'Unknown task {task!r}, expected one of {LABEL_COLUMNS}')


def _check_normalizations(norms):
    for norm in norms:
        if norm not in NORMALIZATIONS:
            raise ConfigError(f'Unknown normalization {norm!r}, expected one of {NORMALIZATIONS}')


@dataclass(frozen=True)
class RunConfig:
    out: str = field(default_factory=lambda: os.path.join(default_data_root(), 'default'))
    # reuse a corpus generated elsewhere; empty means <out>/dataset
    dataset_dir: str = ''
    threads: int = field(default_factory=default_threads)
    seed: int = 0
    dataset: DatasetSettings = field(default_factory=DatasetSettings)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    downstream: DownstreamSettings = field(default_factory=DownstreamSettings)
    adapt: AdaptSettings = field(default_factory=AdaptSettings)
    report: ReportSettings = field(default_factory=ReportSettings)

    def folder(self, name: str) -> str:
        if name == 'dataset' and self.dataset_dir:
            return self.dataset_dir
        return os.path.join(self.out, name)

    def to_dict(self) -> dict:
        return asdict(self)


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f'{where} must be an object, got {type(data).__name__}')
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f'Unknown key(s) in {where}: {", ".join(unknown)}')
    kwargs = {}
    for key, value in data.items():
        sub = known[key].type
        if is_dataclass(sub):
            kwargs[key] = _build(sub, value, f'{where}.{key}')
        elif isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (UsageError, TypeError, ValueError) as e:
        raise ConfigError(f'Invalid {where}: {e}')


def config_from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, 'config')


def load_config(path: str) -> RunConfig:
    if not os.path.exists(path):
        raise ConfigError(f'Config file {path} does not exist')
    with open(path, 'r', encoding='utf-8') as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f'Config file {path} is not valid JSON: {e}')
    return config_from_dict(data)


def with_overrides(config: RunConfig, seed: int = None, out: str = None, threads: int = None) -> RunConfig:
    """--seed replaces the seed of every section."""
    if seed is not None:
        config = replace(
            config, seed=seed,
            dataset=replace(config.dataset, seed=seed),
            encoder=replace(config.encoder, seed=seed),
            pretrain=replace(config.pretrain, seed=seed),
            downstream=replace(config.downstream, seed=seed))
    if out is not None:
        config = replace(config, out=out)
    if threads is not None:
        if threads < 1:
            raise ConfigError(f'--threads must be >= 1, got {threads}')
        config = replace(config, threads=threads)
    return config


def dump_config(config: RunConfig) -> str:
    return json.dumps(config.to_dict(), indent=2, sort_keys=True) + '\n'


def echo_config(config: RunConfig, folder: str) -> str:
    path = os.path.join(folder, ECHO_NAME)
    atomic_write_text(path, dump_config(config))
    return path
