"""
Few-shot adaptation of a pretrained encoder to manufacturability labels.

Strategies:
    probe-mlp   frozen encoder, 2-layer head on cached latents
    probe-svr   frozen encoder, RBF epsilon-SVR on cached latents
    lora[-r]    frozen encoder with rank-r adapters on early convs, plus head
    finetune    every encoder weight trainable, plus head
    scratch     finetune starting from a randomly initialized encoder
    oracle      least squares on the closed-form label features (ceiling)

Normalizations:
    static      log-domain standardization fitted on the training split
                (bounded labels skip the log and are only standardized)
    static+tdi  static, with the standardized ln TDI appended to the head input
    dynamic     head output multiplied by the TDI before the loss
"""
import copy
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from loguru import logger
from torch import nn

from .encoder import EncoderConfig, HierarchicalEncoder, collate
from .errors import ConvergenceError, DataError, ShapeError, UsageError
from .heuristics import fit_am_model, fit_sm_model, is_positive_tdi
from .nncore import (DTYPE, CosineSchedule, adam_step, backward, check_finite, count_parameters, huber, linear,
                     lr_at, make_adam, make_generator)
from .utils import derive_seed

STRATEGIES = ('probe-mlp', 'probe-svr', 'lora', 'finetune', 'scratch', 'oracle')
NORMALIZATIONS = ('static', 'static+tdi', 'dynamic')
BOUNDED_TASKS = ('blade_proxy',)
TDI_TASKS = ('am_time', 'sm_time')
LORA_TARGETS = ('vertex', 'edge', 'face', 'all')
REPORT_COLUMNS = ('task', 'strategy', 'normalization', 'shots', 'run_seed', 'r2', 'fit_seconds',
                  'trainable_params')


@dataclass(frozen=True)
class DownstreamSettings:
    probe_steps: int = 2000
    probe_lr_start: float = 1e-3
    probe_lr_end: float = 1e-5
    lora_steps: int = 500
    lora_lr_start: float = 1e-3
    lora_lr_end: float = 1e-5
    finetune_steps: int = 500
    finetune_lr_start: float = 1e-4
    finetune_lr_end: float = 1e-6
    # minibatch for strategies that run the encoder; 0 means full batch
    adapt_batch_size: int = 32
    head_hidden: int = 64
    huber_delta: float = 1.0
    svr_c: float = 10.0
    svr_epsilon: float = 0.01
    # 0 means 1 / latent width
    svr_gamma: float = 0.0
    svr_tol: float = 1e-4
    svr_max_sweeps: int = 10000
    lora_rank: int = 1
    lora_target: str = 'vertex'
    sm_tdi_degraded: bool = False
    n_test: int = 2000
    n_runs: int = 10
    record_timings: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.lora_rank < 1:
            raise UsageError(f'LoRA rank must be >= 1, got {self.lora_rank}')
        if self.lora_target not in LORA_TARGETS:
            raise UsageError(f'lora_target must be one of {LORA_TARGETS}, got {self.lora_target!r}')
        if min(self.probe_steps, self.lora_steps, self.finetune_steps) < 0:
            raise UsageError('Step budgets must be >= 0')
        if self.n_runs < 1 or self.n_test < 1:
            raise UsageError('n_runs and n_test must be >= 1')


def r2_score(pred, truth) -> float:
    pred = np.asarray(pred, dtype=np.float64).ravel()
    truth = np.asarray(truth, dtype=np.float64).ravel()
    if len(pred) != len(truth):
        raise ShapeError(f'{len(pred)} predictions for {len(truth)} labels')
    if len(truth) < 2:
        raise UsageError('r2_score needs at least 2 samples')
    ss_tot = float(np.sum((truth - truth.mean()) ** 2))
    if ss_tot == 0.0:
        raise DataError('R2 is undefined for constant ground truth')
    ss_res = float(np.sum((truth - pred) ** 2))
    return 1.0 - ss_res / ss_tot


def dynamic_predict(head_output, tdi_value):
    tdi = np.asarray(tdi_value, dtype=np.float64)
    if np.any(tdi <= 0.0):
        raise DataError('Dynamic normalization needs a strictly positive TDI')
    return np.asarray(head_output, dtype=np.float64) * tdi


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Normalizer:
    """mode 'static' (log), 'raw' (bounded labels) or 'dynamic' (TDI-multiplied)."""
    mode: str
    mu: float = 0.0
    sigma: float = 1.0
    scale: float = 1.0
    tdi_mu: float = 0.0
    tdi_sigma: float = 1.0

    @classmethod
    def fit(cls, mode: str, labels, tdi=None) -> 'Normalizer':
        y = np.asarray(labels, dtype=np.float64)
        if not np.all(np.isfinite(y)):
            raise DataError('Labels must be finite')
        tdi_mu, tdi_sigma = 0.0, 1.0
        if tdi is not None:
            if not is_positive_tdi(tdi):
                raise DataError('TDI must be strictly positive on every training input')
            ln_t = np.log(np.asarray(tdi, dtype=np.float64))
            tdi_mu, tdi_sigma = float(ln_t.mean()), _safe_std(ln_t)
        if mode == 'static':
            if np.any(y <= 0.0):
                raise DataError('Static (log) normalization needs positive labels')
            ln_y = np.log(y)
            return cls(mode, float(ln_y.mean()), _safe_std(ln_y), 1.0, tdi_mu, tdi_sigma)
        if mode == 'raw':
            return cls(mode, float(y.mean()), _safe_std(y), 1.0, tdi_mu, tdi_sigma)
        if mode == 'dynamic':
            if tdi is None:
                raise UsageError('Dynamic normalization needs TDI values')
            scale = float(np.mean(np.abs(y))) or 1.0
            return cls(mode, 0.0, 1.0, scale, tdi_mu, tdi_sigma)
        raise UsageError(f'Unknown normalization mode {mode!r}')

    def normalize(self, y):
        y = np.asarray(y, dtype=np.float64)
        if self.mode == 'static':
            return (np.log(y) - self.mu) / self.sigma
        if self.mode == 'raw':
            return (y - self.mu) / self.sigma
        return y / self.scale

    def denormalize(self, t):
        t = np.asarray(t, dtype=np.float64)
        if self.mode == 'static':
            return np.exp(t * self.sigma + self.mu)
        if self.mode == 'raw':
            return t * self.sigma + self.mu
        return t * self.scale

    def tdi_feature(self, tdi) -> np.ndarray:
        return (np.log(np.asarray(tdi, dtype=np.float64)) - self.tdi_mu) / self.tdi_sigma

    def loss(self, head_out: torch.Tensor, y: torch.Tensor, tdi: torch.Tensor, delta: float) -> torch.Tensor:
        if self.mode == 'dynamic':
            return huber(head_out * tdi / self.scale, y / self.scale, delta)
        target = torch.from_numpy(self.normalize(y.numpy())).to(DTYPE)
        return huber(head_out, target, delta)

    def to_label(self, head_out: np.ndarray, tdi=None) -> np.ndarray:
        if self.mode == 'dynamic':
            return dynamic_predict(head_out, tdi)
        return self.denormalize(head_out)


def _safe_std(x) -> float:
    s = float(np.std(x))
    return s if s > 0.0 else 1.0


def label_mode(task: str, normalization: str) -> str:
    if normalization == 'dynamic':
        return 'dynamic'
    return 'raw' if task in BOUNDED_TASKS else 'static'


# ---------------------------------------------------------------------------
# Heads, adapters and the trainable wrapper
# ---------------------------------------------------------------------------

class ProbeHead(nn.Module):
    def __init__(self, d_in: int, seed: int, hidden: int = 64):
        super().__init__()
        g = make_generator(derive_seed('head', seed))
        self.hidden = linear(d_in, hidden, g)
        self.out = linear(hidden, 1, g)

    def forward(self, x):
        return self.out(torch.relu(self.hidden(x)))[:, 0]


class LoraLinear(nn.Module):
    """W x + B A x with A gaussian and B zero, so the wrapped layer starts unchanged."""

    def __init__(self, base: nn.Linear, rank: int, generator: torch.Generator):
        super().__init__()
        if rank < 1:
            raise UsageError(f'LoRA rank must be >= 1, got {rank}')
        self.base = base
        for p in self.base.parameters():
            p.requires_grad_(False)
        self.lora_a = nn.Parameter(torch.randn(rank, base.in_features, dtype=DTYPE, generator=generator)
                                   / math.sqrt(base.in_features))
        self.lora_b = nn.Parameter(torch.zeros(base.out_features, rank, dtype=DTYPE))

    @property
    def in_features(self):
        return self.base.in_features

    @property
    def out_features(self):
        return self.base.out_features

    def forward(self, x):
        return self.base(x) + (x @ self.lora_a.T) @ self.lora_b.T

    def adapter_parameters(self) -> int:
        return self.lora_a.numel() + self.lora_b.numel()


def _target_convs(encoder: HierarchicalEncoder, target: str) -> list:
    tiers = {'vertex': encoder.vertex_convs, 'edge': encoder.edge_convs, 'face': encoder.face_convs}
    if target == 'all':
        return [conv for convs in tiers.values() for conv in convs]
    return list(tiers[target])


def apply_lora(encoder: HierarchicalEncoder, rank: int, seed: int, target: str = 'vertex') -> HierarchicalEncoder:
    """Frozen deep copy of encoder with adapters on the chosen convs."""
    adapted = copy.deepcopy(encoder)
    for p in adapted.parameters():
        p.requires_grad_(False)
    g = make_generator(derive_seed('lora', seed))
    for conv in _target_convs(adapted, target):
        conv.self_linear = LoraLinear(conv.self_linear, rank, g)
        conv.nbr_linear = LoraLinear(conv.nbr_linear, rank, g)
    return adapted


def lora_parameter_count(encoder: HierarchicalEncoder) -> int:
    return sum(m.adapter_parameters() for m in encoder.modules() if isinstance(m, LoraLinear))


class AdaptedModel(nn.Module):
    """Head over latents (encoder None) or over an encoder run on graphs."""

    def __init__(self, head: ProbeHead, normalizer: Normalizer, encoder: HierarchicalEncoder = None,
                 tdi_input: bool = False):
        super().__init__()
        self.head = head
        self.encoder = encoder
        self.normalizer = normalizer
        self.tdi_input = tdi_input

    def head_output(self, inputs, tdi=None) -> torch.Tensor:
        if self.encoder is None:
            z = inputs if isinstance(inputs, torch.Tensor) else torch.from_numpy(np.asarray(inputs)).to(DTYPE)
        else:
            batch = inputs if not isinstance(inputs, (list, tuple)) else collate(inputs)
            z = self.encoder(batch)
        if self.tdi_input:
            feat = torch.from_numpy(self.normalizer.tdi_feature(tdi)).to(DTYPE)
            z = torch.cat([z, feat[:, None]], dim=1)
        out = self.head(z)
        if self.normalizer.mode == 'dynamic':
            out = 1.0 + out
        return out

    def predict(self, inputs, tdi=None, batch_size: int = 256) -> np.ndarray:
        outs = []
        with torch.no_grad():
            for start in range(0, len(inputs), batch_size):
                sl = slice(start, start + batch_size)
                chunk_tdi = None if tdi is None else np.asarray(tdi)[sl]
                outs.append(self.head_output(inputs[sl], chunk_tdi).numpy())
        head_out = np.concatenate(outs) if outs else np.zeros(0)
        return self.normalizer.to_label(head_out, tdi)

    def trainable_parameters(self) -> list:
        return [p for p in self.parameters() if p.requires_grad]


def _fit(model: AdaptedModel, inputs, labels, tdi, steps: int, lr_start: float, lr_end: float,
         batch_size: int, seed: int, delta: float, where: str) -> AdaptedModel:
    params = model.trainable_parameters()
    n = len(labels)
    if steps == 0 or not params:
        return model
    y = torch.from_numpy(np.asarray(labels, dtype=np.float64))
    tdi_arr = None if tdi is None else np.asarray(tdi, dtype=np.float64)
    tdi_t = None if tdi_arr is None else torch.from_numpy(tdi_arr)
    schedule = CosineSchedule(steps, lr_start, lr_end)
    optimizer = make_adam(params, lr_start)
    rng = np.random.default_rng(derive_seed(seed, 'minibatch'))
    full = batch_size <= 0 or batch_size >= n
    full_inputs = inputs
    if full and model.encoder is not None:
        full_inputs = collate(inputs)
    for t in range(steps):
        if full:
            idx, batch_in = None, full_inputs
        else:
            idx = np.sort(rng.choice(n, size=batch_size, replace=False))
            batch_in = [inputs[i] for i in idx] if model.encoder is not None else inputs[idx]
        batch_tdi = None if tdi_arr is None else (tdi_arr if idx is None else tdi_arr[idx])
        out = model.head_output(batch_in, batch_tdi)
        loss = model.normalizer.loss(out, y if idx is None else y[idx],
                                     None if tdi_t is None else (tdi_t if idx is None else tdi_t[idx]), delta)
        check_finite(loss, f'{where} step {t}')
        adam_step(params, backward(loss, params), optimizer, lr_at(schedule, t))
    return model


def fit_probe_mlp(latents, labels, normalizer: Normalizer, seed: int, settings: DownstreamSettings = None,
                  tdi=None, tdi_input: bool = False) -> AdaptedModel:
    settings = settings or DownstreamSettings()
    latents = torch.from_numpy(np.asarray(latents, dtype=np.float64))
    head = ProbeHead(latents.shape[1] + int(tdi_input), seed, settings.head_hidden)
    model = AdaptedModel(head, normalizer, tdi_input=tdi_input)
    return _fit(model, latents, labels, tdi, settings.probe_steps, settings.probe_lr_start, settings.probe_lr_end,
                0, seed, settings.huber_delta, 'probe-mlp')


def fit_lora(encoder: HierarchicalEncoder, rank: int, graphs, labels, normalizer: Normalizer, seed: int,
             settings: DownstreamSettings = None, tdi=None, tdi_input: bool = False) -> AdaptedModel:
    settings = settings or DownstreamSettings()
    adapted = apply_lora(encoder, rank, seed, settings.lora_target)
    head = ProbeHead(encoder.config.latent_width + int(tdi_input), seed, settings.head_hidden)
    model = AdaptedModel(head, normalizer, adapted, tdi_input)
    return _fit(model, list(graphs), labels, tdi, settings.lora_steps, settings.lora_lr_start,
                settings.lora_lr_end, settings.adapt_batch_size, seed, settings.huber_delta, f'lora-{rank}')


def finetune_all(encoder: HierarchicalEncoder, graphs, labels, normalizer: Normalizer, seed: int,
                 settings: DownstreamSettings = None, tdi=None, tdi_input: bool = False) -> AdaptedModel:
    settings = settings or DownstreamSettings()
    tuned = copy.deepcopy(encoder)
    for p in tuned.parameters():
        p.requires_grad_(True)
    head = ProbeHead(encoder.config.latent_width + int(tdi_input), seed, settings.head_hidden)
    model = AdaptedModel(head, normalizer, tuned, tdi_input)
    return _fit(model, list(graphs), labels, tdi, settings.finetune_steps, settings.finetune_lr_start,
                settings.finetune_lr_end, settings.adapt_batch_size, seed, settings.huber_delta, 'finetune')


def scratch_encoder(config: EncoderConfig, seed: int) -> HierarchicalEncoder:
    return HierarchicalEncoder(EncoderConfig(**{**asdict(config), 'seed': derive_seed('scratch', seed)}))


# ---------------------------------------------------------------------------
# Support vector regression
# ---------------------------------------------------------------------------

def rbf_kernel(a, b, gamma: float) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    sq = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.exp(-gamma * np.maximum(sq, 0.0))


@dataclass(eq=False)
class SvrModel:
    support: np.ndarray
    coef: np.ndarray
    gamma: float
    sweeps: int = 0

    def predict(self, x) -> np.ndarray:
        k = rbf_kernel(x, self.support, self.gamma) + 1.0
        return k @ self.coef

    @property
    def n_support(self) -> int:
        return int(np.count_nonzero(self.coef))


def fit_svr(latents, labels, gamma: float = None, C: float = 10.0, epsilon: float = 0.01,
            tol: float = 1e-4, max_sweeps: int = 10000) -> SvrModel:
    """
    epsilon-SVR dual, coefficients beta = alpha - alpha* in [-C, C], with the
    bias absorbed by the kernel K + 1. Cyclic coordinate descent; each update
    is a soft-threshold of the residual clipped to the box.
    """
    x = np.asarray(latents, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64).ravel()
    if x.ndim != 2 or len(x) != len(y):
        raise ShapeError(f'SVR inputs disagree: {x.shape} vs {y.shape}')
    if len(y) < 2:
        raise UsageError('SVR needs at least 2 samples')
    gamma = gamma or 1.0 / x.shape[1]
    q = rbf_kernel(x, x, gamma) + 1.0
    beta = np.zeros(len(y))
    q_beta = np.zeros(len(y))
    for sweep in range(1, max_sweeps + 1):
        max_change = 0.0
        for i in range(len(y)):
            qii = q[i, i]
            r = q_beta[i] - qii * beta[i] - y[i]
            new = -np.sign(r) * max(abs(r) - epsilon, 0.0) / qii
            new = min(max(new, -C), C)
            delta = new - beta[i]
            if delta != 0.0:
                q_beta += delta * q[:, i]
                beta[i] = new
                max_change = max(max_change, abs(delta) * qii)
        if max_change < tol:
            return SvrModel(x.copy(), beta, gamma, sweep)
    raise ConvergenceError(f'SVR did not reach tolerance {tol} within {max_sweeps} sweeps')


@dataclass(eq=False)
class SvrRegressor:
    svr: SvrModel
    normalizer: Normalizer
    tdi_input: bool = False

    def _inputs(self, latents, tdi):
        x = np.asarray(latents, dtype=np.float64)
        if self.tdi_input:
            x = np.concatenate([x, self.normalizer.tdi_feature(tdi)[:, None]], axis=1)
        return x

    def predict(self, latents, tdi=None) -> np.ndarray:
        out = self.svr.predict(self._inputs(latents, tdi))
        if self.normalizer.mode == 'dynamic':
            return dynamic_predict(out, tdi)
        return self.normalizer.denormalize(out)


def fit_svr_regressor(latents, labels, normalizer: Normalizer, settings: DownstreamSettings = None,
                      tdi=None, tdi_input: bool = False) -> SvrRegressor:
    settings = settings or DownstreamSettings()
    reg = SvrRegressor(None, normalizer, tdi_input)
    x = reg._inputs(latents, tdi)
    y = np.asarray(labels, dtype=np.float64)
    target = y / np.asarray(tdi) if normalizer.mode == 'dynamic' else normalizer.normalize(y)
    reg.svr = fit_svr(x, target, settings.svr_gamma or None, settings.svr_c, settings.svr_epsilon,
                      settings.svr_tol, settings.svr_max_sweeps)
    return reg


@dataclass(eq=False)
class OracleRegressor:
    weights: np.ndarray

    def predict(self, features) -> np.ndarray:
        f = np.asarray(features, dtype=np.float64)
        return np.concatenate([f, np.ones((len(f), 1))], axis=1) @ self.weights


def fit_oracle(features, labels) -> OracleRegressor:
    f = np.asarray(features, dtype=np.float64)
    design = np.concatenate([f, np.ones((len(f), 1))], axis=1)
    weights, *_ = np.linalg.lstsq(design, np.asarray(labels, dtype=np.float64), rcond=None)
    return OracleRegressor(weights)


# ---------------------------------------------------------------------------
# Protocol
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class LabeledCorpus:
    """Parts in a fixed order; test split is the last n_test entries."""
    part_ids: list
    graphs: list
    latents: np.ndarray
    labels: dict
    am_features: np.ndarray
    subtracted: np.ndarray
    oracle_features: np.ndarray = None

    def __post_init__(self):
        n = len(self.part_ids)
        if len(self.graphs) != n or len(self.latents) != n:
            raise DataError('Corpus arrays disagree in length')
        for task, values in self.labels.items():
            if len(values) != n:
                raise DataError(f'Labels for {task} have {len(values)} entries, expected {n}')

    def __len__(self):
        return len(self.part_ids)


def fit_tdi(corpus: LabeledCorpus, task: str, train_idx, degraded: bool = False):
    """TDI for every part, fitted on training labels only. None when the task has no TDI."""
    y = corpus.labels[task][train_idx]
    if task == 'am_time':
        model = fit_am_model(corpus.am_features[train_idx], y)
        return model.predict(corpus.am_features), model.to_dict()
    if task == 'sm_time':
        model = fit_sm_model(corpus.subtracted[train_idx], y, degraded=degraded)
        return model.predict(corpus.subtracted), model.to_dict()
    return None, None


@dataclass(frozen=True)
class EvalRow:
    task: str
    strategy: str
    normalization: str
    shots: int
    run: int
    run_seed: int
    r2: float
    fit_seconds: float
    trainable_params: int

    def csv_row(self, record_timings: bool) -> list:
        return [self.task, self.strategy, self.normalization, self.shots, self.run_seed, repr(self.r2),
                f'{self.fit_seconds:.3f}' if record_timings else '', self.trainable_params]


@dataclass(eq=False)
class EvalReport:
    rows: list = field(default_factory=list)
    tdi_models: dict = field(default_factory=dict)

    def sorted_rows(self) -> list:
        return sorted(self.rows, key=lambda r: (r.task, r.strategy, r.normalization, r.shots, r.run))

    def aggregates(self) -> list:
        cells = {}
        for row in self.sorted_rows():
            cells.setdefault((row.task, row.strategy, row.normalization, row.shots), []).append(row)
        out = []
        for (task, strategy, norm, shots), rows in cells.items():
            r2 = np.array([r.r2 for r in rows])
            out.append({'task': task, 'strategy': strategy, 'normalization': norm, 'shots': shots,
                        'runs': len(rows), 'r2_mean': float(r2.mean()), 'r2_std': float(r2.std()),
                        'fit_seconds_mean': float(np.mean([r.fit_seconds for r in rows])),
                        'trainable_params': rows[0].trainable_params})
        return out

    def mean_r2(self, task: str, strategy: str, normalization: str, shots: int) -> float:
        vals = [r.r2 for r in self.rows if (r.task, r.strategy, r.normalization, r.shots)
                == (task, strategy, normalization, shots)]
        if not vals:
            raise UsageError(f'No report cell for {(task, strategy, normalization, shots)}')
        return float(np.mean(vals))

    def to_json(self) -> dict:
        return {'rows': [asdict(r) for r in self.sorted_rows()], 'aggregates': self.aggregates(),
                'tdi_models': self.tdi_models}


def _lora_rank(strategy: str, settings: DownstreamSettings) -> int:
    if strategy == 'lora':
        return settings.lora_rank
    try:
        return int(strategy.split('-', 1)[1])
    except (IndexError, ValueError):
        raise UsageError(f'Bad LoRA strategy name {strategy!r}, expected lora or lora-<rank>')


def check_strategy(strategy: str) -> str:
    if strategy in STRATEGIES or strategy.startswith('lora-'):
        return strategy
    raise UsageError(f'Unknown strategy {strategy!r}, expected one of {STRATEGIES} or lora-<rank>')


@dataclass(eq=False)
class FittedStrategy:
    """One fitted strategy plus the TDI values it was fitted with (every part, or None)."""
    strategy: str
    model: object
    trainable: int
    seconds: float
    tdi: np.ndarray = None
    tdi_model: dict = None

    def predict(self, corpus: LabeledCorpus, idx) -> np.ndarray:
        tdi = None if self.tdi is None else self.tdi[idx]
        if self.strategy == 'oracle':
            return self.model.predict(corpus.oracle_features[idx])
        if self.strategy in ('probe-svr', 'probe-mlp'):
            return self.model.predict(corpus.latents[idx], tdi)
        return self.model.predict([corpus.graphs[i] for i in idx], tdi)


def fit_strategy(corpus: LabeledCorpus, encoder: HierarchicalEncoder, task: str, strategy: str,
                 normalization: str, train_idx, seed: int, settings: DownstreamSettings) -> FittedStrategy:
    y = corpus.labels[task]
    tdi, tdi_model = (None, None)
    if normalization in ('static+tdi', 'dynamic'):
        tdi, tdi_model = fit_tdi(corpus, task, train_idx, settings.sm_tdi_degraded and task == 'sm_time')
        if tdi is None:
            raise UsageError(f'Task {task} has no TDI; {normalization} normalization is unavailable')
    tdi_input = normalization == 'static+tdi'
    norm = Normalizer.fit(label_mode(task, normalization), y[train_idx], None if tdi is None else tdi[train_idx])
    tr_tdi = None if tdi is None else tdi[train_idx]

    t_start = time.time()
    if strategy == 'oracle':
        if corpus.oracle_features is None:
            raise DataError('Corpus carries no oracle features')
        model = fit_oracle(corpus.oracle_features[train_idx], y[train_idx])
        trainable = len(model.weights)
    elif strategy == 'probe-svr':
        model = fit_svr_regressor(corpus.latents[train_idx], y[train_idx], norm, settings, tr_tdi, tdi_input)
        trainable = model.svr.n_support
    elif strategy == 'probe-mlp':
        model = fit_probe_mlp(corpus.latents[train_idx], y[train_idx], norm, seed, settings, tr_tdi, tdi_input)
        trainable = count_parameters(model.head)
    else:
        train_graphs = [corpus.graphs[i] for i in train_idx]
        if strategy.startswith('lora'):
            model = fit_lora(encoder, _lora_rank(strategy, settings), train_graphs, y[train_idx], norm, seed,
                             settings, tr_tdi, tdi_input)
        else:
            base = scratch_encoder(encoder.config, seed) if strategy == 'scratch' else encoder
            model = finetune_all(base, train_graphs, y[train_idx], norm, seed, settings, tr_tdi, tdi_input)
        trainable = count_parameters(model, trainable_only=True)
    seconds = time.time() - t_start
    return FittedStrategy(strategy, model, trainable, seconds, tdi, tdi_model)


def fit_and_score(corpus: LabeledCorpus, encoder: HierarchicalEncoder, task: str, strategy: str,
                  normalization: str, train_idx, test_idx, seed: int, settings: DownstreamSettings):
    """Fit one strategy on train_idx and score it on test_idx. Returns (r2, seconds, trainable, tdi_model)."""
    fitted = fit_strategy(corpus, encoder, task, strategy, normalization, train_idx, seed, settings)
    pred = fitted.predict(corpus, test_idx)
    if not np.all(np.isfinite(pred)):
        raise DataError(f'{strategy} produced non-finite predictions on {task}')
    return r2_score(pred, corpus.labels[task][test_idx]), fitted.seconds, fitted.trainable, fitted.tdi_model


def split_indices(n: int, n_test: int, max_shots: int):
    if n_test >= n:
        raise DataError(f'Corpus of {n} parts cannot hold a {n_test}-part test split')
    pool = n - n_test
    if pool < max_shots:
        raise DataError(f'Corpus has {pool} training parts, fewer than {max_shots} shots')
    return np.arange(pool), np.arange(pool, n)


def shot_subset(pool: np.ndarray, shots: int, run_seed: int) -> np.ndarray:
    """Depends only on (run seed, shots), so every strategy sees the same parts."""
    rng = np.random.default_rng(derive_seed(run_seed, 'shots', shots))
    return np.sort(rng.choice(pool, size=shots, replace=False))


def run_protocol(corpus: LabeledCorpus, encoder: HierarchicalEncoder, tasks, strategies, shot_list,
                 normalizations=('static',), settings: DownstreamSettings = None, workers: int = 1) -> EvalReport:
    settings = settings or DownstreamSettings()
    tasks, strategies, shot_list = list(tasks), [check_strategy(s) for s in strategies], sorted(set(shot_list))
    if not tasks or not strategies or not shot_list:
        raise UsageError('Report needs at least one task, one strategy and one shot count')
    for norm in normalizations:
        if norm not in NORMALIZATIONS:
            raise UsageError(f'Unknown normalization {norm!r}, expected one of {NORMALIZATIONS}')
    for task in tasks:
        if task not in corpus.labels:
            raise UsageError(f'Unknown task {task!r}; corpus has {sorted(corpus.labels)}')
    pool, test_idx = split_indices(len(corpus), settings.n_test, max(shot_list))
    scorable = []
    for task in tasks:
        if np.ptp(corpus.labels[task][test_idx]) == 0.0:
            logger.warning(f'Skipping {task}: constant on the test split, R2 is undefined')
        else:
            scorable.append(task)

    jobs = []
    for task in scorable:
        for norm in normalizations:
            if norm != 'static' and task not in TDI_TASKS:
                logger.warning(f'Skipping {norm} for {task}: no TDI for this task')
                continue
            for strategy in strategies:
                if strategy == 'oracle' and norm != 'static':
                    continue
                for shots in shot_list:
                    for run in range(settings.n_runs):
                        jobs.append((task, strategy, norm, shots, run))
    logger.info(f'Running {len(jobs)} fits with {workers} workers on {len(pool)} pool / {len(test_idx)} test parts')

    def run_job(job):
        task, strategy, norm, shots, run = job
        run_seed = derive_seed(settings.seed, 'run', run)
        train_idx = shot_subset(pool, shots, run_seed)
        r2, seconds, trainable, tdi_model = fit_and_score(corpus, encoder, task, strategy, norm, train_idx,
                                                          test_idx, run_seed, settings)
        return EvalRow(task, strategy, norm, shots, run, run_seed, r2, seconds, trainable), tdi_model

    report = EvalReport()
    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        results = list(executor.map(run_job, jobs))
    for job, (row, tdi_model) in zip(jobs, results):
        report.rows.append(row)
        if tdi_model is not None:
            task, _, norm, shots, run = job
            report.tdi_models[f'{task}/{norm}/{shots}/{run}'] = tdi_model
    return report


# ---------------------------------------------------------------------------
# Embedding
# ---------------------------------------------------------------------------

def encode_corpus(encoder: HierarchicalEncoder, graphs, batch_size: int = 64) -> np.ndarray:
    out = []
    with torch.no_grad():
        for start in range(0, len(graphs), batch_size):
            out.append(encoder(collate(graphs[start:start + batch_size])).numpy())
    return np.concatenate(out) if out else np.zeros((0, encoder.config.latent_width))


def pca_embed(latents, dims: int = 2) -> np.ndarray:
    """Projection on the top principal directions; each direction's largest-magnitude entry is positive."""
    x = np.asarray(latents, dtype=np.float64)
    if x.ndim != 2 or len(x) < dims or x.shape[1] < dims:
        raise UsageError(f'pca_embed needs at least {dims} samples and features, got {x.shape}')
    centered = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    components = vt[:dims]
    signs = np.sign(components[np.arange(dims), np.argmax(np.abs(components), axis=1)])
    components = components * np.where(signs == 0, 1.0, signs)[:, None]
    return centered @ components.T
