"""
Volume-informed pretraining.

The encoder maps a part graph to a latent code once per batch. Decoder 1
regresses the bounding-box extents of the augmented part; decoder 2 reads
the latent, the 5-value augmentation code and a UVW query and predicts the
signed distance of the augmented part there. The latent never sees the
code, so every one of the 48 variants shares it.
"""
import io
import json
import math
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from loguru import logger
from torch import nn

from .augmentation import (IDENTITY, AugCode, all_codes, apply_to_extents, apply_to_uvw, augmented_sdf,
                           encode_code)
from .encoder import EncoderConfig, HierarchicalEncoder, PartGraph, collate, extract_graph
from .errors import DataError, ShapeError, UsageError
from .geometry import BoundingBox, CsgPart, SdfGrid, lattice_uvw, sample_points
from .nncore import (DTYPE, CosineSchedule, Mlp, adam_step, backward, check_finite, count_parameters,
                     lr_at, make_adam, make_generator, mse)
from .utils import atomic_write_bytes, derive_seed

CODE_DIM = 5
CODES = tuple(all_codes())

CHECKPOINT_MAGIC = b'VIRL'
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct('<4sHI')
TENSOR_DTYPES = {'f8': '<f8', 'f4': '<f4'}

LOSS_COLUMNS = ('step', 'lr', 'loss_total', 'loss_bbox', 'loss_sdf', 'test_loss')


@dataclass(frozen=True)
class PretrainConfig:
    batch_size: int = 64
    points_per_part: int = 256
    epochs: int = 100
    # overrides epochs when set
    max_steps: int = 0
    loss_weight: float = 1.0
    lr_start: float = 1e-4
    lr_end: float = 1e-6
    checkpoint_every: int = 500
    test_fraction: float = 0.125
    decoder1_hidden: int = 128
    decoder2_hidden: int = 1024
    checkpoint_dtype: str = 'f8'
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise UsageError(f'batch_size must be >= 1, got {self.batch_size}')
        if self.loss_weight <= 0:
            raise UsageError(f'loss_weight must be > 0, got {self.loss_weight}')
        if self.points_per_part < 1 or self.checkpoint_every < 1:
            raise UsageError('points_per_part and checkpoint_every must be >= 1')
        if not 0.0 <= self.test_fraction < 1.0:
            raise UsageError(f'test_fraction must be in [0, 1), got {self.test_fraction}')
        if self.checkpoint_dtype not in TENSOR_DTYPES:
            raise UsageError(f'checkpoint_dtype must be one of {sorted(TENSOR_DTYPES)}')

    def total_steps(self, n_train: int) -> int:
        if self.max_steps:
            return self.max_steps
        return max(1, self.epochs * math.ceil(n_train / self.batch_size))

    def schedule(self, n_train: int) -> CosineSchedule:
        return CosineSchedule(self.total_steps(n_train), self.lr_start, self.lr_end)


@dataclass(eq=False)
class CorpusPart:
    part: CsgPart
    graph: PartGraph
    grid: SdfGrid

    @property
    def id(self) -> str:
        return self.part.id


def split_corpus(corpus: list, test_fraction: float):
    """Last parts are held out. A single part is both train and test (fresh points)."""
    if not corpus:
        raise DataError('Pretraining corpus is empty')
    n_test = int(math.ceil(test_fraction * len(corpus)))
    if len(corpus) < 2 or n_test == 0:
        return list(corpus), list(corpus)
    n_test = min(n_test, len(corpus) - 1)
    return list(corpus[:-n_test]), list(corpus[-n_test:])


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

class VirlModel(nn.Module):
    def __init__(self, encoder_config: EncoderConfig, decoder1_hidden: int = 128, decoder2_hidden: int = 1024):
        super().__init__()
        self.encoder = HierarchicalEncoder(encoder_config)
        g = make_generator(derive_seed('decoders', encoder_config.seed))
        latent = encoder_config.latent_width
        self.decoder1 = Mlp([latent, decoder1_hidden, 3], g)
        self.decoder2 = Mlp([latent + CODE_DIM + 3, decoder2_hidden, decoder2_hidden, decoder2_hidden, 1], g)

    @property
    def latent_width(self) -> int:
        return self.encoder.config.latent_width

    def decoder1_forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.decoder1(z)

    def decoder2_forward(self, z: torch.Tensor, code: torch.Tensor, uvw: torch.Tensor) -> torch.Tensor:
        """z (N, latent), code (N, 5), uvw (N, 3) -> (N,)"""
        x = torch.cat([z, code, uvw], dim=1)
        if x.shape[1] != self.latent_width + CODE_DIM + 3:
            raise ShapeError(f'decoder2 input width {x.shape[1]} != {self.latent_width + CODE_DIM + 3}')
        return self.decoder2(x)[:, 0]

    def parameter_counts(self) -> dict:
        return {
            'encoder': count_parameters(self.encoder),
            'decoder1': count_parameters(self.decoder1),
            'decoder2': count_parameters(self.decoder2),
        }


# ---------------------------------------------------------------------------
# Batches and losses
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class PretrainBatch:
    part_ids: list
    codes: list
    graphs: object
    code_inputs: torch.Tensor
    uvw: torch.Tensor
    sdf: torch.Tensor
    extents: torch.Tensor

    @property
    def size(self) -> int:
        return len(self.part_ids)


def make_batch(items: list, codes: list, point_seeds: list, points_per_part: int) -> PretrainBatch:
    """Targets live in the augmented frame: query q = code(p), target sdf = augmented_sdf(grid, code, q)."""
    uvw, sdf, extents, code_inputs = [], [], [], []
    for item, code, seed in zip(items, codes, point_seeds):
        samples = sample_points(item.part, item.grid, points_per_part, seed)
        q = apply_to_uvw(code, samples.uvw)
        uvw.append(q)
        sdf.append(augmented_sdf(item.grid, code, q))
        extents.append(apply_to_extents(code, item.grid.bbox.extents))
        code_inputs.append(encode_code(code))
    return PretrainBatch(
        part_ids=[item.id for item in items],
        codes=list(codes),
        graphs=collate([item.graph for item in items]),
        code_inputs=torch.from_numpy(np.array(code_inputs)).to(DTYPE),
        uvw=torch.from_numpy(np.array(uvw)).to(DTYPE),
        sdf=torch.from_numpy(np.array(sdf)).to(DTYPE),
        extents=torch.from_numpy(np.array(extents)).to(DTYPE),
    )


def assemble_batch(train: list, config: PretrainConfig, step: int) -> PretrainBatch:
    """Exactly batch_size parts, drawn from a generator keyed by (seed, step)."""
    rng = np.random.default_rng([config.seed & 0xFFFFFFFF, step])
    n = len(train)
    if n >= config.batch_size:
        picks = rng.choice(n, size=config.batch_size, replace=False)
    else:
        picks = rng.integers(0, n, size=config.batch_size)
    codes = [CODES[int(c)] for c in rng.integers(0, len(CODES), size=config.batch_size)]
    seeds = [derive_seed(config.seed, step, slot) for slot in range(config.batch_size)]
    return make_batch([train[int(i)] for i in picks], codes, seeds, config.points_per_part)


def held_out_batch(test: list, config: PretrainConfig) -> PretrainBatch:
    codes = [CODES[derive_seed('test_code', item.id) % len(CODES)] for item in test]
    seeds = [derive_seed(config.seed, 'test', item.id) for item in test]
    return make_batch(test, codes, seeds, config.points_per_part)


def compute_losses(model: VirlModel, batch: PretrainBatch, loss_weight: float):
    """(total, bbox, sdf) with total = bbox + loss_weight * sdf."""
    z = model.encoder(batch.graphs)
    loss_bbox = mse(model.decoder1_forward(z), batch.extents)
    b, p = batch.sdf.shape
    z_pts = z[:, None, :].expand(b, p, z.shape[1]).reshape(b * p, -1)
    code_pts = batch.code_inputs[:, None, :].expand(b, p, CODE_DIM).reshape(b * p, -1)
    pred = model.decoder2_forward(z_pts, code_pts, batch.uvw.reshape(b * p, 3))
    loss_sdf = mse(pred, batch.sdf.reshape(-1))
    return loss_bbox + loss_weight * loss_sdf, loss_bbox, loss_sdf


def evaluate(model: VirlModel, batch: PretrainBatch, loss_weight: float) -> dict:
    with torch.no_grad():
        total, bbox, sdf = compute_losses(model, batch, loss_weight)
    return {'loss_total': float(total), 'loss_bbox': float(bbox), 'loss_sdf': float(sdf)}


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class Checkpoint:
    step: int
    config: dict
    tensors: dict
    train_loss: float = float('nan')
    test_loss: float = float('nan')
    history: list = field(default_factory=list)
    optimizer_steps: dict = field(default_factory=dict)


def checkpoint_to_bytes(ckpt: Checkpoint, dtype: str = 'f8') -> bytes:
    """
    'VIRL', version u16, header length u32, JSON header, then each tensor's
    little-endian values in header order. Optimizer moments are always f8.
    """
    index, blobs = [], []
    for name, array in ckpt.tensors.items():
        code = 'f8' if name.startswith('adam.') else dtype
        data = np.ascontiguousarray(array, dtype=TENSOR_DTYPES[code])
        index.append({'name': name, 'dtype': code, 'shape': list(array.shape)})
        blobs.append(data.tobytes())
    header = {
        'step': ckpt.step, 'config': ckpt.config, 'train_loss': ckpt.train_loss, 'test_loss': ckpt.test_loss,
        'history': ckpt.history, 'optimizer_steps': ckpt.optimizer_steps, 'tensors': index,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode('utf-8')
    buffer = io.BytesIO()
    buffer.write(_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(header_bytes)))
    buffer.write(header_bytes)
    for blob in blobs:
        buffer.write(blob)
    return buffer.getvalue()


def checkpoint_from_bytes(data: bytes) -> Checkpoint:
    if len(data) < _HEADER.size:
        raise DataError('Checkpoint file is truncated')
    magic, version, length = _HEADER.unpack_from(data, 0)
    if magic != CHECKPOINT_MAGIC or version != CHECKPOINT_VERSION:
        raise DataError(f'Not a VIRL checkpoint (magic {magic!r}, version {version})')
    offset = _HEADER.size
    header = json.loads(data[offset:offset + length].decode('utf-8'))
    offset += length
    tensors = {}
    for entry in header['tensors']:
        dt = np.dtype(TENSOR_DTYPES[entry['dtype']])
        count = int(np.prod(entry['shape'])) if entry['shape'] else 1
        end = offset + count * dt.itemsize
        if end > len(data):
            raise DataError(f'Checkpoint truncated inside tensor {entry["name"]}')
        tensors[entry['name']] = np.frombuffer(data[offset:end], dtype=dt).astype(np.float64).reshape(entry['shape'])
        offset = end
    return Checkpoint(header['step'], header['config'], tensors, header['train_loss'], header['test_loss'],
                      header['history'], {int(k): v for k, v in header['optimizer_steps'].items()})


def save_checkpoint(path: str, ckpt: Checkpoint, dtype: str = 'f8') -> None:
    atomic_write_bytes(path, checkpoint_to_bytes(ckpt, dtype))


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, 'rb') as f:
        return checkpoint_from_bytes(f.read())


def _configs_from(ckpt: Checkpoint):
    enc = EncoderConfig(**ckpt.config['encoder'])
    pre = PretrainConfig(**ckpt.config['pretrain'])
    return enc, pre


def model_from_checkpoint(ckpt: Checkpoint) -> VirlModel:
    enc, pre = _configs_from(ckpt)
    model = VirlModel(enc, pre.decoder1_hidden, pre.decoder2_hidden)
    state = {name: torch.from_numpy(np.array(value)).to(DTYPE)
             for name, value in ckpt.tensors.items() if not name.startswith('adam.')}
    model.load_state_dict(state, strict=True)
    return model


def _optimizer_tensors(optimizer) -> tuple:
    tensors, steps = {}, {}
    state = optimizer.state_dict()['state']
    for idx, slot in state.items():
        tensors[f'adam.{idx}.exp_avg'] = slot['exp_avg'].detach().numpy().copy()
        tensors[f'adam.{idx}.exp_avg_sq'] = slot['exp_avg_sq'].detach().numpy().copy()
        steps[int(idx)] = int(float(slot['step']))
    return tensors, steps


def _restore_optimizer(optimizer, ckpt: Checkpoint) -> None:
    if not ckpt.optimizer_steps:
        return
    state_dict = optimizer.state_dict()
    state_dict['state'] = {
        idx: {
            'step': torch.tensor(float(step)),
            'exp_avg': torch.from_numpy(np.array(ckpt.tensors[f'adam.{idx}.exp_avg'])).to(DTYPE),
            'exp_avg_sq': torch.from_numpy(np.array(ckpt.tensors[f'adam.{idx}.exp_avg_sq'])).to(DTYPE),
        }
        for idx, step in ckpt.optimizer_steps.items()
    }
    optimizer.load_state_dict(state_dict)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

class Trainer:
    def __init__(self, corpus: list, config: PretrainConfig, encoder_config: EncoderConfig,
                 resume: Checkpoint = None, workers: int = 1):
        self.config = config
        self.encoder_config = encoder_config
        self.train_parts, self.test_parts = split_corpus(corpus, config.test_fraction)
        self.schedule = config.schedule(len(self.train_parts))
        self.workers = max(1, int(workers))
        if resume is not None:
            self.model = model_from_checkpoint(resume)
            self.step = resume.step
            self.history = list(resume.history)
        else:
            self.model = VirlModel(encoder_config, config.decoder1_hidden, config.decoder2_hidden)
            self.step = 0
            self.history = []
        self.params = list(self.model.parameters())
        self.optimizer = make_adam(self.params, config.lr_start)
        if resume is not None:
            _restore_optimizer(self.optimizer, resume)
        self._test_batch = held_out_batch(self.test_parts, config)
        counts = self.model.parameter_counts()
        logger.info(f'Model parameters: encoder {counts["encoder"]:,}, decoder1 {counts["decoder1"]:,}, '
                    f'decoder2 {counts["decoder2"]:,}; {len(self.train_parts)} train / '
                    f'{len(self.test_parts)} test parts, {self.schedule.total_steps} steps')

    def config_echo(self) -> dict:
        return {'encoder': asdict(self.encoder_config), 'pretrain': asdict(self.config)}

    def train_step(self, batch: PretrainBatch) -> dict:
        lr = lr_at(self.schedule, self.step)
        total, bbox, sdf = compute_losses(self.model, batch, self.config.loss_weight)
        value = check_finite(total, f'pretraining step {self.step}')
        grads = backward(total, self.params)
        adam_step(self.params, grads, self.optimizer, lr)
        self.step += 1
        return {'step': self.step, 'lr': lr, 'loss_total': value,
                'loss_bbox': float(bbox.detach()), 'loss_sdf': float(sdf.detach())}

    def test_loss(self) -> float:
        return evaluate(self.model, self._test_batch, self.config.loss_weight)['loss_total']

    def checkpoint(self, train_loss: float, test_loss: float) -> Checkpoint:
        tensors = {name: t.detach().numpy().copy() for name, t in self.model.state_dict().items()}
        opt_tensors, opt_steps = _optimizer_tensors(self.optimizer)
        tensors.update(opt_tensors)
        return Checkpoint(self.step, self.config_echo(), tensors, train_loss, test_loss,
                          list(self.history), opt_steps)

    def run(self, until: int = None):
        """Yield a Checkpoint every checkpoint_every steps and at the end."""
        total = self.schedule.total_steps if until is None else min(until, self.schedule.total_steps)
        if self.step >= total:
            return
        t_start = time.time()
        with ThreadPoolExecutor(max_workers=self.workers) as executor:
            pending = {}

            def prefetch(upto):
                for s in range(self.step, min(upto, total)):
                    if s not in pending:
                        pending[s] = executor.submit(assemble_batch, self.train_parts, self.config, s)

            while self.step < total:
                prefetch(self.step + self.workers + 1)
                batch = pending.pop(self.step).result()
                row = self.train_step(batch)
                row['test_loss'] = ''
                at_checkpoint = self.step % self.config.checkpoint_every == 0 or self.step == total
                if at_checkpoint:
                    row['test_loss'] = self.test_loss()
                self.history.append(row)
                if at_checkpoint:
                    logger.info(f'Step {self.step}/{total}: loss {row["loss_total"]:.4g} '
                                f'(bbox {row["loss_bbox"]:.4g}, sdf {row["loss_sdf"]:.4g}), '
                                f'test {row["test_loss"]:.4g}, lr {row["lr"]:.3g}')
                    yield self.checkpoint(row['loss_total'], row['test_loss'])
            for future in pending.values():
                future.cancel()
        t_end = time.time()
        logger.info(f'Pretraining reached step {self.step} in {t_end - t_start:.2f} seconds')


def train(corpus: list, config: PretrainConfig, encoder_config: EncoderConfig,
          resume: Checkpoint = None, workers: int = 1):
    """Checkpoint stream of one pretraining run."""
    yield from Trainer(corpus, config, encoder_config, resume, workers).run()


# ---------------------------------------------------------------------------
# Reconstruction
# ---------------------------------------------------------------------------

def reconstruct_grid(model: VirlModel, part_or_graph, n: int = 40, code: AugCode = IDENTITY) -> SdfGrid:
    """Decoder 2 on an n^3 lattice, placed in a box of the decoder 1 extents at the origin."""
    if n < 2:
        raise UsageError(f'Grid size must be >= 2, got {n}')
    graph = part_or_graph if isinstance(part_or_graph, PartGraph) else extract_graph(part_or_graph)
    uvw = torch.from_numpy(lattice_uvw(n)).to(DTYPE)
    with torch.no_grad():
        z = model.encoder(collate([graph]))
        extents = model.decoder1_forward(z)[0].numpy()
        code_in = torch.from_numpy(encode_code(code)).to(DTYPE)[None, :].expand(len(uvw), CODE_DIM)
        values = model.decoder2_forward(z.expand(len(uvw), z.shape[1]), code_in, uvw).numpy()
    extents = np.maximum(np.abs(extents), 1e-6)
    return SdfGrid(n, BoundingBox((0.0, 0.0, 0.0), extents), values.copy())


def voxel_iou(predicted: SdfGrid, truth: SdfGrid) -> float:
    """IoU of the negative regions of two grids sampled on the same lattice."""
    if predicted.n != truth.n:
        raise ShapeError(f'Grid sizes differ: {predicted.n} vs {truth.n}')
    a, b = predicted.values < 0.0, truth.values < 0.0
    union = np.count_nonzero(a | b)
    return float(np.count_nonzero(a & b)) / union if union else 1.0
