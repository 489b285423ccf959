"""
Training primitives on top of torch: float64 tensors, reverse-mode gradients,
graph convolution, losses, Adam and the cosine-annealed learning rate.

All parameters are initialized from an explicit torch.Generator so that
concurrent runs never touch the global RNG.
"""
import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import NonFiniteLossError, ShapeError

DTYPE = torch.float64
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
ACTIVATIONS = ('relu', 'silu', 'tanh')


def as_tensor(data) -> torch.Tensor:
    return torch.as_tensor(data, dtype=DTYPE)


def make_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed) & ((1 << 63) - 1))
    return g


def activation(name: str):
    if name == 'relu':
        return F.relu
    if name == 'silu':
        return F.silu
    if name == 'tanh':
        return torch.tanh
    raise ShapeError(f'Unknown activation {name!r}, expected one of {ACTIVATIONS}')


def backward(loss: torch.Tensor, params) -> list:
    """Exact gradients of a scalar loss; unused parameters get zeros."""
    if loss.numel() != 1:
        raise ShapeError(f'backward needs a scalar loss, got shape {tuple(loss.shape)}')
    params = list(params)
    grads = torch.autograd.grad(loss.reshape(()), params, allow_unused=True)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]


def check_finite(loss: torch.Tensor, where: str) -> float:
    value = float(loss.detach())
    if not math.isfinite(value):
        raise NonFiniteLossError(f'Non-finite loss {value} during {where}')
    return value


# ---------------------------------------------------------------------------
# Aggregation and graph convolution
# ---------------------------------------------------------------------------

def neighbor_index(neighbor_lists) -> tuple:
    """(src, dst) index tensors from per-node neighbor lists: node dst receives from src."""
    src, dst = [], []
    for node, nbrs in enumerate(neighbor_lists):
        for j in nbrs:
            src.append(int(j))
            dst.append(node)
    return torch.tensor(src, dtype=torch.long), torch.tensor(dst, dtype=torch.long)


def segment_mean(values: torch.Tensor, segment_ids: torch.Tensor, num_segments: int) -> torch.Tensor:
    """Mean of rows per segment; empty segments are zero."""
    out = values.new_zeros((num_segments, values.shape[1]))
    if segment_ids.numel() == 0:
        return out
    out = out.index_add(0, segment_ids, values)
    counts = values.new_zeros(num_segments).index_add(0, segment_ids, values.new_ones(len(segment_ids)))
    return out / counts.clamp(min=1.0)[:, None]


def segment_max(values: torch.Tensor, segment_ids: torch.Tensor, num_segments: int) -> torch.Tensor:
    out = values.new_full((num_segments, values.shape[1]), -math.inf)
    index = segment_ids[:, None].expand_as(values)
    out = out.scatter_reduce(0, index, values, reduce='amax', include_self=True)
    return torch.where(torch.isinf(out), torch.zeros_like(out), out)


def mean_aggregate(node_feats: torch.Tensor, neighbors) -> torch.Tensor:
    src, dst = neighbors
    return segment_mean(node_feats[src], dst, node_feats.shape[0])


def _check_neighbors(neighbors, n: int):
    if isinstance(neighbors, (list, tuple)) and not (
            len(neighbors) == 2 and all(isinstance(t, torch.Tensor) for t in neighbors)):
        neighbors = neighbor_index(neighbors)
    src, dst = neighbors
    if src.numel() and (int(src.min()) < 0 or int(src.max()) >= n or int(dst.min()) < 0 or int(dst.max()) >= n):
        raise ShapeError(f'Neighbor index out of range for {n} nodes')
    return src, dst


def graph_conv(node_feats, neighbors, W_self, W_nbr, bias, act: str = 'relu'):
    """h'_i = act(W_self h_i + W_nbr mean_{j in N(i)} h_j + bias); isolated nodes aggregate zero."""
    if node_feats.ndim != 2:
        raise ShapeError(f'node features must be 2-d, got {tuple(node_feats.shape)}')
    d_out, d_in = W_self.shape
    if W_nbr.shape != (d_out, d_in) or bias.shape != (d_out,) or node_feats.shape[1] != d_in:
        raise ShapeError(
            f'graph_conv shapes disagree: feats {tuple(node_feats.shape)}, W_self {tuple(W_self.shape)}, '
            f'W_nbr {tuple(W_nbr.shape)}, bias {tuple(bias.shape)}')
    neighbors = _check_neighbors(neighbors, node_feats.shape[0])
    agg = mean_aggregate(node_feats, neighbors)
    return activation(act)(node_feats @ W_self.T + agg @ W_nbr.T + bias)


def init_linear_(layer: nn.Linear, generator: torch.Generator) -> nn.Linear:
    """torch's default Linear init, drawn from the given generator."""
    bound = 1.0 / math.sqrt(layer.in_features)
    with torch.no_grad():
        layer.weight.uniform_(-bound, bound, generator=generator)
        if layer.bias is not None:
            layer.bias.uniform_(-bound, bound, generator=generator)
    return layer


def linear(d_in: int, d_out: int, generator: torch.Generator, bias: bool = True) -> nn.Linear:
    return init_linear_(nn.Linear(d_in, d_out, bias=bias, dtype=DTYPE), generator)


class GraphConv(nn.Module):
    """Module form of graph_conv; the two maps are separate Linears so adapters can wrap them."""

    def __init__(self, d_in: int, d_out: int, generator: torch.Generator, act: str = 'relu'):
        super().__init__()
        self.self_linear = linear(d_in, d_out, generator)
        self.nbr_linear = linear(d_in, d_out, generator, bias=False)
        self.act = act

    def forward(self, node_feats, neighbors):
        agg = mean_aggregate(node_feats, neighbors)
        return activation(self.act)(self.self_linear(node_feats) + self.nbr_linear(agg))


class Mlp(nn.Module):
    """Affine layers with an activation between them (none after the last)."""

    def __init__(self, widths, generator: torch.Generator, act: str = 'relu'):
        super().__init__()
        self.layers = nn.ModuleList(linear(a, b, generator) for a, b in zip(widths[:-1], widths[1:]))
        self.act = act

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = activation(self.act)(x)
        return x


def count_parameters(module: nn.Module, trainable_only: bool = False) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad or not trainable_only)


# ---------------------------------------------------------------------------
# Losses, optimizer, schedule
# ---------------------------------------------------------------------------

def _check_pair(pred, target):
    if pred.shape != target.shape:
        raise ShapeError(f'prediction {tuple(pred.shape)} and target {tuple(target.shape)} differ')


def huber(pred, target, delta: float = 1.0):
    """0.5 r^2 for |r| <= delta, delta (|r| - 0.5 delta) beyond, mean-reduced."""
    _check_pair(pred, target)
    return F.huber_loss(pred, target, reduction='mean', delta=delta)


def mse(pred, target):
    _check_pair(pred, target)
    return F.mse_loss(pred, target, reduction='mean')


AdamState = torch.optim.Adam


def make_adam(params, lr: float) -> AdamState:
    return torch.optim.Adam(params, lr=lr, betas=ADAM_BETAS, eps=ADAM_EPS)


def adam_step(params, grads, state: AdamState, lr: float) -> None:
    """One in-place Adam update of params with the given gradients."""
    for p, g in zip(params, grads):
        p.grad = g.detach()
    for group in state.param_groups:
        group['lr'] = lr
    state.step()


@dataclass(frozen=True)
class CosineSchedule:
    total_steps: int
    lr_start: float = 1e-4
    lr_end: float = 1e-6

    def __post_init__(self):
        if self.total_steps < 1:
            raise ShapeError(f'Cosine schedule needs total_steps >= 1, got {self.total_steps}')


def lr_at(schedule: CosineSchedule, t: int) -> float:
    if t <= 0:
        return schedule.lr_start
    if t >= schedule.total_steps:
        return schedule.lr_end
    cos = math.cos(math.pi * t / schedule.total_steps)
    return schedule.lr_end + 0.5 * (schedule.lr_start - schedule.lr_end) * (1.0 + cos)
