"""Tests for virl/nncore.py: gradients, graph convolution, losses, Adam and the schedule."""
import math

import numpy.testing as npt
import pytest
import torch

from virl.errors import NonFiniteLossError, ShapeError
from virl.nncore import (DTYPE, CosineSchedule, GraphConv, Mlp, adam_step, as_tensor, backward, check_finite,
                         count_parameters, graph_conv, huber, linear, lr_at, make_adam, make_generator,
                         mean_aggregate, mse, neighbor_index, segment_max, segment_mean)

NEIGHBORS = [[1, 2], [0], [0], []]


def _weights(d_in=3, d_out=2, seed=0):
    g = make_generator(seed)
    make = lambda *shape: torch.randn(*shape, dtype=DTYPE, generator=g, requires_grad=True)  # noqa: E731
    return make(d_out, d_in), make(d_out, d_in), make(d_out)


class TestBackward:
    def test_matches_finite_differences(self):
        x = torch.randn(4, 3, dtype=DTYPE, generator=make_generator(1))
        ws, wn, b = _weights()
        nbrs = neighbor_index(NEIGHBORS)
        assert torch.autograd.gradcheck(lambda a, c, d: graph_conv(x, nbrs, a, c, d, 'tanh'), (ws, wn, b))

    def test_backward_agrees_with_autograd(self):
        p = torch.randn(5, dtype=DTYPE, requires_grad=True, generator=make_generator(2))
        loss = (p ** 3).sum()
        (grad,) = backward(loss, [p])
        npt.assert_allclose(grad.numpy(), 3.0 * p.detach().numpy() ** 2)

    def test_constant_function_has_zero_gradient(self):
        p = torch.ones(3, dtype=DTYPE, requires_grad=True)
        q = torch.ones(2, dtype=DTYPE, requires_grad=True)
        grads = backward((p * 0.0).sum() + 1.0, [p, q])
        assert all(float(g.abs().sum()) == 0.0 for g in grads)

    def test_non_scalar_loss(self):
        p = torch.ones(3, dtype=DTYPE, requires_grad=True)
        with pytest.raises(ShapeError):
            backward(p * 2.0, [p])

    def test_check_finite(self):
        assert check_finite(torch.tensor(2.5), 'test') == 2.5
        with pytest.raises(NonFiniteLossError):
            check_finite(torch.tensor(math.nan), 'test')
        with pytest.raises(NonFiniteLossError):
            check_finite(torch.tensor(math.inf), 'test')


class TestAggregation:
    def test_segment_mean_with_empty_segment(self):
        values = as_tensor([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
        ids = torch.tensor([0, 0, 2])
        npt.assert_allclose(segment_mean(values, ids, 3).numpy(), [[2.0, 3.0], [0.0, 0.0], [5.0, 6.0]])

    def test_segment_max(self):
        values = as_tensor([[1.0], [-3.0], [-5.0]])
        ids = torch.tensor([0, 0, 2])
        npt.assert_allclose(segment_max(values, ids, 3).numpy(), [[1.0], [0.0], [-5.0]])

    def test_isolated_node_aggregates_zero(self):
        x = torch.randn(4, 3, dtype=DTYPE, generator=make_generator(3))
        ws, wn, b = _weights()
        out = graph_conv(x, NEIGHBORS, ws, wn, b, 'relu')
        expected = torch.relu(x[3] @ ws.T + b)
        npt.assert_allclose(out[3].detach().numpy(), expected.detach().numpy())

    def test_mean_over_neighbors(self):
        x = as_tensor([[0.0], [2.0], [4.0], [8.0]])
        npt.assert_allclose(mean_aggregate(x, neighbor_index(NEIGHBORS)).numpy(), [[3.0], [0.0], [0.0], [0.0]])

    def test_module_matches_function(self):
        g = make_generator(4)
        conv = GraphConv(3, 2, g, 'silu')
        x = torch.randn(4, 3, dtype=DTYPE, generator=g)
        nbrs = neighbor_index(NEIGHBORS)
        expected = graph_conv(x, nbrs, conv.self_linear.weight, conv.nbr_linear.weight, conv.self_linear.bias,
                              'silu')
        npt.assert_allclose(conv(x, nbrs).detach().numpy(), expected.detach().numpy(), atol=1e-12)

    def test_shape_mismatch(self):
        x = torch.zeros(4, 5, dtype=DTYPE)
        with pytest.raises(ShapeError):
            graph_conv(x, NEIGHBORS, *_weights())

    def test_neighbor_out_of_range(self):
        x = torch.zeros(4, 3, dtype=DTYPE)
        with pytest.raises(ShapeError):
            graph_conv(x, [[7], [], [], []], *_weights())

    def test_unknown_activation(self):
        x = torch.zeros(4, 3, dtype=DTYPE)
        with pytest.raises(ShapeError):
            graph_conv(x, NEIGHBORS, *_weights(), act='gelu')


class TestLayers:
    def test_init_is_seeded(self):
        a = linear(4, 3, make_generator(9))
        b = linear(4, 3, make_generator(9))
        c = linear(4, 3, make_generator(10))
        assert torch.equal(a.weight, b.weight)
        assert not torch.equal(a.weight, c.weight)
        assert a.weight.dtype == DTYPE

    def test_mlp_parameter_count(self):
        mlp = Mlp([4, 8, 1], make_generator(0))
        assert count_parameters(mlp) == 4 * 8 + 8 + 8 + 1
        assert mlp(torch.zeros(5, 4, dtype=DTYPE)).shape == (5, 1)


class TestLosses:
    def test_huber(self):
        pred = as_tensor([0.0, 3.0, -0.5])
        target = as_tensor([0.0, 0.0, 0.0])
        assert float(huber(pred, target, 1.0)) == pytest.approx((0.0 + 2.5 + 0.125) / 3)

    def test_mse(self):
        assert float(mse(as_tensor([1.0, 3.0]), as_tensor([0.0, 0.0]))) == pytest.approx(5.0)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            mse(as_tensor([1.0, 2.0]), as_tensor([1.0]))


class TestOptimizer:
    def test_adam_first_step_has_lr_magnitude(self):
        p = torch.tensor([1.0, -2.0], dtype=DTYPE, requires_grad=True)
        opt = make_adam([p], 0.1)
        adam_step([p], backward((p ** 2).sum(), [p]), opt, 0.1)
        npt.assert_allclose(p.detach().numpy(), [0.9, -1.9], atol=1e-6)

    def test_adam_descends(self):
        p = torch.tensor([3.0, -1.0], dtype=DTYPE, requires_grad=True)
        opt = make_adam([p], 0.05)
        start = float((p ** 2).sum())
        for _ in range(50):
            adam_step([p], backward((p ** 2).sum(), [p]), opt, 0.05)
        assert float((p ** 2).sum()) < start


class TestSchedule:
    def test_endpoints_exact(self):
        s = CosineSchedule(100, 1e-4, 1e-6)
        assert lr_at(s, 0) == 1e-4
        assert lr_at(s, 100) == 1e-6
        assert lr_at(s, 500) == 1e-6
        assert lr_at(s, -1) == 1e-4

    def test_midpoint_and_monotone(self):
        s = CosineSchedule(10, 1.0, 0.0)
        assert lr_at(s, 5) == pytest.approx(0.5)
        values = [lr_at(s, t) for t in range(11)]
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_needs_steps(self):
        with pytest.raises(ShapeError):
            CosineSchedule(0)
