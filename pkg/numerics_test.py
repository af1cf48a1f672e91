"""
Tests for the channel-last layer ops, Adam and the finite-difference checker.

Usage:
    pytest numerics_test.py -v
"""

import numpy as np
import pytest
import torch
from torch import nn

from vivarium_ppap import numerics
from vivarium_ppap.errors import NumericalError, ShapeError, UsageError


def _reference_conv(x, kernel, bias):
    """Direct same-padded convolution (cross-correlation) on one (H, W, Cin) image."""
    kh, kw, _, c_out = kernel.shape
    h, w, _ = x.shape
    padded = np.pad(x, ((kh // 2, kh // 2), (kw // 2, kw // 2), (0, 0)))
    out = np.zeros((h, w, c_out))
    for i in range(h):
        for j in range(w):
            patch = padded[i:i + kh, j:j + kw, :]
            out[i, j] = np.einsum('abc,abcd->d', patch, kernel) + bias
    return out


class TestConv2d:

    def test_matches_direct_computation(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(5, 6, 2))
        kernel = rng.normal(size=(3, 3, 2, 4))
        bias = rng.normal(size=4)
        out = numerics.conv2d(torch.tensor(x), torch.tensor(kernel), torch.tensor(bias))
        assert out.shape == (5, 6, 4)
        assert np.allclose(out.numpy(), _reference_conv(x, kernel, bias), atol=1e-10)

    def test_identity_kernel(self):
        x = torch.randn(2, 4, 4, 1, dtype=torch.float64)
        kernel = torch.zeros(3, 3, 1, 1, dtype=torch.float64)
        kernel[1, 1, 0, 0] = 1.0
        assert torch.equal(numerics.conv2d(x, kernel), x)

    def test_valid_padding_of_ones(self):
        out = numerics.conv2d(torch.ones(4, 4, 1), torch.ones(3, 3, 1, 1), padding='valid')
        assert out.shape == (2, 2, 1)
        assert torch.all(out == 9.0)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            numerics.conv2d(torch.zeros(4, 4, 3), torch.zeros(3, 3, 2, 1))

    def test_unknown_padding(self):
        with pytest.raises(UsageError):
            numerics.conv2d(torch.zeros(4, 4, 1), torch.zeros(3, 3, 1, 1), padding='reflect')


class TestBatchNorm:

    def test_train_mode_normalizes_and_updates_running_mean(self):
        x = torch.randn(8, 4, 4, 3, dtype=torch.float64) * 3.0 + 2.0
        running_mean = torch.zeros(3, dtype=torch.float64)
        running_var = torch.ones(3, dtype=torch.float64)
        out = numerics.batch_norm(
            x, torch.ones(3, dtype=torch.float64), torch.zeros(3, dtype=torch.float64),
            running_mean, running_var, mode='train', momentum=0.1,
        )
        flat = out.reshape(-1, 3)
        assert torch.allclose(flat.mean(dim=0), torch.zeros(3, dtype=torch.float64), atol=1e-9)
        assert torch.allclose(flat.var(dim=0, unbiased=False), torch.ones(3, dtype=torch.float64), atol=1e-3)
        assert torch.allclose(running_mean, 0.1 * x.reshape(-1, 3).mean(dim=0))

    def test_eval_mode_uses_running_statistics(self):
        x = torch.ones(2, 2, 2, 1, dtype=torch.float64) * 5.0
        out = numerics.batch_norm(
            x, torch.ones(1, dtype=torch.float64), torch.zeros(1, dtype=torch.float64),
            torch.tensor([1.0], dtype=torch.float64), torch.tensor([4.0], dtype=torch.float64), mode='eval',
        )
        assert torch.allclose(out, torch.full_like(x, 4.0 / np.sqrt(4.0 + numerics.BN_EPSILON)))

    def test_eval_without_statistics(self):
        with pytest.raises(NumericalError):
            numerics.batch_norm(torch.zeros(2, 2, 2, 1), torch.ones(1), torch.zeros(1), None, None, mode='eval')


class TestPoolingDenseDropout:

    def test_avg_pool_floors_odd_sizes(self):
        x = torch.arange(5 * 7, dtype=torch.float64).reshape(5, 7, 1)
        out = numerics.avg_pool2d(x, 2)
        assert out.shape == (2, 3, 1)
        assert out[0, 0, 0].item() == pytest.approx((0 + 1 + 7 + 8) / 4)

    def test_avg_pool_needs_two_by_two(self):
        with pytest.raises(ShapeError):
            numerics.avg_pool2d(torch.zeros(1, 4, 1), 2)

    def test_dense_uses_din_dout_weights(self):
        x = torch.tensor([[1.0, 2.0]])
        weights = torch.tensor([[1.0, 0.0, 2.0], [0.0, 1.0, 3.0]])
        out = numerics.dense(x, weights, torch.tensor([0.5, 0.5, 0.5]))
        assert out.tolist() == [[1.5, 2.5, 8.5]]

    def test_dense_shape_mismatch(self):
        with pytest.raises(ShapeError):
            numerics.dense(torch.zeros(3), torch.zeros(2, 2))

    def test_dropout_is_identity_in_eval(self):
        x = torch.randn(10, 10)
        assert torch.equal(numerics.dropout(x, 0.5, 'eval'), x)

    def test_dropout_scales_kept_units(self):
        x = torch.ones(1000)
        out = numerics.dropout(x, 0.5, 'train', torch.Generator().manual_seed(0))
        kept = out[out != 0]
        assert torch.all(kept == 2.0)
        assert 400 < kept.numel() < 600

    def test_dropout_preserves_the_mean(self):
        out = numerics.dropout(torch.ones(100_000), 0.5, 'train', torch.Generator().manual_seed(0))
        assert out.mean().item() == pytest.approx(1.0, rel=0.05)

    def test_swish(self):
        assert numerics.swish(torch.tensor([0.0])).item() == 0.0
        assert numerics.swish(torch.tensor([2.0])).item() == pytest.approx(2.0 / (1.0 + np.exp(-2.0)))


class _Quadratic(nn.Module):
    def __init__(self):
        super().__init__()
        self.a = nn.Parameter(torch.tensor([1.0, -2.0, 0.5], dtype=torch.float64))
        self.unused = nn.Parameter(torch.zeros(2, dtype=torch.float64))


class TestAutodiffAndAdam:

    def test_backward_matches_analytic_gradient(self):
        module = _Quadratic()
        params = numerics.ParameterSet(module)
        grads = numerics.backward((module.a ** 2).sum(), params)
        assert torch.allclose(grads['a'], 2.0 * module.a.detach())
        assert torch.equal(grads['unused'], torch.zeros(2, dtype=torch.float64))

    def test_backward_needs_scalar(self):
        module = _Quadratic()
        with pytest.raises(ShapeError):
            numerics.backward(module.a * 2.0, numerics.ParameterSet(module))

    def test_first_adam_step_moves_by_learning_rate(self):
        module = _Quadratic()
        params = numerics.ParameterSet(module)
        before = module.a.detach().clone()
        state = numerics.AdamState(params, lr=1e-3)
        numerics.adam_step(state, numerics.backward((module.a ** 2).sum(), params))
        assert state.step_count == 1
        delta = module.a.detach() - before
        assert torch.allclose(delta, -1e-3 * torch.sign(before), atol=1e-8)

    def test_zero_gradients_leave_parameters_unchanged(self):
        module = _Quadratic()
        params = numerics.ParameterSet(module)
        before = {name: p.detach().clone() for name, p in params.items()}
        state = numerics.AdamState(params, lr=1e-3)
        numerics.adam_step(state, {name: torch.zeros_like(p) for name, p in params.items()})
        for name, p in params.items():
            assert torch.equal(p.detach(), before[name])

    def test_zero_learning_rate_leaves_parameters_unchanged(self):
        module = _Quadratic()
        params = numerics.ParameterSet(module)
        before = module.a.detach().clone()
        state = numerics.AdamState(params, lr=0.0)
        for _ in range(3):
            numerics.adam_step(state, numerics.backward((module.a ** 2).sum(), params))
        assert state.step_count == 3
        assert torch.equal(module.a.detach(), before)

    def test_parameter_count(self):
        assert numerics.ParameterSet(_Quadratic()).count() == 5

    def test_init_uniform_fan_in_bounds(self):
        tensor = torch.zeros(1000)
        numerics.init_uniform_fan_in(tensor, 16, torch.Generator().manual_seed(0))
        assert tensor.abs().max().item() <= 0.25
        assert tensor.std().item() > 0.1


class TestFiniteDifferenceCheck:

    def test_correct_gradients_pass(self):
        module = _Quadratic()
        params = numerics.ParameterSet(module)
        report = numerics.finite_difference_check(lambda: (module.a ** 3).sum(), params)
        assert [g.name for g in report] == ['a', 'unused']
        assert all(g.passed for g in report)

    def test_corrupted_gradients_fail(self):
        module = _Quadratic()
        params = numerics.ParameterSet(module)
        report = numerics.finite_difference_check(lambda: (module.a ** 3).sum(), params, corrupt_backward=True)
        assert not report[0].passed
        assert report[0].max_relative_error == pytest.approx(1.0 / 3.0, rel=1e-3)
