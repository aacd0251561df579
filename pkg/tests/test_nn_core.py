import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from dhnet.errors import ConfigError, NumericError
from dhnet.nn_core import (
    LayerNorm2d, checked, conv2d, depthwise, global_avg_pool, grad_check, layer_norm, make_conv,
    pixel_shuffle, pixel_unshuffle,
)

from conftest import conv_np

D = torch.float64


def delta_kernel(conv):
    with torch.no_grad():
        conv.weight.zero_()
        conv.weight[:, :, 1, 1] = 1.0
        conv.bias.zero_()
    return conv


class TestConv2d:
    def test_identity_kernel(self):
        conv = delta_kernel(make_conv(1, 1, 3))
        x = torch.ones(1, 1, 3, 3)
        assert torch.equal(conv2d(x, conv), x)

    def test_depthwise_delta(self):
        conv = delta_kernel(depthwise(5, 3))
        x = torch.randn(2, 5, 7, 6)
        assert torch.equal(conv2d(x, conv), x)

    def test_matches_naive_summation(self, rng):
        conv = make_conv(3, 4, 3).to(D)
        x = rng.standard_normal((2, 3, 8, 8))
        got = conv2d(torch.from_numpy(x), conv).detach().numpy()
        np.testing.assert_allclose(got, conv_np(x, conv), atol=1e-6)

    @pytest.mark.parametrize("stride,groups", [(2, 1), (1, 2), (2, 4)])
    def test_strided_grouped_matches_naive(self, rng, stride, groups):
        conv = make_conv(4, 8, 3, stride=stride, groups=groups).to(D)
        x = rng.standard_normal((1, 4, 6, 6))
        got = conv2d(torch.from_numpy(x), conv).detach().numpy()
        np.testing.assert_allclose(got, conv_np(x, conv), atol=1e-10)

    def test_linear_in_input(self):
        conv = make_conv(3, 4, 3, bias=False).to(D)
        x, y = torch.randn(2, 3, 6, 6, dtype=D), torch.randn(2, 3, 6, 6, dtype=D)
        a, b = 1.7, -0.4
        lhs = conv2d(a * x + b * y, conv)
        rhs = a * conv2d(x, conv) + b * conv2d(y, conv)
        assert torch.allclose(lhs, rhs, atol=1e-6)

    def test_channel_mismatch(self):
        with pytest.raises(ConfigError):
            conv2d(torch.randn(1, 2, 4, 4), make_conv(3, 3, 1))

    def test_bad_groups(self):
        with pytest.raises(ConfigError):
            make_conv(3, 4, 3, groups=2)

    def test_checked_mode_rejects_nan(self):
        x = torch.randn(1, 1, 3, 3)
        x[0, 0, 1, 1] = float("nan")
        conv = make_conv(1, 1, 3)
        conv2d(x, conv)
        with checked(), pytest.raises(NumericError):
            conv2d(x, conv)


class TestLayerNorm:
    def test_constant_input_collapses(self):
        x = torch.full((1, 4, 3, 3), 2.5)
        assert torch.equal(layer_norm(x, torch.ones(4), torch.zeros(4)), torch.zeros_like(x))

    def test_zero_gamma(self):
        b = torch.tensor([0.1, -2.0, 3.0])
        out = layer_norm(torch.randn(2, 3, 4, 4), torch.zeros(3), b)
        assert torch.equal(out, b.view(1, 3, 1, 1).expand_as(out))

    def test_statistics(self):
        x = torch.randn(3, 16, 5, 5, dtype=D) * 3 + 1
        y = layer_norm(x, torch.ones(16, dtype=D), torch.zeros(16, dtype=D))
        assert y.mean(1).abs().max() < 1e-5
        assert (y.var(1, unbiased=False) - 1).abs().max() < 1e-4

    def test_shift_scale_invariance(self):
        x = torch.randn(2, 6, 4, 4, dtype=D)
        shift = torch.randn(2, 1, 4, 4, dtype=D)
        scale = torch.rand(2, 1, 4, 4, dtype=D) + 0.5
        g, b = torch.ones(6, dtype=D), torch.zeros(6, dtype=D)
        assert torch.allclose(layer_norm(x * scale + shift, g, b), layer_norm(x, g, b), atol=1e-5)

    def test_module(self):
        ln = LayerNorm2d(3)
        x = torch.randn(1, 3, 2, 2)
        assert torch.equal(ln(x), layer_norm(x, ln.weight, ln.bias))


class TestPooling:
    def test_constant(self):
        assert torch.equal(global_avg_pool(torch.full((2, 3, 4, 5), 0.75)), torch.full((2, 3, 1, 1), 0.75))

    def test_two_channels(self):
        x = torch.stack([torch.ones(4, 4), 2 * torch.ones(4, 4)])[None]
        assert global_avg_pool(x).flatten().tolist() == [1.0, 2.0]

    def test_matches_mean(self, rng):
        x = rng.random((2, 3, 7, 5))
        got = global_avg_pool(torch.from_numpy(x)).numpy()[..., 0, 0]
        oracle = np.array([[sum(x[n, c].ravel()) / 35 for c in range(3)] for n in range(2)])
        np.testing.assert_allclose(got, oracle, atol=1e-7)

    def test_commutes_with_channel_permutation(self):
        x = torch.randn(2, 5, 3, 3)
        perm = torch.randperm(5)
        assert torch.equal(global_avg_pool(x[:, perm]), global_avg_pool(x)[:, perm])


class TestPixelShuffle:
    def test_shape(self):
        assert pixel_shuffle(torch.randn(1, 4, 2, 2), 2).shape == (1, 1, 4, 4)

    def test_constant(self):
        assert torch.equal(pixel_shuffle(torch.full((1, 8, 3, 3), 3.0), 2), torch.full((1, 2, 6, 6), 3.0))

    def test_round_trip(self):
        x = torch.randn(2, 12, 3, 5)
        assert torch.equal(pixel_unshuffle(pixel_shuffle(x, 2), 2), x)

    def test_indivisible(self):
        with pytest.raises(ConfigError):
            pixel_shuffle(torch.randn(1, 3, 2, 2), 2)


class TestGradCheck:
    def test_scalar_linear_map(self):
        w = torch.tensor([3.0], dtype=D)
        x = torch.tensor([0.7], dtype=D, requires_grad=True)
        report = grad_check(lambda t: w * t, [x], weighting="sum")
        assert report.errors["input[0]"] < 1e-9

    def test_conv(self):
        conv = make_conv(2, 3, 3).to(D)
        x = torch.randn(1, 2, 5, 5, dtype=D, requires_grad=True)
        report = grad_check(lambda t: conv2d(t, conv), [x], conv.named_parameters(), tol=1e-6)
        assert report.passed, report.table()
        assert set(report.errors) == {"weight", "bias", "input[0]"}

    def test_detects_wrong_gradient(self):
        class Bad(torch.autograd.Function):
            @staticmethod
            def forward(ctx, x):
                return x ** 2

            @staticmethod
            def backward(ctx, g):
                return g  # should be 2x g

        x = torch.rand(4, dtype=D, requires_grad=True) + 1
        assert not grad_check(Bad.apply, [x]).passed

    def test_non_finite_gradient_names_tensor(self):
        p = torch.zeros(1, dtype=D, requires_grad=True)
        with pytest.raises(NumericError, match="p"):
            grad_check(lambda: torch.sqrt(p.abs()), [], [("p", p)])

    def test_requires_double(self):
        with pytest.raises(ConfigError):
            grad_check(lambda t: t * 2, [torch.ones(2, requires_grad=True)])

    @settings(max_examples=10, deadline=None)
    @given(st.integers(1, 3), st.integers(1, 3), st.sampled_from([1, 3]), st.integers(0, 1000))
    def test_conv_property(self, c_in, c_out, k, seed):
        torch.manual_seed(seed)
        conv = make_conv(c_in, c_out, k).to(D)
        x = torch.randn(1, c_in, 4, 4, dtype=D, requires_grad=True)
        assert grad_check(lambda t: conv2d(t, conv), [x], conv.named_parameters(), seed=seed).passed
