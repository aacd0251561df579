import math

import numpy as np
import pytest
import sympy as sp
import torch
from hypothesis import given, settings, strategies as st

from dhnet.errors import ConfigError
from dhnet.nn_core import grad_check
from dhnet.verify import activation_nodes
from dhnet.volterra import (
    ACTIVATIONS, ComplexityQuery, Polynomial, VBlock, VolterraSecondOrder, cascade, cascade_order,
    compose_second_order, dense_second_order, fit_memoryless_polynomial, max_residual,
    separable_approximation, taylor_polynomial, volterra_complexity,
)

from conftest import conv_np, randomize

D = torch.float64
ROUNDOFF = 1e-12


def volterra_oracle(x, vol):
    out = conv_np(x, vol.first)
    for a, b in vol.pairs:
        out = out + conv_np(x, a) * conv_np(x, b)
    return out


def ln_np(x, gamma, beta, eps=1e-6):
    mu = x.mean(1, keepdims=True)
    var = ((x - mu) ** 2).mean(1, keepdims=True)
    return gamma[None, :, None, None] * (x - mu) / np.sqrt(var + eps) + beta[None, :, None, None]


def vblock_oracle(x, blk):
    p = lambda t: t.detach().numpy()
    f1 = conv_np(conv_np(ln_np(x, p(blk.ln.weight), p(blk.ln.bias)), blk.pre_point), blk.pre_depth)
    f2 = volterra_oracle(f1, blk.volterra)
    pooled = f2.mean((2, 3), keepdims=True)
    gate = conv_np(pooled, blk.ca_gate)
    return conv_np(f2 * gate, blk.out_point) + x


def zero(*convs):
    with torch.no_grad():
        for c in convs:
            c.weight.zero_()
            if c.bias is not None:
                c.bias.zero_()


class TestSecondOrder:
    def test_zero_pairs_is_first_order(self):
        vol = VolterraSecondOrder(3, rank=2)
        for a, b in vol.pairs:
            zero(a, b)
        x = torch.randn(2, 3, 5, 5)
        assert torch.allclose(vol(x), torch.nn.functional.conv2d(x, vol.first.weight, vol.first.bias,
                                                                 padding=1, groups=3), atol=1e-6)

    def test_delta_pair_squares(self):
        vol = VolterraSecondOrder(2, rank=1)
        zero(vol.first, *vol.pairs[0])
        with torch.no_grad():
            for m in vol.pairs[0]:
                m.weight[:, :, 1, 1] = 1.0
        x = torch.randn(1, 2, 4, 4, dtype=D)
        assert torch.allclose(vol.to(D)(x), x * x, atol=1e-12)

    def test_rank_zero(self):
        vol = VolterraSecondOrder(3, rank=0)
        x = torch.randn(1, 3, 4, 4)
        assert len(vol.pairs) == 0
        assert vol(x).shape == x.shape

    @pytest.mark.parametrize("rank", [1, 4])
    def test_matches_loop_oracle(self, rng, rank):
        vol = randomize(VolterraSecondOrder(3, rank=rank).to(D))
        x = rng.standard_normal((2, 3, 6, 7))
        np.testing.assert_allclose(vol(torch.from_numpy(x)).detach().numpy(), volterra_oracle(x, vol), atol=1e-6)

    def test_quadratic_scaling(self):
        vol = randomize(VolterraSecondOrder(3, rank=3).to(D))
        x = torch.randn(1, 3, 5, 5, dtype=D)
        a = -1.7
        with torch.no_grad():
            for m in vol.modules():
                if isinstance(m, torch.nn.Conv2d):
                    m.bias.zero_()
            lin = torch.nn.functional.conv2d(x, vol.first.weight, padding=1, groups=3)
            quad = vol(x) - lin
            assert torch.allclose(vol(a * x), a * lin + a * a * quad, atol=1e-6)
            zero(vol.first)
            assert torch.allclose(vol(a * x), a * a * vol(x), atol=1e-6)

    def test_rank_one_reproduces_outer_product_kernel(self):
        gen = torch.Generator().manual_seed(3)
        ka, kb = torch.randn(3, 3, generator=gen, dtype=D), torch.randn(3, 3, generator=gen, dtype=D)
        dense = torch.einsum("ab,cd->abcd", ka, kb)
        x = torch.randn(1, 1, 7, 7, generator=gen, dtype=D)
        vol = VolterraSecondOrder(1, rank=1).to(D)
        zero(vol.first, *vol.pairs[0])
        with torch.no_grad():
            vol.pairs[0][0].weight[0, 0] = ka
            vol.pairs[0][1].weight[0, 0] = kb
        assert torch.allclose(vol(x)[0, 0], dense_second_order(x[0, 0], dense), atol=1e-12, rtol=0)

    def test_separable_approximation_improves_with_rank(self, rng):
        kernel = rng.standard_normal((3, 3, 3, 3))
        errs = []
        for q in range(1, 10):
            approx = sum(np.einsum("ab,cd->abcd", a, b) for a, b in separable_approximation(kernel, q))
            errs.append(np.linalg.norm(approx - kernel))
        assert all(e2 <= e1 + 1e-12 for e1, e2 in zip(errs, errs[1:]))
        assert errs[-1] < 1e-10

    def test_gradients(self):
        vol = VolterraSecondOrder(2, rank=2).to(D)
        assert grad_check(vol, [torch.randn(1, 2, 5, 5, dtype=D, requires_grad=True)]).passed


class TestVBlock:
    def test_zero_out_projection_is_identity(self):
        blk = randomize(VBlock(4, rank=2))
        zero(blk.out_point)
        x = torch.randn(2, 4, 6, 6)
        assert torch.equal(blk(x), x)

    def test_constant_f2_gives_uniform_gate(self):
        blk = randomize(VBlock(3, rank=2).to(D))
        f2 = torch.full((1, 3, 5, 5), 0.3, dtype=D)
        f2[:, 1] = -1.2
        gate = torch.nn.functional.conv2d(f2.mean((2, 3), keepdim=True), blk.ca_gate.weight, blk.ca_gate.bias)
        assert gate.shape == (1, 3, 1, 1)
        gated = f2 * gate
        for c in range(3):
            assert torch.allclose(gated[0, c], gated[0, c, 0, 0].expand(5, 5))

    def test_matches_staged_oracle(self, rng):
        blk = randomize(VBlock(3, rank=4).to(D), scale=0.4)
        with torch.no_grad():
            blk.ln.weight.add_(1.0)
        x = rng.standard_normal((2, 3, 6, 5))
        np.testing.assert_allclose(blk(torch.from_numpy(x)).detach().numpy(), vblock_oracle(x, blk), atol=1e-6)

    def test_no_activation_nodes(self):
        blk = randomize(VBlock(4, rank=4))
        out = blk(torch.randn(1, 4, 6, 6, requires_grad=True))
        assert activation_nodes(out) == []

    def test_scan_finds_activations(self):
        x = torch.randn(3, requires_grad=True)
        assert activation_nodes(torch.sigmoid(torch.relu(x))) == ["SigmoidBackward0", "ReluBackward0"]

    def test_gradients(self):
        blk = randomize(VBlock(3, rank=2).to(D), scale=0.4)
        report = grad_check(blk, [torch.randn(1, 3, 5, 5, dtype=D, requires_grad=True)])
        assert report.passed, report.table()


class TestPolynomialFit:
    def test_square(self):
        poly, err = fit_memoryless_polynomial(lambda x: x ** 2, -1, 1, 2)
        np.testing.assert_allclose(poly.coefficients, [0, 0, 1], atol=1e-10)
        assert err < 1e-10

    def test_sigmoid_beats_taylor(self):
        sig = ACTIVATIONS["sigmoid"]
        poly, err = fit_memoryless_polynomial(sig, -1, 1, 3)
        taylor = Polynomial([0.5, 0.25, 0.0, -1 / 48])
        assert err <= max_residual(sig, taylor, -1, 1)

    def test_sigmoid_taylor_reference(self):
        np.testing.assert_allclose(taylor_polynomial("sigmoid", 3).coefficients, [0.5, 0.25, 0, -1 / 48],
                                   atol=1e-15)
        np.testing.assert_allclose(taylor_polynomial("sigmoid", 5).coefficients[5], 1 / 480, atol=1e-15)

    def test_relu_linear_closed_form(self):
        # continuous least squares on [-1, 1]: h0 = mean(relu) = 1/4, h1 = <x, relu>/<x, x> = 1/2
        poly, _ = fit_memoryless_polynomial(ACTIVATIONS["relu"], -1, 1, 1, samples=1_000_001)
        np.testing.assert_allclose(poly.coefficients, [0.25, 0.5], atol=1e-6)

    @pytest.mark.parametrize("name", ["sigmoid", "tanh", "silu", "relu"])
    def test_error_non_increasing_in_degree(self, name):
        # an even degree added to an odd-symmetric target leaves the fit unchanged
        # in exact arithmetic; ROUNDOFF absorbs the last-bit differences
        errs = [fit_memoryless_polynomial(ACTIVATIONS[name], -1, 1, n)[1] for n in range(1, 6)]
        assert all(b <= a + ROUNDOFF for a, b in zip(errs, errs[1:])), errs

    def test_legendre_fallback(self):
        f = ACTIVATIONS["tanh"]
        poly, err = fit_memoryless_polynomial(f, 0, 20, 12)
        ref, ref_err = fit_memoryless_polynomial(f, 0, 20, 12, cond_limit=np.inf)
        assert err <= ref_err * 1.01 + 1e-12

    def test_bad_interval(self):
        with pytest.raises(ConfigError):
            fit_memoryless_polynomial(np.sin, 1, 1, 2)


class TestComposition:
    def test_identity(self):
        p = Polynomial([0, 1, 0])
        assert compose_second_order(p, p).coefficients == (0, 1, 0, 0, 0)

    def test_square_of_square(self):
        p = Polynomial([0, 0, 1])
        assert compose_second_order(p, p).coefficients == (0, 0, 0, 0, 1)

    def test_matches_symbolic_expansion(self, rng):
        x = sp.Symbol("x")
        for _ in range(100):
            hp, hq = rng.uniform(-2, 2, 3), rng.uniform(-2, 2, 3)
            inner = sum(sp.Float(c, 30) * x ** i for i, c in enumerate(hp))
            outer = sum(sp.Float(c, 30) * inner ** i for i, c in enumerate(hq))
            poly = sp.Poly(sp.expand(outer), x)
            expected = [float(poly.coeff_monomial(x ** i)) for i in range(5)]
            got = compose_second_order(Polynomial(hp), Polynomial(hq)).coefficients
            np.testing.assert_allclose(got, expected, rtol=0, atol=1e-12)

    def test_constant_term_includes_linear_contribution(self):
        # p(p(0)) = h0 + h1 h0 + h2 h0^2; dropping the h1 h0 term would give 2 here
        p = Polynomial([1, 1, 1])
        assert compose_second_order(p, p).coefficients[0] == 3.0

    def test_lower_order_inputs(self):
        got = compose_second_order(Polynomial([2.0]), Polynomial([1.0, 3.0]))
        assert got.coefficients == (7.0, 0, 0, 0, 0)

    def test_rejects_higher_order(self):
        with pytest.raises(ConfigError):
            compose_second_order(Polynomial([0, 0, 0, 1]), Polynomial([0, 1]))

    @pytest.mark.parametrize("depth", [1, 2, 3])
    def test_cascade_order_law(self, depth):
        r = cascade(Polynomial([0.1, 0.5, 0.7]), depth)
        assert r.order == cascade_order(depth) == 2 ** (2 ** (depth - 1))
        assert r.coefficients[-1] != 0

    def test_cascade_values(self):
        p = Polynomial([0.1, 0.5, 0.7])
        xs = np.linspace(-1, 1, 7)
        np.testing.assert_allclose(cascade(p, 3)(xs), p(p(p(p(xs)))), rtol=1e-12)


class TestComplexity:
    def test_dense_first_order(self):
        assert volterra_complexity(ComplexityQuery(L=1, p1=1, p2=1, n=1), "dense") == 9

    def test_separable_example(self):
        assert volterra_complexity(ComplexityQuery(L=1, p1=1, p2=1, K=1, Q=4), "separable") == 81

    def test_cascaded(self):
        assert volterra_complexity(ComplexityQuery(L=2, p1=1, p2=0, K=3), "cascaded") == 3 * (6 + 36)

    def test_per_stage(self):
        q = ComplexityQuery(L=1, p1=0, p2=0, Q=1, stages=((1, 1, 1), (2, 2, 2)))
        assert volterra_complexity(q, "separable") == 3 * 9 + 3 * 50

    def test_big_integers(self):
        n = volterra_complexity(ComplexityQuery(L=64, p1=1, p2=1, K=4), "dense")
        assert isinstance(n, int) and n > 2 ** 1000

    def test_matches_built_parameters(self, rng):
        for _ in range(20):
            L, p, Q = (int(v) for v in (rng.integers(1, 9), rng.integers(0, 3), rng.integers(0, 6)))
            vol = VolterraSecondOrder(L, rank=Q, kernel_size=2 * p + 1)
            weights = sum(m.weight.numel() for m in vol.modules() if isinstance(m, torch.nn.Conv2d))
            assert volterra_complexity(ComplexityQuery(L=L, p1=p, p2=p, K=1, Q=Q), "separable") == weights

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 8), st.integers(0, 3), st.integers(0, 3), st.integers(1, 3), st.integers(0, 8))
    def test_ordering(self, L, p1, p2, K, Q):
        q = ComplexityQuery(L=L, p1=p1, p2=p2, K=K, Q=Q)
        m = L * (2 * p1 + 1) * (2 * p2 + 1)
        sep, cas, dense = (volterra_complexity(q, mode) for mode in ("separable", "cascaded", "dense"))
        if 2 * Q < m:
            assert sep < cas
        assert cas <= dense
        if K >= 2 and m >= 2:
            assert cas < dense

    def test_unknown_mode(self):
        with pytest.raises(ConfigError):
            volterra_complexity(ComplexityQuery(L=1, p1=1, p2=1, n=1), "sparse")
