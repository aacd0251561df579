"""Volterra blocks and the polynomial side of the Volterra-series argument.

The network part is a second-order Volterra filter whose quadratic kernel is
kept in rank-Q separable form: ``Q`` pairs of depth-wise kernels whose
responses are multiplied elementwise and summed. The scalar part covers
memoryless kernels (plain polynomials): least-squares fitting of activation
functions, composition of cascaded quadratics and parameter accounting.
"""
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import numpy.polynomial.polynomial as npoly
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError
from .nn_core import LayerNorm2d, conv2d, depthwise, global_avg_pool, make_conv


class VolterraSecondOrder(nn.Module):
    """``W1 * f + sum_q (Wa_q * f) (Wb_q * f)`` with depth-wise kernels.

    ``rank=0`` leaves only the first-order (linear) term.
    """

    def __init__(self, channels, rank=4, kernel_size=3):
        super().__init__()
        if rank < 0:
            raise ConfigError(f"rank must be >= 0, got {rank}")
        self.channels = channels
        self.rank = rank
        self.kernel_size = kernel_size
        self.first = depthwise(channels, kernel_size)
        self.pairs = nn.ModuleList(
            nn.ModuleList([depthwise(channels, kernel_size), depthwise(channels, kernel_size)])
            for _ in range(rank)
        )

    def forward(self, x):
        if x.shape[1] != self.channels:
            raise ConfigError(f"expected {self.channels} channels, got {x.shape[1]}")
        if self.rank == 0:
            return conv2d(x, self.first)
        # All 2Q+1 depth-wise kernels run as one grouped conv; output channel
        # c * (2Q+1) + j holds kernel j applied to input channel c.
        convs = [self.first] + [m for pair in self.pairs for m in pair]
        k = self.kernel_size
        weight = torch.stack([m.weight for m in convs], 1).reshape(-1, 1, k, k)
        bias = torch.stack([m.bias for m in convs], 1).reshape(-1)
        n, c, h, w = x.shape
        y = F.conv2d(x, weight, bias, padding=k // 2, groups=c).view(n, c, 2 * self.rank + 1, h, w)
        return y[:, :, 0] + (y[:, :, 1::2] * y[:, :, 2::2]).sum(2)

    def macs(self, h, w):
        k2 = self.kernel_size ** 2
        return (2 * self.rank + 1) * self.channels * k2 * h * w + self.rank * self.channels * h * w


class VBlock(nn.Module):
    """LN -> 1x1 -> 3x3 depth-wise -> second-order Volterra -> channel gate -> 1x1, plus residual.

    The channel gate multiplies by a 1x1 projection of the pooled features,
    with no squashing function, so the block has no pointwise activation.
    """

    def __init__(self, channels, rank=4):
        super().__init__()
        self.channels = channels
        self.ln = LayerNorm2d(channels)
        self.pre_point = make_conv(channels, channels, 1)
        self.pre_depth = depthwise(channels, 3)
        self.volterra = VolterraSecondOrder(channels, rank)
        self.ca_gate = make_conv(channels, channels, 1)
        self.out_point = make_conv(channels, channels, 1)

    def forward(self, x):
        f1 = conv2d(conv2d(self.ln(x), self.pre_point), self.pre_depth)
        f2 = self.volterra(f1)
        gate = conv2d(global_avg_pool(f2), self.ca_gate)
        return conv2d(f2 * gate, self.out_point) + x

    def macs(self, h, w):
        c = self.channels
        return (2 * c * c * h * w          # pre_point, out_point
                + 9 * c * h * w            # pre_depth
                + self.volterra.macs(h, w)
                + c * c                    # gate on the pooled vector
                + c * h * w)               # gating product


def dense_second_order(x, kernel):
    """Explicit second-order Volterra term of a single-channel map.

    ``y[i, j] = sum_{u, v} kernel[u, v] * x[i + u] * x[i + v]`` where ``u`` and
    ``v`` range over a ``k x k`` window (zero padded); ``kernel`` has shape
    ``(k, k, k, k)``.
    """
    k = kernel.shape[0]
    p = k // 2
    xp = F.pad(x, (p, p, p, p))
    h, w = x.shape[-2:]
    patches = torch.stack([xp[..., a:a + h, b:b + w] for a in range(k) for b in range(k)], -1)
    mat = kernel.reshape(k * k, k * k).to(x.dtype)
    return torch.einsum("...u,uv,...v->...", patches, mat, patches)


def separable_approximation(kernel, rank):
    """Rank-``rank`` pairs ``(a_q, b_q)`` with ``sum_q a_q (x) b_q`` closest to ``kernel`` in Frobenius norm."""
    k = kernel.shape[0]
    mat = np.asarray(kernel, dtype=np.float64).reshape(k * k, k * k)
    u, s, vt = np.linalg.svd(mat)
    return [((u[:, q] * s[q]).reshape(k, k), vt[q].reshape(k, k)) for q in range(rank)]


@dataclass(frozen=True)
class Polynomial:
    """Memoryless Volterra kernel ``h0 + h1 x + ... + hn x^n``."""
    coefficients: tuple

    def __post_init__(self):
        coef = tuple(float(c) for c in self.coefficients)
        if not coef:
            raise ConfigError("polynomial needs at least one coefficient")
        if not all(np.isfinite(coef)):
            raise ConfigError("polynomial coefficients must be finite")
        object.__setattr__(self, "coefficients", coef)

    @property
    def order(self):
        return len(self.coefficients) - 1

    def __call__(self, x):
        return npoly.polyval(x, self.coefficients)


def compose(outer, inner):
    """Coefficients of ``outer(inner(x))``."""
    result = np.zeros(1)
    power = np.ones(1)
    for c in outer.coefficients:
        result = npoly.polyadd(result, c * power)
        power = npoly.polymul(power, inner.coefficients)
    out = np.zeros(outer.order * inner.order + 1)
    out[:len(result)] = result[:len(out)]
    return Polynomial(out)


def compose_second_order(p, q):
    """``q(p(x))`` for two kernels of order at most 2; always returns 5 coefficients."""
    if p.order > 2 or q.order > 2:
        raise ConfigError("compose_second_order takes polynomials of order <= 2")
    pad = lambda poly: Polynomial(list(poly.coefficients) + [0.0] * (2 - poly.order))
    return compose(pad(q), pad(p))


def cascade(p, depth):
    """Feed a quadratic's output back into the cascade built so far, ``depth`` times.

    ``r_1 = p`` and ``r_{k+1} = r_k(r_k(x))``, so ``r_K`` has order
    ``cascade_order(K)``.
    """
    if depth < 1:
        raise ConfigError("cascade depth must be >= 1")
    r = p
    for _ in range(depth - 1):
        r = compose(r, r)
    return r


def cascade_order(depth):
    return 2 ** (2 ** (depth - 1))


def _sample_grid(lo, hi, n, samples):
    if hi <= lo:
        raise ConfigError(f"need hi > lo, got [{lo}, {hi}]")
    samples = max(samples or 0, 10 * (n + 1), 2001)
    return np.linspace(lo, hi, samples)


def fit_memoryless_polynomial(f, lo, hi, n, samples=None, cond_limit=1e10):
    """Least-squares degree-``n`` polynomial through uniform samples of ``f``.

    Returns ``(Polynomial, fit_error)`` with ``fit_error`` the largest absolute
    residual over the samples. Falls back to a Legendre-basis fit when the
    monomial design matrix is badly conditioned.
    """
    x = _sample_grid(lo, hi, n, samples)
    y = np.asarray(f(x), dtype=np.float64)
    vander = npoly.polyvander(x, n)
    if np.linalg.cond(vander) < cond_limit:
        coef = np.linalg.lstsq(vander, y, rcond=None)[0]
    else:
        leg = np.polynomial.Legendre.fit(x, y, n)
        coef = leg.convert(kind=np.polynomial.Polynomial).coef
        coef = np.pad(coef, (0, n + 1 - len(coef)))
    poly = Polynomial(coef)
    return poly, float(np.max(np.abs(poly(x) - y)))


def max_residual(f, poly, lo, hi, samples=None):
    x = _sample_grid(lo, hi, poly.order, samples)
    return float(np.max(np.abs(poly(x) - np.asarray(f(x), dtype=np.float64))))


def _sympy_activations():
    import sympy as sp
    x = sp.Symbol("x")
    return x, {
        "sigmoid": 1 / (1 + sp.exp(-x)),
        "tanh": sp.tanh(x),
        "softplus": sp.log(1 + sp.exp(x)),
        "silu": x / (1 + sp.exp(-x)),
    }


ACTIVATIONS = {
    "sigmoid": lambda x: 1.0 / (1.0 + np.exp(-x)),
    "tanh": np.tanh,
    "softplus": lambda x: np.log1p(np.exp(x)),
    "silu": lambda x: x / (1.0 + np.exp(-x)),
    "relu": lambda x: np.maximum(x, 0.0),
}


@lru_cache(maxsize=None)
def taylor_polynomial(name, n, x0=0.0):
    """Degree-``n`` Taylor polynomial of a named smooth activation about ``x0``, in powers of ``x``.

    Returns ``None`` for activations without a Taylor expansion (relu).
    """
    import sympy as sp
    x, exprs = _sympy_activations()
    if name not in exprs:
        return None
    x0 = sp.nsimplify(x0)
    series = sp.series(exprs[name], x, x0, n + 1).removeO()
    poly = sp.Poly(sp.expand(series), x)
    coef = [0.0] * (n + 1)
    for (deg,), c in poly.terms():
        coef[deg] = float(c)
    return Polynomial(coef)


@dataclass(frozen=True)
class ComplexityQuery:
    """``L`` channels (terms), kernel half-widths ``p1``/``p2``, target order ``n``,
    cascade depth ``K`` and separable rank ``Q``.

    ``stages`` optionally gives per-stage ``(L, p1, p2)``; otherwise all ``K``
    stages share ``(L, p1, p2)``.
    """
    L: int
    p1: int
    p2: int
    n: int = None
    K: int = None
    Q: int = None
    stages: tuple = None

    def __post_init__(self):
        for name in ("L", "n", "K", "Q"):
            v = getattr(self, name)
            if v is not None and v < (0 if name == "Q" else 1):
                raise ConfigError(f"{name} must be positive, got {v}")
        if self.p1 < 0 or self.p2 < 0:
            raise ConfigError("kernel half-widths must be non-negative")

    @property
    def order(self):
        if self.n is not None:
            return self.n
        if self.K is None:
            raise ConfigError("dense count needs n or K")
        return cascade_order(self.K)

    def stage_sizes(self):
        if self.stages is not None:
            return [L * (2 * p1 + 1) * (2 * p2 + 1) for L, p1, p2 in self.stages]
        if self.K is None:
            raise ConfigError("cascaded/separable counts need K or explicit stages")
        return [self.L * (2 * self.p1 + 1) * (2 * self.p2 + 1)] * self.K


def volterra_complexity(query, mode):
    """Kernel parameter count of a Volterra filter (exact integers)."""
    if mode == "dense":
        m = query.L * (2 * query.p1 + 1) * (2 * query.p2 + 1)
        return sum(m ** d for d in range(1, query.order + 1))
    if mode == "cascaded":
        return sum(m + m * m for m in query.stage_sizes())
    if mode == "separable":
        if query.Q is None:
            raise ConfigError("separable count needs Q")
        return sum(m + 2 * query.Q * m for m in query.stage_sizes())
    raise ConfigError(f"unknown complexity mode {mode!r}")
