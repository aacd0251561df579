"""Convolution, normalization and pooling primitives plus a finite-difference
gradient checker.

Tensors are plain ``torch.Tensor`` objects in NCHW layout; convolution
parameters live in ``nn.Conv2d`` modules, which carry weight, bias, stride,
padding and groups together.
"""
import contextlib
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, NumericError

LN_EPS = 1e-6
FD_STEP = 1e-5
DIV_EPS = 1e-12

_checked = False


@contextlib.contextmanager
def checked(enabled=True):
    """Raise ``NumericError`` on non-finite inputs to the primitives while active."""
    global _checked
    prev, _checked = _checked, enabled
    try:
        yield
    finally:
        _checked = prev


def check_finite(x, what="tensor"):
    if not torch.isfinite(x).all():
        raise NumericError(f"non-finite values in {what}")
    return x


def _check_nchw(x, what):
    if x.dim() != 4:
        raise ConfigError(f"{what} must be 4-D (N, C, H, W), got shape {tuple(x.shape)}")
    if any(s <= 0 for s in x.shape):
        raise ConfigError(f"{what} has an empty dimension: {tuple(x.shape)}")
    if _checked:
        check_finite(x, what)


def make_conv(c_in, c_out, kernel_size=1, stride=1, groups=1, bias=True):
    """Conv with zero "same" padding for odd kernels."""
    if kernel_size % 2 != 1:
        raise ConfigError(f"kernel size must be odd for same padding, got {kernel_size}")
    if c_in % groups or c_out % groups:
        raise ConfigError(f"groups={groups} must divide c_in={c_in} and c_out={c_out}")
    return nn.Conv2d(c_in, c_out, kernel_size, stride=stride, padding=kernel_size // 2,
                     groups=groups, bias=bias)


def depthwise(channels, kernel_size=3, bias=True):
    return make_conv(channels, channels, kernel_size, groups=channels, bias=bias)


def conv2d(x, conv):
    """Cross-correlate ``x`` with the weights held by ``conv`` (no kernel flip)."""
    _check_nchw(x, "conv2d input")
    c_in = conv.weight.shape[1] * conv.groups
    if x.shape[1] != c_in:
        raise ConfigError(f"conv2d expects {c_in} input channels, got {x.shape[1]}")
    return F.conv2d(x, conv.weight, conv.bias, conv.stride, conv.padding, 1, conv.groups)


def layer_norm(x, gamma, beta, eps=LN_EPS):
    """Normalize each (n, h, w) channel vector to zero mean and unit variance."""
    _check_nchw(x, "layer_norm input")
    c = x.shape[1]
    if gamma.numel() != c or beta.numel() != c:
        raise ConfigError(f"layer_norm affine must have {c} entries")
    mu = x.mean(1, keepdim=True)
    var = (x - mu).pow(2).mean(1, keepdim=True)
    y = (x - mu) / (var + eps).sqrt()
    return gamma.view(1, c, 1, 1) * y + beta.view(1, c, 1, 1)


class LayerNorm2d(nn.Module):
    def __init__(self, channels, eps=LN_EPS):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x):
        return layer_norm(x, self.weight, self.bias, self.eps)


def global_avg_pool(x):
    _check_nchw(x, "global_avg_pool input")
    return x.mean((2, 3), keepdim=True)


def pixel_shuffle(x, r):
    _check_nchw(x, "pixel_shuffle input")
    if x.shape[1] % (r * r):
        raise ConfigError(f"pixel_shuffle: {x.shape[1]} channels not divisible by r^2={r * r}")
    return F.pixel_shuffle(x, r)


def pixel_unshuffle(x, r):
    _check_nchw(x, "pixel_unshuffle input")
    if x.shape[2] % r or x.shape[3] % r:
        raise ConfigError(f"pixel_unshuffle: spatial size {tuple(x.shape[2:])} not divisible by {r}")
    return F.pixel_unshuffle(x, r)


@dataclass
class GradCheckReport:
    """Per-tensor maximum relative error between analytic and central-difference gradients.

    For each checked tensor the error is ``max|a - f| / max(max|a|, max|f|, 1e-12)``
    taken over the probed entries.
    """
    errors: dict = field(default_factory=dict)
    probed: dict = field(default_factory=dict)
    tol: float = 1e-5

    @property
    def max_error(self):
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self):
        return self.max_error < self.tol

    @property
    def worst(self):
        return max(self.errors, key=self.errors.get) if self.errors else None

    def table(self):
        width = max((len(n) for n in self.errors), default=4)
        lines = [f"{'name':<{width}}  {'entries':>7}  {'rel_err':>10}  status"]
        for name, err in self.errors.items():
            status = "ok" if err < self.tol else "FAIL"
            lines.append(f"{name:<{width}}  {self.probed[name]:>7d}  {err:10.3e}  {status}")
        lines.append(f"max relative error {self.max_error:.3e} (tol {self.tol:g}): "
                     f"{'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)


def grad_check(fn, inputs, params=None, h=FD_STEP, tol=1e-5, max_entries=None,
               weighting="random", seed=0):
    """Compare autograd gradients of a scalar reduction of ``fn(*inputs)`` with
    central differences.

    ``params`` is an iterable of ``(name, tensor)``; when omitted and ``fn`` is an
    ``nn.Module`` its named parameters are used. Inputs are checked too when they
    require grad. ``weighting="random"`` reduces the output with a fixed Gaussian
    projection; ``"sum"`` uses the plain sum, which has identically zero input
    gradient through normalization layers. ``max_entries`` caps the number of
    probed elements per tensor (chosen at random, seeded).
    """
    inputs = [inputs] if torch.is_tensor(inputs) else list(inputs)
    if params is None:
        params = fn.named_parameters() if isinstance(fn, nn.Module) else []
    targets = [(n, p) for n, p in params if p.requires_grad]
    targets += [(f"input[{i}]", x) for i, x in enumerate(inputs)
                if torch.is_tensor(x) and x.requires_grad]
    if not targets:
        raise ConfigError("grad_check: nothing to check")
    for name, t in targets:
        if t.dtype != torch.float64:
            raise ConfigError(f"grad_check needs double precision, {name} is {t.dtype}")

    gen = torch.Generator().manual_seed(seed)
    proj = None

    def reduce(out):
        nonlocal proj
        if weighting == "sum":
            return out.sum()
        if proj is None:
            proj = torch.randn(out.shape, generator=gen, dtype=out.dtype)
        return (out * proj).sum()

    loss = reduce(fn(*inputs))
    grads = torch.autograd.grad(loss, [t for _, t in targets], allow_unused=True)

    rng = np.random.default_rng(seed)
    report = GradCheckReport(tol=tol)
    with torch.no_grad():
        for (name, t), g in zip(targets, grads):
            g = torch.zeros_like(t) if g is None else g
            if not torch.isfinite(g).all():
                raise NumericError(f"non-finite analytic gradient for {name}")
            n = t.numel()
            idx = np.arange(n)
            if max_entries is not None and n > max_entries:
                idx = np.sort(rng.choice(n, size=max_entries, replace=False))
            flat = t.view(-1)
            analytic = g.reshape(-1)[torch.as_tensor(idx)]
            numeric = torch.empty_like(analytic)
            for j, i in enumerate(idx):
                orig = flat[i].item()
                flat[i] = orig + h
                fp = fn(*inputs)
                flat[i] = orig - h
                fm = fn(*inputs)
                flat[i] = orig
                # difference before reducing: parts that do not depend on the
                # probed entry cancel exactly instead of in the scalar sum
                numeric[j] = reduce(fp - fm).item() / (2 * h)
            if not torch.isfinite(numeric).all():
                raise NumericError(f"non-finite numerical gradient for {name}")
            scale = max(analytic.abs().max().item(), numeric.abs().max().item(), DIV_EPS)
            report.errors[name] = (analytic - numeric).abs().max().item() / scale
            report.probed[name] = len(idx)
    return report
