"""Training loss: Charbonnier + Laplacian edge term + Fourier L1 term."""
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigError

LAPLACIAN = torch.tensor([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])


@dataclass(frozen=True)
class LossWeights:
    eps: float = 1e-3
    edge: float = 0.05       # weight on the edge term
    freq: float = 0.1        # weight on the frequency term

    def __post_init__(self):
        if min(self.eps, self.edge, self.freq) < 0:
            raise ConfigError("loss weights must be non-negative")


def _same_shape(pred, target):
    if pred.shape != target.shape:
        raise ConfigError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")


def charbonnier(pred, target, eps=1e-3, reduction="global"):
    """``sqrt(||pred - target||^2 + eps^2)``.

    ``reduction="global"`` uses the squared L2 norm over every element;
    ``"mean"`` divides it by the element count, which keeps the loss scale
    independent of image size.
    """
    _same_shape(pred, target)
    sq = (pred - target).pow(2).sum()
    if reduction == "mean":
        sq = sq / pred.numel()
    elif reduction != "global":
        raise ConfigError(f"unknown reduction {reduction!r}")
    return (sq + eps * eps).sqrt()


def laplacian(x):
    """3x3 Laplacian per channel with reflect padding."""
    c = x.shape[1]
    k = LAPLACIAN.to(x).view(1, 1, 3, 3).expand(c, 1, 3, 3)
    return F.conv2d(F.pad(x, (1, 1, 1, 1), mode="reflect"), k, groups=c)


def edge_loss(pred, target, eps=1e-3, reduction="global"):
    _same_shape(pred, target)
    return charbonnier(laplacian(pred), laplacian(target), eps, reduction)


def frequency_loss(pred, target, reduction="global"):
    """Sum of complex magnitudes of ``FFT2(pred) - FFT2(target)`` (unnormalized transform)."""
    _same_shape(pred, target)
    diff = torch.fft.fft2(pred - target)
    total = diff.abs().sum()
    if reduction == "mean":
        total = total / pred.numel()
    elif reduction != "global":
        raise ConfigError(f"unknown reduction {reduction!r}")
    return total


def combine(charb, edge, freq, weights=LossWeights()):
    return charb + weights.edge * edge + weights.freq * freq


def total_loss(pred, target, weights=LossWeights(), reduction="global"):
    return combine(
        charbonnier(pred, target, weights.eps, reduction),
        edge_loss(pred, target, weights.eps, reduction),
        frequency_loss(pred, target, reduction),
        weights,
    )
