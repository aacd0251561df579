"""Degradation degree recognition experts (DDRE).

Features are fused with a frozen prior, passed through ``S`` depth-wise
separable experts of growing receptive field, and every one of ``T`` routers
mixes *all* experts with its own softmax weights. The router outputs are
concatenated, projected back to ``C`` channels and added to the input.
"""
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError
from .nn_core import conv2d, depthwise, global_avg_pool, make_conv

ROUTER_MODES = ("input_conditioned", "static")


def expert_kernel_size(index):
    """Kernel size of the ``index``-th expert (0-based): 1, 3, 5, 7, 9, ..."""
    return 2 * index + 1


class Expert(nn.Module):
    def __init__(self, channels, kernel_size):
        super().__init__()
        self.kernel_size = kernel_size
        self.depth = depthwise(channels, kernel_size)
        self.point = make_conv(channels, channels, 1)

    def forward(self, x):
        return conv2d(conv2d(x, self.depth), self.point)

    def macs(self, h, w):
        c = self.point.in_channels
        return (self.kernel_size ** 2 * c + c * c) * h * w


class Router(nn.Module):
    """Softmax weights over ``experts`` for each sample, shape ``(N, S)``."""

    def __init__(self, channels, experts, mode="input_conditioned"):
        super().__init__()
        if mode not in ROUTER_MODES:
            raise ConfigError(f"unknown router mode {mode!r}")
        self.mode = mode
        self.experts = experts
        if mode == "static":
            self.logits = nn.Parameter(torch.zeros(experts))
        else:
            self.proj = nn.Linear(channels, experts)

    def forward(self, x):
        if self.mode == "static":
            return F.softmax(self.logits, 0).expand(x.shape[0], -1)
        return F.softmax(self.proj(global_avg_pool(x).flatten(1)), 1)


def router_weights(f5, router):
    return router(f5)


class DDRE(nn.Module):
    def __init__(self, channels, prior_channels=0, experts=5, routers=4,
                 router_mode="input_conditioned"):
        super().__init__()
        if experts < 1 or routers < 1:
            raise ConfigError(f"need at least one expert and one router, got S={experts}, T={routers}")
        self.channels = channels
        self.prior_channels = prior_channels
        self.prior_proj = make_conv(channels + prior_channels, channels, 1)
        self.experts = nn.ModuleList(Expert(channels, expert_kernel_size(k)) for k in range(experts))
        self.routers = nn.ModuleList(Router(channels, experts, router_mode) for _ in range(routers))
        self.out_proj = make_conv(routers * channels, channels, 1)

    def inject_prior(self, f4, prior=None):
        if self.prior_channels:
            if prior is None:
                raise ConfigError(f"DDRE expects a prior with {self.prior_channels} channels")
            if prior.shape[1] != self.prior_channels:
                raise ConfigError(f"prior has {prior.shape[1]} channels, expected {self.prior_channels}")
            if prior.shape[-2:] != f4.shape[-2:]:
                raise ConfigError(f"prior size {tuple(prior.shape[-2:])} does not match "
                                  f"features {tuple(f4.shape[-2:])}")
            f4 = torch.cat([f4, prior.expand(f4.shape[0], -1, -1, -1)], 1)
        return conv2d(f4, self.prior_proj)

    def forward(self, f4, prior=None):
        if f4.shape[1] != self.channels:
            raise ConfigError(f"DDRE expects {self.channels} channels, got {f4.shape[1]}")
        f5 = self.inject_prior(f4, prior)
        expert_out = torch.stack([e(f5) for e in self.experts], 1)          # N S C H W
        weights = torch.stack([r(f5) for r in self.routers], 1)             # N T S
        mixed = torch.einsum("nts,nschw->ntchw", weights, expert_out)
        f6 = mixed.flatten(1, 2)
        return conv2d(f6, self.out_proj) + f4

    def macs(self, h, w):
        c, s, t = self.channels, len(self.experts), len(self.routers)
        total = (c + self.prior_channels) * c * h * w
        total += sum(e.macs(h, w) for e in self.experts)
        if self.routers[0].mode == "input_conditioned":
            total += t * c * s
        total += t * s * c * h * w
        total += t * c * c * h * w
        return total


class PriorProvider:
    """Source of prior feature maps. Holds no trainable parameters.

    ``features(image)`` maps the network input to a full-resolution prior and
    ``at(prior, size)`` average-pools it to a stage's spatial size.
    """
    variant = "none"
    channels = 0

    def features(self, image):
        return None

    def at(self, prior, size):
        if prior is None:
            return None
        size = tuple(size)
        if tuple(prior.shape[-2:]) == size:
            return prior
        if prior.shape[-2] < size[0] or prior.shape[-1] < size[1]:
            raise ConfigError(f"cannot resample prior of size {tuple(prior.shape[-2:])} up to {size}")
        return F.adaptive_avg_pool2d(prior, size)


class NoPrior(PriorProvider):
    """All-zero prior with a declared channel count."""

    def __init__(self, channels=0):
        self.channels = channels

    def features(self, image):
        if not self.channels:
            return None
        n, _, h, w = image.shape
        return image.new_zeros(n, self.channels, h, w)


class FrozenModelPrior(PriorProvider):
    """Features of a frozen network; its weights never receive gradients."""
    variant = "frozen_model"

    def __init__(self, model, channels):
        self.model = model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.channels = channels

    def features(self, image):
        with torch.no_grad():
            self.model.to(image.dtype)
            return self.model(image)


class ExternalPrior(PriorProvider):
    """A fixed feature map (``(1 or N, C_p, H, W)``) loaded from disk."""
    variant = "external"

    def __init__(self, feature_map):
        self.feature_map = feature_map.detach()
        self.channels = feature_map.shape[1]

    def features(self, image):
        fm = self.feature_map.to(image.dtype)
        if fm.shape[0] not in (1, image.shape[0]):
            raise ConfigError(f"external prior batch {fm.shape[0]} does not match input batch {image.shape[0]}")
        return self.at(fm, image.shape[-2:]).expand(image.shape[0], -1, -1, -1)


class ToyPriorNet(nn.Module):
    """Small conv feature extractor used as a stand-in pre-trained prior model."""

    def __init__(self, channels=4, hidden=8):
        super().__init__()
        self.body = nn.Sequential(
            make_conv(3, hidden, 3), nn.ReLU(), make_conv(hidden, channels, 3)
        )

    def forward(self, x):
        return self.body(x)
