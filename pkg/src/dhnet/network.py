"""DHNet: a multi-scale encoder/decoder of DHBlocks predicting a residual image."""
from dataclasses import dataclass, field, fields

import torch
import torch.nn as nn
import torch.nn.functional as F

from .ddre import DDRE, NoPrior, ROUTER_MODES
from .errors import ConfigError
from .nn_core import conv2d, make_conv, pixel_shuffle
from .volterra import VBlock

PRIOR_VARIANTS = ("none", "frozen_model", "external")
PRECISIONS = {"single": torch.float32, "double": torch.float64}


@dataclass
class NetworkConfig:
    width: int = 8
    blocks: tuple = (1, 1, 1, 1, 1, 1, 1, 1, 1)
    rank: int = 4
    experts: int = 5
    routers: int = 4
    scales: int = 4
    router_mode: str = "input_conditioned"
    ddre: bool = True
    prior: str = "none"
    prior_channels: int = 0
    prior_path: str = ""
    precision: str = "single"

    def __post_init__(self):
        self.blocks = tuple(int(b) for b in self.blocks)
        self.validate()

    def validate(self):
        if self.width < 1 or self.scales < 1:
            raise ConfigError("width and scales must be positive")
        if len(self.blocks) != 2 * self.scales + 1:
            raise ConfigError(f"blocks needs {2 * self.scales + 1} entries for {self.scales} scales, "
                              f"got {len(self.blocks)}")
        if any(b < 0 for b in self.blocks):
            raise ConfigError("block counts must be non-negative")
        if self.rank < 0:
            raise ConfigError("rank must be non-negative")
        if self.experts < 1 or self.routers < 1:
            raise ConfigError("experts and routers must be positive")
        if self.router_mode not in ROUTER_MODES:
            raise ConfigError(f"router_mode must be one of {ROUTER_MODES}")
        if self.prior not in PRIOR_VARIANTS:
            raise ConfigError(f"prior must be one of {PRIOR_VARIANTS}")
        if self.prior_channels < 0:
            raise ConfigError("prior_channels must be non-negative")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {tuple(PRECISIONS)}")

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    @property
    def multiple(self):
        return 2 ** (self.scales - 1)

    def stage_widths(self):
        return [self.width * 2 ** s for s in range(self.scales)]

    @classmethod
    def full_size(cls, **overrides):
        base = dict(width=32, blocks=(1, 1, 1, 28, 1, 1, 1, 1, 1), rank=4, experts=5, routers=4)
        base.update(overrides)
        return cls(**base)


class DHBlock(nn.Module):
    """``n_blocks`` VBlocks followed by one DDRE (omitted when ``ddre`` is None)."""

    def __init__(self, channels, n_blocks, rank, ddre=None):
        super().__init__()
        self.channels = channels
        self.vblocks = nn.ModuleList(VBlock(channels, rank) for _ in range(n_blocks))
        self.ddre = ddre

    def forward(self, x, prior=None):
        for block in self.vblocks:
            x = block(x)
        if self.ddre is not None:
            x = self.ddre(x, prior)
        return x

    def macs(self, h, w):
        total = sum(b.macs(h, w) for b in self.vblocks)
        return total + (self.ddre.macs(h, w) if self.ddre is not None else 0)


def dhblock_forward(x, blocks, ddre, prior=None):
    for block in blocks:
        x = block(x)
    return ddre(x, prior) if ddre is not None else x


class Upsample(nn.Module):
    """1x1 conv to twice the channels, then depth-to-space by 2 (net: half the channels)."""

    def __init__(self, channels):
        super().__init__()
        self.conv = make_conv(channels, 2 * channels, 1)

    def forward(self, x):
        return pixel_shuffle(conv2d(x, self.conv), 2)


class DHNet(nn.Module):
    def __init__(self, config=None, provider=None):
        super().__init__()
        self.config = config = config or NetworkConfig()
        self.provider = provider if provider is not None else NoPrior(
            config.prior_channels if config.prior == "none" else 0)
        if self.provider.channels != config.prior_channels:
            raise ConfigError(f"prior provider emits {self.provider.channels} channels, "
                              f"config declares {config.prior_channels}")
        widths = config.stage_widths()
        n = config.scales
        blocks = config.blocks

        def dhblock(c, count):
            ddre = None
            if config.ddre:
                ddre = DDRE(c, config.prior_channels, config.experts, config.routers, config.router_mode)
            return DHBlock(c, count, config.rank, ddre)

        self.intro = make_conv(3, widths[0], 3)
        self.encoders = nn.ModuleList(dhblock(widths[s], blocks[s]) for s in range(n))
        self.downs = nn.ModuleList(make_conv(widths[s], widths[s + 1], 3, stride=2) for s in range(n - 1))
        self.middle = dhblock(widths[-1], blocks[n])
        # decoders[i] runs at stage n-1-i (deep to shallow)
        self.decoders = nn.ModuleList(dhblock(widths[n - 1 - i], blocks[n + 1 + i]) for i in range(n))
        self.ups = nn.ModuleList(Upsample(widths[n - 1 - i]) for i in range(n - 1))
        self.outro = make_conv(widths[0], 3, 3)

    def forward(self, image):
        if image.dim() != 4 or image.shape[1] != 3:
            raise ConfigError(f"expected an (N, 3, H, W) image, got {tuple(image.shape)}")
        m = self.config.multiple
        if image.shape[2] % m or image.shape[3] % m:
            raise ConfigError(f"image size {tuple(image.shape[2:])} must be divisible by {m}")
        prior = self.provider.features(image)
        at = lambda x: self.provider.at(prior, x.shape[-2:])

        x = conv2d(image, self.intro)
        skips = []
        for s, enc in enumerate(self.encoders):
            x = enc(x, at(x))
            skips.append(x)
            if s < len(self.downs):
                x = conv2d(x, self.downs[s])
        x = self.middle(x, at(x))
        for i, dec in enumerate(self.decoders):
            x = x + skips[-1 - i]
            x = dec(x, at(x))
            if i < len(self.ups):
                x = self.ups[i](x)
        return conv2d(x, self.outro) + image

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def macs_breakdown(self, h, w):
        cfg = self.config
        widths = cfg.stage_widths()
        out = {"intro": 3 * widths[0] * 9 * h * w}
        for s, enc in enumerate(self.encoders):
            out[f"encoders.{s}"] = enc.macs(h >> s, w >> s)
        for s in range(cfg.scales - 1):
            out[f"downs.{s}"] = widths[s] * widths[s + 1] * 9 * (h >> (s + 1)) * (w >> (s + 1))
        deep = cfg.scales - 1
        out["middle"] = self.middle.macs(h >> deep, w >> deep)
        for i, dec in enumerate(self.decoders):
            s = deep - i
            out[f"decoders.{i}"] = dec.macs(h >> s, w >> s)
        for i in range(cfg.scales - 1):
            s = deep - i
            out[f"ups.{i}"] = widths[s] * 2 * widths[s] * (h >> s) * (w >> s)
        out["outro"] = widths[0] * 3 * 9 * h * w
        return out


def receptive_field_radius(config):
    """Upper bound, in input pixels, on how far any local operator path reaches.

    Global pooling (channel gates, routers) is excluded.
    """
    largest_expert = 2 * (config.experts - 1) + 1 if config.ddre else 1
    per_vblock = 2          # 3x3 pre-depth and 3x3 Volterra kernels
    per_ddre = largest_expert // 2
    r = 1                   # intro conv
    n = config.scales
    for s in range(n):
        r += (config.blocks[s] * per_vblock + per_ddre) * 2 ** s
        if s < n - 1:
            r += 2 ** s      # stride-2 3x3 conv, evaluated at the finer grid
    r += (config.blocks[n] * per_vblock + per_ddre) * 2 ** (n - 1)
    for i in range(n):
        r += (config.blocks[n + 1 + i] * per_vblock + per_ddre) * 2 ** (n - 1 - i)
    return r + 1            # outro conv


@dataclass
class ComplexityReport:
    params: int
    macs: int
    resolution: tuple
    breakdown: dict = field(default_factory=dict)   # name -> (params, macs)

    def format(self):
        h, w = self.resolution
        lines = [f"{'module':<14}{'params':>14}{'MACs':>18}"]
        for name, (p, m) in self.breakdown.items():
            lines.append(f"{name:<14}{p:>14,d}{m:>18,d}")
        lines.append(f"{'total':<14}{self.params:>14,d}{self.macs:>18,d}")
        lines.append(f"params {self.params} ({self.params / 1e6:.3f} M); "
                     f"MACs at {h}x{w}: {self.macs} ({self.macs / 1e9:.3f} G)")
        return "\n".join(lines)


def count_params_macs(config, resolution=(256, 256)):
    h, w = resolution
    if h % config.multiple or w % config.multiple:
        raise ConfigError(f"resolution {resolution} must be divisible by {config.multiple}")
    with torch.device("meta"):
        net = DHNet(config, NoPrior(config.prior_channels))
    macs = net.macs_breakdown(h, w)
    breakdown = {}
    for name, child in net.named_children():
        if isinstance(child, nn.ModuleList):
            for i, sub in enumerate(child):
                key = f"{name}.{i}"
                breakdown[key] = (sum(p.numel() for p in sub.parameters()), macs[key])
        else:
            breakdown[name] = (sum(p.numel() for p in child.parameters()), macs[name])
    return ComplexityReport(
        params=sum(p for p, _ in breakdown.values()),
        macs=sum(m for _, m in breakdown.values()),
        resolution=(h, w),
        breakdown=breakdown,
    )


def pad_to_multiple(image, multiple):
    h, w = image.shape[-2:]
    ph, pw = -h % multiple, -w % multiple
    if not (ph or pw):
        return image, (h, w)
    return F.pad(image, (0, pw, 0, ph), mode="reflect"), (h, w)


def restore(net, image):
    """Inference with reflect padding to the network's size multiple, cropped back."""
    padded, (h, w) = pad_to_multiple(image, net.config.multiple)
    return net(padded)[..., :h, :w]


def config_fields():
    return {f.name: f for f in fields(NetworkConfig)}
