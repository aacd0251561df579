"""Spatially varying synthetic motion blur.

An image is split into a grid of regions, each blurred with its own linear
motion kernel (or left sharp); neighbouring regions are cross-faded over a
band around each seam so the result has no hard discontinuities.
"""
import hashlib
import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage

from ..errors import ConfigError

MAX_LENGTH = 31


def motion_kernel(length, angle, subsample=16):
    """Normalized line kernel of ``length`` pixels at ``angle`` radians (anti-aliased)."""
    if not 1 <= length <= MAX_LENGTH:
        raise ConfigError(f"motion kernel length must lie in [1, {MAX_LENGTH}], got {length}")
    size = length if length % 2 else length + 1
    k = np.zeros((size, size))
    c = size // 2
    half = (length - 1) / 2
    t = np.linspace(-half, half, max(1, int(round(2 * half * subsample)) + 1))
    xs = c + t * math.cos(angle)
    ys = c - t * math.sin(angle)
    x0, y0 = np.floor(xs).astype(int), np.floor(ys).astype(int)
    fx, fy = xs - x0, ys - y0
    for dx, dy, wgt in ((0, 0, (1 - fx) * (1 - fy)), (1, 0, fx * (1 - fy)),
                        (0, 1, (1 - fx) * fy), (1, 1, fx * fy)):
        xi, yi = np.clip(x0 + dx, 0, size - 1), np.clip(y0 + dy, 0, size - 1)
        np.add.at(k, (yi, xi), wgt)
    return k / k.sum()


@dataclass(frozen=True)
class BlurSpec:
    """``regions`` is row-major, one ``(length, angle)`` or ``None`` (sharp) per cell."""
    rows: int = 1
    cols: int = 1
    regions: tuple = (None,)
    band: int = 0
    seed: int = None

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ConfigError("grid must have at least one row and column")
        if len(self.regions) != self.rows * self.cols:
            raise ConfigError(f"need {self.rows * self.cols} regions, got {len(self.regions)}")
        if self.band < 0:
            raise ConfigError("band must be non-negative")

    @classmethod
    def random(cls, seed, rows=2, cols=2, max_length=15, band=8, identity_prob=0.15):
        rng = np.random.default_rng(seed)
        regions = []
        for _ in range(rows * cols):
            if rng.random() < identity_prob:
                regions.append(None)
            else:
                length = int(rng.integers(3, max_length + 1)) if max_length >= 3 else max_length
                regions.append((length, float(rng.uniform(0, math.pi))))
        return cls(rows, cols, tuple(regions), band, seed)

    def kernels(self):
        return [None if r is None else motion_kernel(*r) for r in self.regions]

    def labels(self):
        return [{"row": i // self.cols, "col": i % self.cols,
                 "length": 0 if r is None else r[0], "angle": 0.0 if r is None else r[1]}
                for i, r in enumerate(self.regions)]

    def digest(self):
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


def _edges(n, parts):
    return np.round(np.linspace(0, n, parts + 1)).astype(int)


def _soft_membership(n, edges, band):
    """``(parts, n)`` weights along one axis: 1 inside a part, linear cross-fade of
    width ``band`` centred on each interior edge; columns sum to 1."""
    pos = np.arange(n) + 0.5
    out = np.zeros((len(edges) - 1, n))
    for i in range(len(edges) - 1):
        lo, hi = edges[i], edges[i + 1]
        if band:
            rise = np.clip((pos - lo) / band + 0.5, 0, 1) if i > 0 else 1.0
            fall = np.clip((hi - pos) / band + 0.5, 0, 1) if i < len(edges) - 2 else 1.0
        else:
            rise = (pos >= lo) if i > 0 else 1.0
            fall = (pos < hi) if i < len(edges) - 2 else 1.0
        out[i] = rise * fall
    return out


def blur_image(img, kernel):
    """Convolve every channel of an ``(H, W, C)`` image, mirror-reflecting at the borders."""
    return np.stack([ndimage.convolve(img[..., c], kernel, mode="mirror")
                     for c in range(img.shape[-1])], -1)


def synth_blur(sharp, spec):
    """Blur an ``(H, W, C)`` float image in [0, 1] according to ``spec``."""
    sharp = np.asarray(sharp, dtype=np.float64)
    if sharp.ndim != 3:
        raise ConfigError("synth_blur expects an (H, W, C) image")
    h, w = sharp.shape[:2]
    row_edges, col_edges = _edges(h, spec.rows), _edges(w, spec.cols)
    kernels = spec.kernels()
    for i, k in enumerate(kernels):
        if k is None:
            continue
        r, c = divmod(i, spec.cols)
        rh, rw = row_edges[r + 1] - row_edges[r], col_edges[c + 1] - col_edges[c]
        if k.shape[0] > rh or k.shape[1] > rw:
            raise ConfigError(f"kernel of size {k.shape[0]} exceeds region {r},{c} of size {rh}x{rw}")
    if all(k is None for k in kernels):
        return sharp.copy()
    rows = _soft_membership(h, row_edges, spec.band)
    cols = _soft_membership(w, col_edges, spec.band)
    out = np.zeros_like(sharp)
    cache = {}
    for i, k in enumerate(kernels):
        r, c = divmod(i, spec.cols)
        weight = np.outer(rows[r], cols[c])
        if not weight.any():
            continue
        key = spec.regions[i]
        if key not in cache:
            cache[key] = sharp if k is None else blur_image(sharp, k)
        out += weight[..., None] * cache[key]
    return np.clip(out, 0.0, 1.0)


def random_scene(rng, size=128):
    """Procedural sharp RGB image (uint8, ``(size, size, 3)``): gradient
    background, flat-coloured shapes, stripes and a few thin lines."""
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    theta = rng.uniform(0, 2 * math.pi)
    ramp = (np.cos(theta) * xx + np.sin(theta) * yy)
    ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-9)
    c0, c1 = rng.uniform(0, 1, 3), rng.uniform(0, 1, 3)
    base = c0 + ramp[..., None] * (c1 - c0)
    img = Image.fromarray(np.round(base * 255).astype(np.uint8))
    draw = ImageDraw.Draw(img)
    color = lambda: tuple(int(v) for v in rng.integers(0, 256, 3))
    for _ in range(int(rng.integers(6, 13))):
        kind = rng.integers(0, 4)
        x0, y0 = (int(v) for v in rng.integers(-size // 4, size, 2))
        sw, sh = (int(v) for v in rng.integers(size // 10, size // 2, 2))
        box = [x0, y0, x0 + sw, y0 + sh]
        if kind == 0:
            draw.rectangle(box, fill=color())
        elif kind == 1:
            draw.ellipse(box, fill=color())
        elif kind == 2:
            pts = [tuple(int(v) for v in rng.integers(0, size, 2)) for _ in range(3)]
            draw.polygon(pts, fill=color())
        else:
            period = int(rng.integers(3, 9))
            c_a, c_b = color(), color()
            vertical = rng.random() < 0.5
            for j in range(0, sw if vertical else sh, period):
                stripe = [x0 + j, y0, x0 + j + period // 2, y0 + sh] if vertical else \
                         [x0, y0 + j, x0 + sw, y0 + j + period // 2]
                draw.rectangle(stripe, fill=c_a if (j // period) % 2 else c_b)
    for _ in range(int(rng.integers(2, 6))):
        pts = [tuple(int(v) for v in rng.integers(0, size, 2)) for _ in range(2)]
        draw.line(pts, fill=color(), width=int(rng.integers(1, 3)))
    return np.asarray(img, dtype=np.uint8)
