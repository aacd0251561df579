"""PSNR / SSIM and the metrics report format."""
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import convolve2d

from .errors import ConfigError

PSNR_CAP = 100.0
SSIM_K1, SSIM_K2 = 0.01, 0.03
SSIM_WIN, SSIM_SIGMA = 11, 1.5


def _as_array(x):
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def psnr(pred, target, peak=1.0, cap=PSNR_CAP):
    pred, target = _as_array(pred), _as_array(target)
    if pred.shape != target.shape:
        raise ConfigError(f"shape mismatch: {pred.shape} vs {target.shape}")
    mse = np.mean((pred - target) ** 2)
    if mse == 0:
        return cap
    return min(cap, 10.0 * math.log10(peak * peak / mse))


def gaussian_window(size=SSIM_WIN, sigma=SSIM_SIGMA):
    g = np.exp(-((np.arange(size) - size // 2) ** 2) / (2 * sigma * sigma))
    g /= g.sum()
    return np.outer(g, g)


def to_gray(img):
    """Channel mean of a ``(C, H, W)`` image; 2-D input passes through."""
    img = _as_array(img)
    if img.ndim == 4:
        if img.shape[0] != 1:
            raise ConfigError("ssim takes one image at a time")
        img = img[0]
    return img.mean(0) if img.ndim == 3 else img


def ssim(pred, target, data_range=1.0):
    """Mean SSIM over all fully-contained 11x11 Gaussian windows of the gray images."""
    x, y = to_gray(pred), to_gray(target)
    if x.shape != y.shape:
        raise ConfigError(f"shape mismatch: {x.shape} vs {y.shape}")
    if min(x.shape) < SSIM_WIN:
        raise ConfigError(f"ssim needs images of at least {SSIM_WIN}x{SSIM_WIN}, got {x.shape}")
    win = gaussian_window()
    filt = lambda a: convolve2d(a, win, mode="valid")
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mx, my = filt(x), filt(y)
    vx = filt(x * x) - mx * mx
    vy = filt(y * y) - my * my
    cxy = filt(x * y) - mx * my
    num = (2 * mx * my + c1) * (2 * cxy + c2)
    den = (mx * mx + my * my + c1) * (vx + vy + c2)
    return float(np.mean(num / den))


@dataclass
class MetricsReport:
    names: list = field(default_factory=list)
    psnr: list = field(default_factory=list)
    ssim: list = field(default_factory=list)
    skipped: list = field(default_factory=list)     # (name, reason)

    def add(self, name, p, s):
        self.names.append(name)
        self.psnr.append(float(p))
        self.ssim.append(float(s))

    @property
    def count(self):
        return len(self.names)

    @property
    def mean_psnr(self):
        return float(np.mean(self.psnr)) if self.psnr else float("nan")

    @property
    def mean_ssim(self):
        return float(np.mean(self.ssim)) if self.ssim else float("nan")

    def to_text(self):
        """Tab-separated lines: a header, one row per image, then ``mean``/``count``/``skipped`` rows."""
        lines = ["image\tpsnr\tssim"]
        lines += [f"{n}\t{p!r}\t{s!r}" for n, p, s in zip(self.names, self.psnr, self.ssim)]
        lines.append(f"#mean\t{self.mean_psnr!r}\t{self.mean_ssim!r}")
        lines.append(f"#count\t{self.count}")
        lines += [f"#skipped\t{n}\t{why}" for n, why in self.skipped]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        report = cls()
        rows = text.splitlines()
        if not rows or rows[0] != "image\tpsnr\tssim":
            raise ValueError("not a metrics report")
        count = None
        for row in rows[1:]:
            parts = row.split("\t")
            if parts[0] == "#mean":
                continue
            if parts[0] == "#count":
                count = int(parts[1])
            elif parts[0] == "#skipped":
                report.skipped.append((parts[1], parts[2]))
            else:
                report.add(parts[0], float(parts[1]), float(parts[2]))
        if count != report.count:
            raise ValueError(f"report declares {count} images but lists {report.count}")
        return report

    def to_json(self):
        return json.dumps({
            "count": self.count,
            "mean": {"psnr": self.mean_psnr, "ssim": self.mean_ssim},
            "images": [{"name": n, "psnr": p, "ssim": s}
                       for n, p, s in zip(self.names, self.psnr, self.ssim)],
            "skipped": [{"name": n, "reason": r} for n, r in self.skipped],
        }, indent=2)
