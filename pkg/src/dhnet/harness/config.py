"""Run configuration and its canonical text form.

Config files are INI-style: ``[network]``, ``[train]`` and ``[data]`` sections
of ``key = value`` lines. Keys and value types are exactly the fields of
:class:`NetworkConfig`, :class:`TrainConfig` and :class:`DataConfig`; unknown
sections or keys are rejected. Tuples are written comma-separated, booleans
as ``true``/``false``.
"""
import configparser
import io
from dataclasses import dataclass, field, fields, replace

from ..errors import ConfigError
from ..network import NetworkConfig


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 4
    patch_size: int = 64
    lr_peak: float = 5e-4
    lr_floor: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    flip: bool = True
    seed: int = 0
    grad_clip: float = 1.0
    loss_reduction: str = "mean"
    log_every: int = 100

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1 or self.patch_size < 1:
            raise ConfigError("steps, batch_size and patch_size must be positive")
        if not 0 < self.lr_floor <= self.lr_peak:
            raise ConfigError("need 0 < lr_floor <= lr_peak")
        if self.loss_reduction not in ("mean", "global"):
            raise ConfigError("loss_reduction must be 'mean' or 'global'")


@dataclass
class DataConfig:
    train_images: int = 32
    test_images: int = 8
    size: int = 128
    grid: tuple = (2, 2)
    max_length: int = 15
    band: int = 8
    identity_prob: float = 0.15
    seed: int = 7

    def __post_init__(self):
        self.grid = tuple(int(g) for g in self.grid)
        if len(self.grid) != 2 or min(self.grid) < 1:
            raise ConfigError("grid must be two positive integers (rows, cols)")
        if not 1 <= self.max_length <= 31:
            raise ConfigError("max_length must lie in [1, 31]")
        if self.train_images < 0 or self.test_images < 0 or self.size < 8:
            raise ConfigError("bad dataset sizes")


@dataclass
class RunConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)


SECTIONS = {"network": NetworkConfig, "train": TrainConfig, "data": DataConfig}


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(raw, default, key):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() in ("true", "yes", "1", "on"):
                return True
            if raw.lower() in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def _section_values(obj):
    return {f.name: getattr(obj, f.name) for f in fields(obj)}


def to_text(cfg, sections=("network", "train", "data")):
    lines = []
    for name in sections:
        lines.append(f"[{name}]")
        for key, value in _section_values(getattr(cfg, name)).items():
            lines.append(f"{key} = {_format(value)}")
        lines.append("")
    return "\n".join(lines)


def apply(cfg, section, key, raw):
    if section not in SECTIONS:
        raise ConfigError(f"unknown config section {section!r}")
    current = getattr(cfg, section)
    values = _section_values(current)
    if key not in values:
        raise ConfigError(f"unknown config key {section}.{key}")
    new = replace(current, **{key: _parse(raw, values[key], f"{section}.{key}")})
    return replace(cfg, **{section: new})


def from_text(text, base=None):
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_file(io.StringIO(text))
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}") from None
    cfg = base or RunConfig()
    for section in parser.sections():
        for key, raw in parser.items(section):
            cfg = apply(cfg, section, key, raw)
    return cfg


def load(path):
    with open(path, encoding="utf-8") as fh:
        return from_text(fh.read())


def apply_overrides(cfg, overrides):
    """Apply ``section.key=value`` strings."""
    for item in overrides or ():
        lhs, sep, raw = item.partition("=")
        section, dot, key = lhs.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        cfg = apply(cfg, section, key, raw)
    return cfg
