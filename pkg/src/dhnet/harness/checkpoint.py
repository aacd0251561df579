"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"DHNETCKP"                      8-byte magic
    u32 version
    u32 n, n bytes                   UTF-8 config text (INI, see harness.config)
    repeated until EOF:
        u32 n, n bytes               record name (UTF-8)
        u8  dtype tag                0=f32 1=f64 2=u8 3=i64
        u8  rank
        u32 * rank                   dims
        raw element data             C order, little-endian

Parameters are stored as ``param.<name>``, Adam moments as ``adam.m.<name>``
and ``adam.v.<name>``, frozen prior weights as ``prior.<name>``; the step
counter and numpy RNG state live in the ``[state]`` config section and the
torch RNG state in the ``rng.torch`` record.
"""
import configparser
import io
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np
import torch

from ..ddre import NoPrior
from ..errors import BadMagicError, ShapeMismatchError, TruncatedCheckpointError, VersionMismatchError
from ..network import DHNet, NetworkConfig
from . import config as cfgmod

MAGIC = b"DHNETCKP"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1"), 3: np.dtype("<i8")}


def _tag(arr):
    for tag, dt in DTYPES.items():
        if arr.dtype.kind == dt.kind and arr.dtype.itemsize == dt.itemsize:
            return tag
    raise TypeError(f"unsupported dtype {arr.dtype}")


def encode(config_text, records):
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    text = config_text.encode("utf-8")
    buf.write(struct.pack("<I", len(text)))
    buf.write(text)
    for name, arr in records.items():
        arr = np.ascontiguousarray(arr)
        tag = _tag(arr)
        raw_name = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<BB", tag, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.astype(DTYPES[tag], copy=False).tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise TruncatedCheckpointError(f"checkpoint truncated while reading {what} "
                                           f"at byte {self.pos} (size {len(self.data)})")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(data):
    """Return ``(config_text, records)``; raises a distinct error per failure kind."""
    r = _Reader(data)
    if len(data) < len(MAGIC):
        raise TruncatedCheckpointError("file shorter than the magic header")
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise BadMagicError("not a DHNet checkpoint (bad magic)")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise VersionMismatchError(version, VERSION)
    (n,) = r.unpack("<I", "config length")
    text = r.take(n, "config block").decode("utf-8")
    records = {}
    while r.pos < len(data):
        (n,) = r.unpack("<I", "record name length")
        name = r.take(n, "record name").decode("utf-8")
        tag, rank = r.unpack("<BB", f"header of {name}")
        if tag not in DTYPES:
            raise TruncatedCheckpointError(f"record {name} has unknown dtype tag {tag}")
        dims = r.unpack(f"<{rank}I", f"dims of {name}")
        dtype = DTYPES[tag]
        count = int(np.prod(dims, dtype=np.int64))
        raw = r.take(count * dtype.itemsize, f"data of {name}")
        records[name] = np.frombuffer(raw, dtype=dtype).reshape(dims).copy()
    return text, records


def write_atomic(path, data):
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass
class Checkpoint:
    network: NetworkConfig
    params: dict                                   # name -> np.ndarray
    train: "cfgmod.TrainConfig" = None
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)
    prior: dict = field(default_factory=dict)      # frozen prior weights / feature map
    step: int = 0
    numpy_rng: dict = None                         # bit_generator.state of a PCG64 generator
    torch_rng: np.ndarray = None
    losses: np.ndarray = None

    def config_text(self):
        run = cfgmod.RunConfig(network=self.network, train=self.train or cfgmod.TrainConfig())
        text = cfgmod.to_text(run, ("network", "train"))
        state = [f"[state]", f"step = {self.step}", f"has_train = {'true' if self.train else 'false'}"]
        if self.numpy_rng is not None:
            s = self.numpy_rng
            state += [f"numpy_bit_generator = {s['bit_generator']}",
                      f"numpy_state = {s['state']['state']}",
                      f"numpy_inc = {s['state']['inc']}",
                      f"numpy_has_uint32 = {s['has_uint32']}",
                      f"numpy_uinteger = {s['uinteger']}"]
        return text + "\n".join(state) + "\n"

    def records(self):
        out = {f"param.{k}": v for k, v in self.params.items()}
        out.update({f"adam.m.{k}": v for k, v in self.adam_m.items()})
        out.update({f"adam.v.{k}": v for k, v in self.adam_v.items()})
        out.update({f"prior.{k}": v for k, v in self.prior.items()})
        if self.torch_rng is not None:
            out["rng.torch"] = self.torch_rng
        if self.losses is not None:
            out["log.loss"] = self.losses
        return out

    def to_bytes(self):
        return encode(self.config_text(), self.records())

    @classmethod
    def from_bytes(cls, data):
        text, records = decode(data)
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        parser.read_string(text)
        state = dict(parser.items("state")) if parser.has_section("state") else {}
        parser.remove_section("state")
        buf = io.StringIO()
        parser.write(buf)
        run = cfgmod.from_text(buf.getvalue())
        ckpt = cls(network=run.network, params={},
                   train=run.train if state.get("has_train") == "true" else None,
                   step=int(state.get("step", 0)))
        if "numpy_state" in state:
            ckpt.numpy_rng = {
                "bit_generator": state["numpy_bit_generator"],
                "state": {"state": int(state["numpy_state"]), "inc": int(state["numpy_inc"])},
                "has_uint32": int(state["numpy_has_uint32"]),
                "uinteger": int(state["numpy_uinteger"]),
            }
        groups = {"param.": ckpt.params, "adam.m.": ckpt.adam_m, "adam.v.": ckpt.adam_v,
                  "prior.": ckpt.prior}
        for name, arr in records.items():
            if name == "rng.torch":
                ckpt.torch_rng = arr
            elif name == "log.loss":
                ckpt.losses = arr
            else:
                for prefix, target in groups.items():
                    if name.startswith(prefix):
                        target[name[len(prefix):]] = arr
                        break
        ckpt.check_shapes()
        return ckpt

    def check_shapes(self):
        """Compare stored parameters with the architecture the embedded config describes."""
        with torch.device("meta"):
            net = DHNet(self.network, NoPrior(self.network.prior_channels))
        expected = {n: tuple(p.shape) for n, p in net.named_parameters()}
        missing = sorted(set(expected) - set(self.params))
        extra = sorted(set(self.params) - set(expected))
        if missing or extra:
            raise ShapeMismatchError(f"parameter names differ from config: missing {missing[:3]}, "
                                     f"unexpected {extra[:3]}")
        for name, shape in expected.items():
            if tuple(self.params[name].shape) != shape:
                raise ShapeMismatchError(f"{name}: stored shape {tuple(self.params[name].shape)}, "
                                         f"config implies {shape}")
            for moments in (self.adam_m, self.adam_v):
                if name in moments and tuple(moments[name].shape) != shape:
                    raise ShapeMismatchError(f"optimizer moment for {name} has wrong shape")


def save_checkpoint(ckpt, path):
    write_atomic(path, ckpt.to_bytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return Checkpoint.from_bytes(fh.read())


def load_feature_map(path, name="prior"):
    """Read a prior feature map stored as a record in the container format."""
    with open(path, "rb") as fh:
        _, records = decode(fh.read())
    if name not in records:
        raise KeyError(f"{path} has no record named {name!r}")
    return records[name]


def save_feature_map(path, feature_map, name="prior"):
    write_atomic(path, encode("[state]\n", {name: np.asarray(feature_map)}))
