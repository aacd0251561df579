"""Dataset manifests, image I/O, synthetic dataset generation and patch sampling.

A manifest is a text file with one ``sharp_path<TAB>blur_path`` pair per
line; relative paths resolve against the manifest's directory. Lines starting
with ``#`` carry metadata as ``# key=value`` (split, format, blurspec hash).
"""
import hashlib
import io
import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from ..errors import ConfigError
from .blur import BlurSpec, random_scene, synth_blur
from .checkpoint import write_atomic


def read_image(path):
    """RGB PNG -> ``(H, W, 3)`` float32 in [0, 1]."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def to_uint8(img):
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_image(path, img):
    arr = img if img.dtype == np.uint8 else to_uint8(img)
    buf = io.BytesIO()
    Image.fromarray(arr, "RGB").save(buf, format="PNG")
    write_atomic(path, buf.getvalue())


@dataclass
class Manifest:
    pairs: list = field(default_factory=list)       # (sharp_path, blur_path), absolute
    split: str = ""
    image_format: str = "png"
    blurspec_hash: str = ""

    def __len__(self):
        return len(self.pairs)

    def to_text(self, root):
        lines = [f"# split={self.split}", f"# format={self.image_format}",
                 f"# blurspec={self.blurspec_hash}"]
        for sharp, blur in self.pairs:
            lines.append(f"{os.path.relpath(sharp, root)}\t{os.path.relpath(blur, root)}")
        return "\n".join(lines) + "\n"

    def save(self, path):
        write_atomic(path, self.to_text(os.path.dirname(os.path.abspath(path))).encode())

    @classmethod
    def load(cls, path, check=True):
        root = os.path.dirname(os.path.abspath(path))
        m = cls()
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line.strip():
                    continue
                if line.startswith("#"):
                    key, _, value = line[1:].strip().partition("=")
                    if key == "split":
                        m.split = value
                    elif key == "format":
                        m.image_format = value
                    elif key == "blurspec":
                        m.blurspec_hash = value
                    continue
                parts = line.split("\t")
                if len(parts) != 2:
                    raise ConfigError(f"{path}:{lineno}: expected sharp_path<TAB>blur_path")
                m.pairs.append(tuple(os.path.normpath(os.path.join(root, p)) for p in parts))
        if check:
            for sharp, blur in m.pairs:
                for p in (sharp, blur):
                    if not os.path.exists(p):
                        raise ConfigError(f"manifest {path} references missing file {p}")
        return m


def generate_dataset(out_dir, data_cfg):
    """Write ``train``/``test`` splits of synthetic region-blurred pairs under ``out_dir``.

    Returns ``{split: manifest_path}``. Every image draws from its own child
    seed of ``data_cfg.seed``, so output is identical across runs.
    """
    children = np.random.SeedSequence(data_cfg.seed).spawn(data_cfg.train_images + data_cfg.test_images)
    counts = {"train": data_cfg.train_images, "test": data_cfg.test_images}
    labels = {}
    manifests = {}
    offset = 0
    for split, count in counts.items():
        manifest = Manifest(split=split)
        digests = hashlib.sha256()
        for i in range(count):
            seq = children[offset + i]
            scene_seed, blur_seed = seq.spawn(2)
            sharp = random_scene(np.random.default_rng(scene_seed), data_cfg.size)
            spec = BlurSpec.random(int(blur_seed.generate_state(1)[0]), *data_cfg.grid,
                                   max_length=data_cfg.max_length, band=data_cfg.band,
                                   identity_prob=data_cfg.identity_prob)
            blurred = synth_blur(sharp / 255.0, spec)
            name = f"{i:04d}.png"
            sharp_path = os.path.join(out_dir, split, "sharp", name)
            blur_path = os.path.join(out_dir, split, "blur", name)
            write_image(sharp_path, sharp)
            write_image(blur_path, blurred)
            manifest.pairs.append((sharp_path, blur_path))
            labels[f"{split}/{name}"] = {"blurspec": spec.digest(), "regions": spec.labels()}
            digests.update(spec.digest().encode())
        offset += count
        manifest.blurspec_hash = digests.hexdigest()[:16]
        path = os.path.join(out_dir, f"{split}.manifest")
        manifest.save(path)
        manifests[split] = path
    write_atomic(os.path.join(out_dir, "labels.json"),
                 (json.dumps(labels, indent=1, sort_keys=True) + "\n").encode())
    return manifests


def load_pairs(manifest):
    """Decode every pair to ``(blur, sharp)`` float32 ``(3, H, W)`` arrays."""
    out = []
    for sharp_path, blur_path in manifest.pairs:
        sharp, blur = read_image(sharp_path), read_image(blur_path)
        if sharp.shape != blur.shape:
            raise ConfigError(f"size mismatch between {sharp_path} and {blur_path}")
        out.append((blur.transpose(2, 0, 1).copy(), sharp.transpose(2, 0, 1).copy()))
    return out


def sample_patch(pair, size, rng, flip=True):
    """Same random crop (and same random flips) of both ``(C, H, W)`` images of a pair."""
    blur, sharp = pair
    h, w = blur.shape[-2:]
    if h < size or w < size:
        raise ConfigError(f"image {h}x{w} is smaller than patch size {size}")
    y = int(rng.integers(0, h - size + 1))
    x = int(rng.integers(0, w - size + 1))
    hflip = vflip = False
    if flip:
        hflip = bool(rng.random() < 0.5)
        vflip = bool(rng.random() < 0.5)
    return tuple(apply_flips(a[..., y:y + size, x:x + size], hflip, vflip) for a in (blur, sharp))


def apply_flips(a, hflip, vflip):
    if hflip:
        a = a[..., :, ::-1]
    if vflip:
        a = a[..., ::-1, :]
    return np.ascontiguousarray(a)
