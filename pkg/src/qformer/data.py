"""Synthetic oriented-bar classification images.

Each image holds one anti-aliased bar; the label is the orientation bin. A
single small window's average intensity says nothing about orientation, so
the task rewards receptive fields that follow the bar.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError

_SPLITS = {"train": 0, "test": 1}


@dataclass(frozen=True)
class SynthSpec:
    image_size: int = 32
    num_classes: int = 4
    bar_length: tuple = (12.0, 20.0)
    bar_width: tuple = (2.0, 3.5)
    noise_sigma: float = 0.05
    seed: int = 0
    train_count: int = 2000
    test_count: int = 500
    # fraction of an orientation bin the angle may wander from the bin center
    angle_jitter: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "bar_length", tuple(float(v) for v in self.bar_length))
        object.__setattr__(self, "bar_width", tuple(float(v) for v in self.bar_width))
        bad = []
        if self.num_classes < 2:
            bad.append("num_classes must be >= 2")
        if self.image_size < 4:
            bad.append("image_size must be >= 4")
        lo, hi = self.bar_length
        if not 0 < lo <= hi or hi > self.image_size:
            bad.append(f"bar_length range {self.bar_length} must satisfy 0 < lo <= hi <= image_size")
        lo, hi = self.bar_width
        if not 0 < lo <= hi:
            bad.append(f"bar_width range {self.bar_width} must satisfy 0 < lo <= hi")
        if self.noise_sigma < 0:
            bad.append("noise_sigma must be >= 0")
        if self.train_count < 0 or self.test_count < 0:
            bad.append("counts must be >= 0")
        if not 0 <= self.angle_jitter < 1:
            bad.append("angle_jitter must be in [0, 1)")
        if bad:
            raise ConfigError("invalid synth spec: " + "; ".join(bad))

    def count(self, split: str) -> int:
        return self.train_count if split == "train" else self.test_count

    def to_dict(self):
        d = asdict(self)
        d["bar_length"], d["bar_width"] = list(self.bar_length), list(self.bar_width)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown synth spec keys: {unknown}")
        return cls(**d)


def render_bar(size: int, cx: float, cy: float, angle: float, length: float,
               width: float) -> np.ndarray:
    """Box-filtered bar coverage in [0, 1]; angle 0 is horizontal."""
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = xs - cx, ys - cy
    c, s = np.cos(angle), np.sin(angle)
    along = np.abs(dx * c + dy * s)
    across = np.abs(-dx * s + dy * c)
    cov_l = np.clip(length / 2 - along + 0.5, 0.0, 1.0)
    cov_w = np.clip(width / 2 - across + 0.5, 0.0, 1.0)
    return cov_l * cov_w


def sample(spec: SynthSpec, split: str, index: int) -> tuple[np.ndarray, int]:
    """One image and its label; keyed only on (seed, split, index)."""
    rng = np.random.default_rng([spec.seed, _SPLITS[split], index])
    label = index % spec.num_classes
    bin_width = np.pi / spec.num_classes
    angle = (label + spec.angle_jitter * rng.uniform(-0.5, 0.5)) * bin_width
    length = rng.uniform(*spec.bar_length)
    width = rng.uniform(*spec.bar_width)
    n = spec.image_size
    cx, cy = rng.uniform(0.3 * n, 0.7 * n - 1, size=2)
    img = render_bar(n, cx, cy, angle, length, width)
    if spec.noise_sigma > 0:
        img = img + rng.normal(0.0, spec.noise_sigma, img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32), label


def generate(spec: SynthSpec, split: str = "train") -> tuple[np.ndarray, np.ndarray]:
    """Images (n, H, W) float32 and labels (n,) uint16, class-balanced by index."""
    if split not in _SPLITS:
        raise ValueError(f"split must be one of {sorted(_SPLITS)}")
    n = spec.count(split)
    images = np.empty((n, spec.image_size, spec.image_size), dtype=np.float32)
    labels = np.empty(n, dtype=np.uint16)
    for i in range(n):
        images[i], labels[i] = sample(spec, split, i)
    return images, labels


def checksum(images: np.ndarray, labels: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(images, dtype="<f4").tobytes())
    h.update(np.ascontiguousarray(labels, dtype="<u2").tobytes())
    return h.hexdigest()


def write_split(path, images: np.ndarray, labels: np.ndarray) -> None:
    """Header (count, H, W) as u32, then f32 images, then u16 labels."""
    n, h, w = images.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<III", n, h, w))
        fh.write(np.ascontiguousarray(images, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(labels, dtype="<u2").tobytes())


def read_split(path) -> tuple[np.ndarray, np.ndarray]:
    buf = Path(path).read_bytes()
    if len(buf) < 12:
        raise ValueError(f"{path}: file too short for header")
    n, h, w = struct.unpack("<III", buf[:12])
    need = 12 + n * h * w * 4 + n * 2
    if len(buf) != need:
        raise ValueError(f"{path}: expected {need} bytes, found {len(buf)}")
    images = np.frombuffer(buf, dtype="<f4", count=n * h * w, offset=12).reshape(n, h, w)
    labels = np.frombuffer(buf, dtype="<u2", count=n, offset=12 + n * h * w * 4)
    return images.astype(np.float32), labels.astype(np.uint16)


def write_dataset(spec: SynthSpec, out_dir) -> dict:
    """Write train.bin, test.bin and spec.json; returns split checksums."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sums = {}
    for split in _SPLITS:
        images, labels = generate(spec, split)
        write_split(out / f"{split}.bin", images, labels)
        sums[split] = checksum(images, labels)
    (out / "spec.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
    return sums


def load_dataset(path) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Read a directory written by :func:`write_dataset`."""
    p = Path(path)
    return {split: read_split(p / f"{split}.bin") for split in _SPLITS if (p / f"{split}.bin").exists()}
