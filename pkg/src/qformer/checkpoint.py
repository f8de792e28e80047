"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic        8 bytes   b"QFORMER\\x00"
    version      u32
    config_len   u32, then config_len bytes of UTF-8 JSON (sorted keys)
    num_params   u32
    per parameter:
        name_len u16, name (UTF-8)
        dtype    u8     0 = float32, 1 = float64
        ndim     u8, then ndim x u32 extents
        data     little-endian raw scalars, row-major
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import CheckpointError
from .model import ModelConfig, QFormer, config_json, parameter_shapes

MAGIC = b"QFORMER\x00"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAGS = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class MissingParameterError(CheckpointError, KeyError):
    def __str__(self):
        return self.args[0]


def dumps(model: QFormer) -> bytes:
    cfg = config_json(model.config).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(cfg)), cfg, struct.pack("<I", len(model.params))]
    for name, node in model.params.items():
        v = node.value
        tag = _TAGS.get(v.dtype)
        if tag is None:
            raise CheckpointError(f"unsupported dtype {v.dtype} for {name}")
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<BB{v.ndim}I", tag, v.ndim, *v.shape))
        parts.append(np.ascontiguousarray(v, dtype=_DTYPES[tag]).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated checkpoint: wanted {n} bytes at offset {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(buf: bytes) -> QFormer:
    r = _Reader(buf)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("not a QFormer checkpoint (bad magic bytes)")
    version, cfg_len = r.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version} unsupported (expected {VERSION})")
    try:
        cfg = ModelConfig.from_dict(json.loads(r.take(cfg_len).decode()))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt config block: {exc}") from None
    expected = parameter_shapes(cfg)
    (count,) = r.unpack("<I")
    params = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        tag, ndim = r.unpack("<BB")
        if tag not in _DTYPES:
            raise CheckpointError(f"unknown dtype tag {tag} for {name}")
        shape = r.unpack(f"<{ndim}I")
        dt = _DTYPES[tag]
        data = r.take(int(np.prod(shape, dtype=np.int64)) * dt.itemsize)
        if name not in expected:
            raise CheckpointError(f"unknown parameter name {name!r}")
        if tuple(shape) != expected[name]:
            raise CheckpointError(f"parameter {name!r} has shape {shape}, expected {expected[name]}")
        value = np.frombuffer(data, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
        params[name] = ad.param(value, name=name)
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after last parameter")
    missing = [k for k in expected if k not in params]
    if missing:
        raise MissingParameterError(f"checkpoint is missing parameter(s): {', '.join(missing)}")
    return QFormer(cfg, {k: params[k] for k in expected})


def save(model: QFormer, path) -> None:
    Path(path).write_bytes(dumps(model))


def load(path) -> QFormer:
    return loads(Path(path).read_bytes())
