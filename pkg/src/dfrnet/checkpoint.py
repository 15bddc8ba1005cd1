"""Versioned binary parameter container.

Layout (little endian)::

    magic   8 bytes  b"DFRCKPT\\0"
    version u32
    config  u64 length + UTF-8 JSON
    count   u32
    entries count x (u16 name length, UTF-8 name, u8 ndim, ndim x u64 shape, float64 values)
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"DFRCKPT\0"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    config: dict = field(default_factory=dict)
    version: int = VERSION

    def __eq__(self, other):
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return (self.version == other.version and self.config == other.config
                and list(self.params) == list(other.params)
                and all(_same_bits(self.params[k], other.params[k]) for k in self.params))


def _same_bits(a: np.ndarray, b: np.ndarray) -> bool:
    a, b = np.asarray(a, dtype="<f8"), np.asarray(b, dtype="<f8")
    return a.shape == b.shape and a.tobytes() == b.tobytes()


def dumps(ckpt: Checkpoint) -> bytes:
    out = [MAGIC, struct.pack("<I", ckpt.version)]
    cfg = json.dumps(ckpt.config, sort_keys=True).encode("utf-8")
    out += [struct.pack("<Q", len(cfg)), cfg, struct.pack("<I", len(ckpt.params))]
    for name, arr in ckpt.params.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointError(f"parameter name too long: {name[:40]}...")
        a = np.asarray(arr, dtype="<f8")
        if a.ndim > 0xFF:
            raise CheckpointError(f"{name}: too many dimensions")
        out += [struct.pack("<H", len(raw)), raw, struct.pack("<B", a.ndim)]
        out += [struct.pack(f"<{a.ndim}Q", *a.shape), a.tobytes()]
    return b"".join(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint at byte {self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(data: bytes) -> Checkpoint:
    r = _Reader(bytes(data))
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic header)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (n_cfg,) = r.unpack("<Q")
    try:
        config = json.loads(r.take(n_cfg).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt config block: {exc}") from None
    (count,) = r.unpack("<I")
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n_name,) = r.unpack("<H")
        name = r.take(n_name).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}Q")
        size = int(np.prod(shape, dtype=np.int64))
        values = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
        if name in params:
            raise CheckpointError(f"duplicate parameter {name!r}")
        params[name] = values
    if r.pos != len(r.data):
        raise CheckpointError(f"{len(r.data) - r.pos} trailing bytes after last entry")
    return Checkpoint(params, config, version)


def save(path: str | os.PathLike, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(dumps(ckpt))


def load(path: str | os.PathLike) -> Checkpoint:
    return loads(Path(path).read_bytes())
