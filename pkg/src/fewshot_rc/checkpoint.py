"""Versioned binary container for named float64 tensors plus a meta block.

Layout (all integers little-endian unsigned 32-bit):

    magic   4 bytes  b"FSRC"
    version u32      currently 1
    meta_len u32     byte length of the UTF-8 JSON meta block
    meta    bytes    canonical JSON (sorted keys, no whitespace)
    count   u32      number of tensors
    then per tensor, in the order written:
    name_len u32, name UTF-8 bytes,
    ndim u32, dims u32 * ndim,
    data   float64 little-endian, row-major

Canonical JSON and explicit little-endian floats make a checkpoint a pure
function of (meta, tensors): identical inputs give byte-identical files.
"""

from __future__ import annotations

import json
import struct
from typing import Mapping

import numpy as np

from .autodiff import Tensor

__all__ = ["CheckpointError", "save_checkpoint", "load_checkpoint", "MAGIC", "VERSION"]

MAGIC = b"FSRC"
VERSION = 1


class CheckpointError(Exception):
    """Unreadable or inconsistent checkpoint file."""


def save_checkpoint(path, tensors: Mapping[str, "Tensor | np.ndarray"],
                    meta: dict) -> None:
    """Write tensors and meta to ``path`` (atomic enough for a local run)."""
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", VERSION)
    meta_bytes = json.dumps(meta, sort_keys=True,
                            separators=(",", ":")).encode("utf-8")
    blob += struct.pack("<I", len(meta_bytes))
    blob += meta_bytes
    blob += struct.pack("<I", len(tensors))
    for name, t in tensors.items():
        # asarray, not ascontiguousarray: the latter promotes 0-d to 1-d
        arr = np.asarray(t.data if isinstance(t, Tensor) else t,
                         dtype=np.float64)
        nb = name.encode("utf-8")
        blob += struct.pack("<I", len(nb))
        blob += nb
        blob += struct.pack("<I", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += arr.astype("<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise CheckpointError("truncated checkpoint file")
        out = self.buf[self.off:self.off + n]
        self.off += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint; returns (named arrays in file order, meta)."""
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    meta_len = r.u32()
    try:
        meta = json.loads(r.take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt meta block: {e}") from e
    count = r.u32()
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = r.take(r.u32()).decode("utf-8")
        if name in tensors:
            raise CheckpointError(f"{path}: duplicate tensor name {name!r}")
        ndim = r.u32()
        dims = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        n = int(np.prod(dims, dtype=np.int64)) if ndim else 1
        data = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(dims)
        tensors[name] = data.astype(np.float64)
    if r.off != len(r.buf):
        raise CheckpointError(f"{path}: trailing bytes after last tensor")
    return tensors, meta
