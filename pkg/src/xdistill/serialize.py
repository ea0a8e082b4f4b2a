"""XTSR tensor files: ``b"XTSR"``, u32 rank, u32 extents, raw f32 payload (little-endian)."""

from __future__ import annotations

import os
import struct

import numpy as np

from .exceptions import FormatError

MAGIC = b"XTSR"


def to_bytes(array) -> bytes:
    arr = np.asarray(getattr(array, "data", array))
    header = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def from_bytes(buf: bytes) -> np.ndarray:
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise FormatError("missing XTSR magic")
    (rank,) = struct.unpack_from("<I", buf, 4)
    off = 8 + 4 * rank
    if len(buf) < off:
        raise FormatError("truncated XTSR header")
    shape = struct.unpack_from(f"<{rank}I", buf, 8)
    n = int(np.prod(shape)) if rank else 1
    if len(buf) != off + 4 * n:
        raise FormatError(f"XTSR payload has {len(buf) - off} bytes, expected {4 * n}")
    return np.frombuffer(buf, dtype="<f4", count=n, offset=off).astype(np.float32).reshape(shape)


def save(path: str | os.PathLike, array) -> None:
    """Write ``array`` as float32; float64 input is rounded."""
    with open(path, "wb") as fh:
        fh.write(to_bytes(array))


def load(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
