"""Named-tensor checkpoint files.

Layout (little endian): magic ``GSLD``, format version u32, tensor count
u32, then per tensor: name (u32 length + UTF-8), rank u32, dims u64 each,
raw f32 payload in row-major order.
"""
from __future__ import annotations

import os
import struct

import numpy as np

from gridslide._io import Reader, atomic_write_bytes, pack_string
from gridslide.errors import DataError
from gridslide.numerics.tensor import Tensor

MAGIC = b"GSLD"
VERSION = 1


def encode_checkpoint(tensors: dict[str, np.ndarray | Tensor]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name in sorted(tensors):
        arr = tensors[name]
        arr = arr.data if isinstance(arr, Tensor) else np.asarray(arr)
        parts.append(pack_string(name))
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes, source: str = "<buffer>", dtype=np.float64) -> dict[str, np.ndarray]:
    r = Reader(buf, source)
    r.expect_magic(MAGIC)
    version = r.u32()
    if version != VERSION:
        raise DataError(f"{source}: unsupported checkpoint version {version}")
    count = r.u32()
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = r.string()
        rank = r.u32()
        dims = r.unpack(f"<{rank}Q") if rank else ()
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(dims).astype(dtype)
        out[name] = arr
    if not r.at_end():
        raise DataError(f"{source}: trailing bytes after {count} tensors")
    return out


def save_checkpoint(path: str | os.PathLike, tensors: dict[str, np.ndarray | Tensor]) -> None:
    atomic_write_bytes(path, encode_checkpoint(tensors))


def load_checkpoint(path: str | os.PathLike, dtype=np.float64) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read(), str(path), dtype)
