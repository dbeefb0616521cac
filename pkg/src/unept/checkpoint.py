"""Portable binary checkpoints.

Layout, all integers little-endian::

    b"EPT1"  u32 version  u64 step  u32 count
    count x ( u32 name_len  name (UTF-8)  u32 rank  u64[rank] extents  f64[prod] payload )

Payloads are row-major little-endian float64, so files round-trip bitwise
across machines and languages.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np

MAGIC = b"EPT1"
VERSION = 1
PathLike = Union[str, Path]


class CheckpointError(ValueError):
    pass


def encode_checkpoint(tensors: Dict[str, np.ndarray], step: int) -> bytes:
    if step < 0:
        raise CheckpointError("step must be non-negative")
    parts = [MAGIC, struct.pack("<IQI", VERSION, step, len(tensors))]
    for name, array in tensors.items():
        raw = name.encode("utf-8")
        a = np.asarray(array, dtype="<f8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{a.ndim}Q", a.ndim, *a.shape))
        parts.append(np.ascontiguousarray(a).tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> Tuple[int, Dict[str, np.ndarray]]:
    view = memoryview(buf)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"truncated checkpoint: need {n} bytes at offset {pos}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise CheckpointError("bad magic; not a checkpoint")
    version, step, count = struct.unpack("<IQI", take(16))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    tensors: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        try:
            name = bytes(take(name_len)).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError("tensor name is not UTF-8") from exc
        if name in tensors:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        size = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(take(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
        tensors[name] = data
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes after the last tensor")
    return int(step), tensors


def save_checkpoint(path: PathLike, tensors: Dict[str, np.ndarray], step: int) -> None:
    Path(path).write_bytes(encode_checkpoint(tensors, step))


def load_checkpoint(path: PathLike) -> Tuple[int, Dict[str, np.ndarray]]:
    return decode_checkpoint(Path(path).read_bytes())
