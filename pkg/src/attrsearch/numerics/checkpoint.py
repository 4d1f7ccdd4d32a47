"""Flat binary container of named float32 tensors.

Layout (all integers unsigned 32-bit little-endian):

    magic "ATCK" | version | tensor count
    per tensor: name length | name bytes (UTF-8) | rank | extents... |
                payload as little-endian float32

Round-trips are bit-exact; entry order is preserved.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Dict, Mapping, Union

import numpy as np

from .tensor import Tensor, UsageError

MAGIC = b"ATCK"
VERSION = 1


class CheckpointError(UsageError):
    pass


def save_tensors(path, named: Mapping[str, Union[Tensor, np.ndarray]]) -> None:
    blobs = []
    for name, value in named.items():
        arr = value.array if isinstance(value, Tensor) else np.asarray(value)
        if arr.dtype != np.float32:
            raise CheckpointError(f"{name!r}: checkpoint payload must be "
                                  f"float32, got {arr.dtype}")
        nb = name.encode("utf-8")
        head = struct.pack("<I", len(nb)) + nb + struct.pack("<I", arr.ndim)
        head += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blobs.append(head + np.ascontiguousarray(arr).astype("<f4").tobytes())
    payload = MAGIC + struct.pack("<II", VERSION, len(blobs)) + b"".join(blobs)
    Path(path).write_bytes(payload)


def load_tensors(path) -> Dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a tensor checkpoint")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    out: Dict[str, np.ndarray] = {}
    offset = 12
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        name = raw[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        extents = struct.unpack_from(f"<{rank}I", raw, offset)
        offset += 4 * rank
        n = int(np.prod(extents, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=offset).copy()
        offset += 4 * n
        out[name] = arr.reshape(extents).astype(np.float32, copy=False)
    if offset != len(raw):
        raise CheckpointError(f"{path}: trailing bytes after last tensor")
    return out
