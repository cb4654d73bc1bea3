"""Named-tensor checkpoint files.

Layout (all integers little-endian)::

    magic      8 bytes  b"BANCCKPT"
    version    u16
    count      u32
    per tensor:
        name_len  u16, name bytes (utf-8)
        rank      u8,  extents u32 * rank
        values    f32 * prod(extents)

Tensors are written in sorted name order so that identical contents always
produce identical bytes.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"BANCCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dump_tensors(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<HI", VERSION, len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f4", order="C")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def parse_tensors(blob: bytes) -> dict[str, np.ndarray]:
    view = memoryview(blob)
    pos = 0

    def take(n: int, what: str) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"truncated checkpoint: need {n} bytes for {what} at offset {pos}, have {len(view) - pos}")
        out = view[pos : pos + n]
        pos += n
        return out

    magic = bytes(take(8, "magic"))
    if magic != MAGIC:
        raise CheckpointError(f"bad magic at offset 0: expected {MAGIC!r}, found {magic!r}")
    version, count = struct.unpack("<HI", take(6, "header"))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} at offset 8")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        name = bytes(take(nlen, "name")).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1, f"rank of {name}"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, f"extents of {name}"))
        n = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(take(4 * n, f"values of {name}"), dtype="<f4").reshape(shape)
        out[name] = data.astype(np.float32)
    if pos != len(view):
        raise CheckpointError(f"trailing bytes after last tensor at offset {pos}")
    return out


def save_tensors(path: str | os.PathLike, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dump_tensors(tensors))


def load_tensors(path: str | os.PathLike) -> dict[str, np.ndarray]:
    return parse_tensors(Path(path).read_bytes())
