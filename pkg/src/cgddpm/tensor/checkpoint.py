"""CKPT1 tensor container.

Layout (all integers u32 little-endian)::

    b"CKPT1"
    header length, UTF-8 JSON header (free-form metadata, "{}" when unused)
    tensor count
    per tensor: name length, UTF-8 name, rank, extents..., float32 LE payload
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"CKPT1"


class CheckpointError(ValueError):
    pass


def write_tensor_record(buf: bytearray, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    buf += struct.pack("<I", len(raw)) + raw
    buf += struct.pack("<I", arr.ndim)
    buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
    buf += np.ascontiguousarray(arr, dtype="<f4").tobytes()


def read_tensor_record(data: bytes, pos: int) -> tuple[str, np.ndarray, int]:
    try:
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<I", data, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
    except struct.error as exc:
        raise CheckpointError("truncated tensor record") from exc
    count = int(np.prod(shape)) if rank else 1
    end = pos + 4 * count
    if end > len(data):
        raise CheckpointError(f"truncated payload for tensor '{name}'")
    arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos).astype(np.float32).reshape(shape)
    return name, arr, end


def dumps(tensors: dict[str, np.ndarray], header: dict | None = None) -> bytes:
    buf = bytearray(MAGIC)
    meta = json.dumps(header or {}, sort_keys=True).encode("utf-8")
    buf += struct.pack("<I", len(meta)) + meta
    buf += struct.pack("<I", len(tensors))
    for name in tensors:
        write_tensor_record(buf, name, np.asarray(tensors[name]))
    return bytes(buf)


def loads(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if data[:5] != MAGIC:
        raise CheckpointError("bad magic")
    pos = 5
    try:
        (hlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        header = json.loads(data[pos:pos + hlen].decode("utf-8"))
        pos += hlen
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
    except (struct.error, ValueError) as exc:
        raise CheckpointError("corrupt checkpoint header") from exc
    tensors = {}
    for _ in range(count):
        name, arr, pos = read_tensor_record(data, pos)
        tensors[name] = arr
    return tensors, header


def save(path, tensors: dict[str, np.ndarray], header: dict | None = None) -> None:
    Path(path).write_bytes(dumps(tensors, header))


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    return loads(Path(path).read_bytes())
