"""NPIW parameter files.

Layout (little-endian)::

    b"NPIW"  u32 version=1  u32 count
    count x { u16 name_len  name(utf-8)  u8 rank  u64 dims[rank]  f32 payload }
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"NPIW"
VERSION = 1


class CheckpointFormatError(ValueError):
    pass


def encode_weights(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_weights(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:4] != MAGIC:
        raise CheckpointFormatError("bad magic")
    try:
        version, count = struct.unpack_from("<II", buf, 4)
        if version != VERSION:
            raise CheckpointFormatError(f"unsupported version {version}")
        off = 12
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off : off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<B", buf, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}Q", buf, off)
            off += 8 * rank
            n = int(np.prod(dims, dtype=np.int64))
            if off + 4 * n > len(buf):
                raise CheckpointFormatError("truncated payload")
            out[name] = np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(dims).astype(np.float32)
            off += 4 * n
    except struct.error as exc:
        raise CheckpointFormatError(f"truncated header: {exc}") from exc
    if off != len(buf):
        raise CheckpointFormatError("trailing bytes after last tensor")
    return out


def save_weights(path, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_weights(tensors))


def load_weights(path) -> dict[str, np.ndarray]:
    return decode_weights(Path(path).read_bytes())
