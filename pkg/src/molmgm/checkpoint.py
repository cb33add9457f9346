"""MG3D checkpoint container.

Layout (all integers little-endian)::

    b"MG3D" | version u32 | count u64
    count x ( name_len u32 | name utf-8 | rank u8 | dims u64 x rank | float32 x prod(dims) )
    crc32 u32 over every preceding byte

Training runs in float64, so a save/load cycle rounds to float32. Loading then
saving again reproduces the file byte for byte.
"""
from __future__ import annotations

import struct
import zlib
from collections import OrderedDict
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"MG3D"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode_checkpoint(state: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<IQ", VERSION, len(state))]
    for name, arr in state.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        if arr.ndim > 255:
            raise CheckpointError(f"{name}: rank {arr.ndim} does not fit in u8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode_checkpoint(blob: bytes) -> "OrderedDict[str, np.ndarray]":
    """Parse and verify; arrays come back as float32."""
    if len(blob) < 4 + 12 + 4:
        raise CheckpointError("file too short for an MG3D checkpoint")
    if blob[:4] != MAGIC:
        raise CheckpointError(f"bad magic {blob[:4]!r}")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError("CRC mismatch: checkpoint is corrupt")
    version, count = struct.unpack_from("<IQ", body, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 16
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", body, pos)
            pos += 4
            name = body[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<B", body, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}Q", body, pos)
            pos += 8 * rank
            size = int(np.prod(dims, dtype=np.int64)) if rank else 1
            if pos + 4 * size > len(body):
                raise CheckpointError(f"{name}: payload runs past end of file")
            arr = np.frombuffer(body, dtype="<f4", count=size, offset=pos).reshape(dims)
            pos += 4 * size
            if name in out:
                raise CheckpointError(f"duplicate tensor name {name!r}")
            out[name] = arr.astype(np.float32)
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    if pos != len(body):
        raise CheckpointError(f"{len(body) - pos} trailing bytes after last entry")
    return out


def save_checkpoint(path: str | Path, state: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_checkpoint(state))


def load_checkpoint(path: str | Path) -> "OrderedDict[str, np.ndarray]":
    """Read a checkpoint and widen every tensor to float64 for the runtime."""
    raw = decode_checkpoint(Path(path).read_bytes())
    return OrderedDict((k, v.astype(np.float64)) for k, v in raw.items())


def inspect_checkpoint(path: str | Path) -> list[tuple[str, tuple[int, ...]]]:
    return [(k, tuple(v.shape)) for k, v in decode_checkpoint(Path(path).read_bytes()).items()]


def subset(state: Mapping[str, np.ndarray], prefix: str) -> "OrderedDict[str, np.ndarray]":
    """Entries under ``prefix`` with the prefix stripped."""
    return OrderedDict((k[len(prefix):], v) for k, v in state.items() if k.startswith(prefix))
