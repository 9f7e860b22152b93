"""Flat binary tensor format.

Layout: ``b"E2TS"``, version ``u16``, rank ``u16``, ``rank`` dims as
``u64``, then the elements as little-endian float32 in row-major order.
"""
from __future__ import annotations

import io
import struct

import numpy as np

MAGIC = b"E2TS"
VERSION = 1


class TensorFormatError(ValueError):
    pass


def encode(arr) -> bytes:
    arr = np.asarray(arr)
    head = MAGIC + struct.pack("<HH", VERSION, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode(buf) -> tuple[np.ndarray, int]:
    """Parse one tensor from the front of ``buf``; returns (array, bytes consumed)."""
    mv = memoryview(buf)
    if len(mv) < 8 or bytes(mv[:4]) != MAGIC:
        raise TensorFormatError("missing E2TS magic")
    version, rank = struct.unpack_from("<HH", mv, 4)
    if version != VERSION:
        raise TensorFormatError(f"unsupported tensor format version {version}")
    off = 8
    if len(mv) < off + 8 * rank:
        raise TensorFormatError("truncated tensor header")
    dims = struct.unpack_from(f"<{rank}Q", mv, off)
    off += 8 * rank
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    nbytes = 4 * count
    if len(mv) < off + nbytes:
        raise TensorFormatError("truncated tensor payload")
    arr = np.frombuffer(mv[off:off + nbytes], dtype="<f4").astype(np.float32).reshape(dims)
    return arr, off + nbytes


def save(path, arr) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(arr))


def load(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    arr, used = decode(buf)
    if used != len(buf):
        raise TensorFormatError(f"{len(buf) - used} trailing bytes after tensor")
    return arr


def read_from(stream: io.BufferedIOBase) -> np.ndarray:
    head = stream.read(8)
    if len(head) < 8 or head[:4] != MAGIC:
        raise TensorFormatError("missing E2TS magic")
    _, rank = struct.unpack_from("<HH", head, 4)
    dims_raw = stream.read(8 * rank)
    dims = struct.unpack(f"<{rank}Q", dims_raw)
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    payload = stream.read(4 * count)
    arr, _ = decode(head + dims_raw + payload)
    return arr
