"""CLFT1 binary tensor files.

Layout: magic ``b"CLFT1"``, ``u8`` ndim, ``ndim`` little-endian ``u32`` dims,
then little-endian ``f32`` data in row-major order.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from cleft.errors import CheckpointError

MAGIC = b"CLFT1"


def encode_tensor(arr) -> bytes:
    arr = np.asarray(arr, dtype="<f4", order="C")
    if arr.ndim > 255:
        raise CheckpointError(f"too many dims for CLFT1: {arr.ndim}")
    header = MAGIC + struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes()


def decode_tensor(buf: bytes) -> np.ndarray:
    if buf[:5] != MAGIC:
        raise CheckpointError("not a CLFT1 tensor (bad magic)")
    if len(buf) < 6:
        raise CheckpointError("truncated CLFT1 header")
    ndim = buf[5]
    off = 6 + 4 * ndim
    if len(buf) < off:
        raise CheckpointError("truncated CLFT1 header")
    dims = struct.unpack_from(f"<{ndim}I", buf, 6)
    count = int(np.prod(dims, dtype=np.int64))
    if len(buf) != off + 4 * count:
        raise CheckpointError(f"CLFT1 payload is {len(buf) - off} bytes, expected {4 * count}")
    return np.frombuffer(buf, dtype="<f4", count=count, offset=off).astype(np.float32).reshape(dims)


def write_tensor(path, arr) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_tensor(arr))
    os.replace(tmp, path)


def read_tensor(path) -> np.ndarray:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read tensor file {path}: {exc}") from exc
    try:
        return decode_tensor(buf)
    except CheckpointError as exc:
        raise CheckpointError(f"{path}: {exc}") from None
