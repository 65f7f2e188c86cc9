"""CLFTCKPT checkpoint files and atomic file writes.

Layout (all integers little-endian)::

    b"CLFTCKPT"  u16 version
    repeated, names in lexicographic order:
        u32 name length, UTF-8 name, u8 ndim, ndim x u32 dims, f32 data
    u32 CRC-32 of every preceding byte

The CRC covers the header as well as the entries, so any single flipped byte
is detected on load.
"""

from __future__ import annotations

import os
import struct
import tempfile
import zlib
from pathlib import Path
from typing import Mapping

import numpy as np

from cleft.errors import CheckpointError

MAGIC = b"CLFTCKPT"
VERSION = 1

_UMASK = os.umask(0)
os.umask(_UMASK)


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.chmod(tmp, 0o666 & ~_UMASK)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def encode_checkpoint(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<H", VERSION)]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f4", order="C")
        raw = name.encode("utf-8")
        if arr.ndim > 255:
            raise CheckpointError(f"{name}: too many dims ({arr.ndim})")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_checkpoint(buf: bytes) -> dict[str, np.ndarray]:
    head = len(MAGIC) + 2
    if len(buf) < head + 4 or buf[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a CLFTCKPT file (bad magic or too short)")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint CRC mismatch (file is corrupted)")
    (version,) = struct.unpack_from("<H", body, len(MAGIC))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    off = head
    try:
        while off < len(body):
            (n,) = struct.unpack_from("<I", body, off)
            off += 4
            name = body[off:off + n].decode("utf-8")
            off += n
            ndim = body[off]
            off += 1
            dims = struct.unpack_from(f"<{ndim}I", body, off)
            off += 4 * ndim
            count = int(np.prod(dims, dtype=np.int64))
            if off + 4 * count > len(body):
                raise CheckpointError(f"{name}: truncated tensor data")
            out[name] = np.frombuffer(body, dtype="<f4", count=count, offset=off).astype(np.float32).reshape(dims)
            off += 4 * count
    except (struct.error, IndexError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"malformed checkpoint entry: {exc}") from None
    if list(out) != sorted(out):
        raise CheckpointError("checkpoint entries are not sorted by name")
    return out


def save_checkpoint(path, tensors: Mapping[str, np.ndarray]) -> None:
    atomic_write_bytes(path, encode_checkpoint(tensors))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    try:
        return decode_checkpoint(buf)
    except CheckpointError as exc:
        raise CheckpointError(f"{path}: {exc}") from None
