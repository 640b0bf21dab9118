"""Binary containers exchanged with external producers.

Embedding file (``EMB1``), 16-byte header then payload::

    offset  size  field
    0       4     magic b"EMB1"
    4       1     modality code (text=0, voice=1, face=2, video=3)
    5       3     reserved, zero
    8       4     dim, little-endian u32
    12      4     CRC-32 of the payload, little-endian u32
    16      4*dim little-endian float32 values

Track file (``TRK1``), used for face tracks and per-frame feature
sequences, 20-byte header then payload::

    0       4     magic b"TRK1"
    4       1     modality code
    5       3     reserved, zero
    8       4     dim (per-frame width), u32
    12      4     frame count, u32 (zero is a valid, empty track)
    16      4     CRC-32 of the payload, u32
    20      4*dim*frames float32 values, row-major (frame, dim)

Any program that writes these bytes is a valid producer.
"""

from __future__ import annotations

import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

EMB_MAGIC = b"EMB1"
TRK_MAGIC = b"TRK1"
_EMB_HEADER = struct.Struct("<4sB3xII")
_TRK_HEADER = struct.Struct("<4sB3xIII")


class FormatError(ValueError):
    """Unreadable or corrupted container; the message names the file."""


def _f32le(values) -> bytes:
    return np.ascontiguousarray(values, dtype="<f4").tobytes()


def pack_embedding(modality_code: int, values) -> bytes:
    values = np.asarray(values)
    if values.ndim != 1:
        raise ValueError("embedding payload must be one-dimensional")
    payload = _f32le(values)
    return _EMB_HEADER.pack(EMB_MAGIC, modality_code, values.shape[0], zlib.crc32(payload)) + payload


def unpack_embedding(blob: bytes, source="<bytes>") -> tuple[int, np.ndarray]:
    if len(blob) < _EMB_HEADER.size:
        raise FormatError(f"{source}: truncated embedding header")
    magic, code, dim, crc = _EMB_HEADER.unpack_from(blob)
    if magic != EMB_MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}")
    payload = blob[_EMB_HEADER.size :]
    if len(payload) != 4 * dim:
        raise FormatError(f"{source}: payload is {len(payload)} bytes, header says dim={dim}")
    if zlib.crc32(payload) != crc:
        raise FormatError(f"{source}: checksum mismatch")
    return code, np.frombuffer(payload, dtype="<f4").astype(np.float32)


def pack_track(modality_code: int, frames, dim: int | None = None) -> bytes:
    frames = np.asarray(frames)
    if frames.size == 0:
        if dim is None:
            dim = frames.shape[1] if frames.ndim == 2 else 0
        frames = np.zeros((0, dim))
    if frames.ndim != 2:
        raise ValueError("track payload must be (frames, dim)")
    payload = _f32le(frames)
    n, d = frames.shape
    return _TRK_HEADER.pack(TRK_MAGIC, modality_code, d, n, zlib.crc32(payload)) + payload


def unpack_track(blob: bytes, source="<bytes>") -> tuple[int, np.ndarray]:
    if len(blob) < _TRK_HEADER.size:
        raise FormatError(f"{source}: truncated track header")
    magic, code, dim, n, crc = _TRK_HEADER.unpack_from(blob)
    if magic != TRK_MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}")
    payload = blob[_TRK_HEADER.size :]
    if len(payload) != 4 * dim * n:
        raise FormatError(f"{source}: payload is {len(payload)} bytes, header says {n}x{dim}")
    if zlib.crc32(payload) != crc:
        raise FormatError(f"{source}: checksum mismatch")
    return code, np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(n, dim)


def atomic_write(path, data: bytes) -> None:
    """Write via a temp file in the target directory and ``os.replace``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=path.suffix)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_bytes(path) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()
