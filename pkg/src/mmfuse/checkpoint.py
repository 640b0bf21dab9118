"""Model checkpoint container.

Layout::

    b"MMCK" | version u32 | header length u32 | header (UTF-8 JSON) | tensors

The header echoes the model config, lists every tensor (name, shape, byte
offset into the tensor block) and carries free-form ``extra`` metadata such
as the fusion input layout. Tensors are little-endian float32, row-major,
in header order. JSON is written with sorted keys, so saving a loaded
checkpoint reproduces the original bytes.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .formats import FormatError, atomic_write, read_bytes

MAGIC = b"MMCK"
VERSION = 1
_PREFIX = struct.Struct("<4sII")


@dataclass
class Checkpoint:
    kind: str
    config: dict
    params: dict[str, np.ndarray]
    extra: dict = field(default_factory=dict)


def to_bytes(ckpt: Checkpoint) -> bytes:
    manifest = []
    chunks = []
    offset = 0
    for name, arr in ckpt.params.items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        manifest.append({"name": name, "shape": list(np.shape(arr)), "offset": offset})
        chunks.append(data)
        offset += len(data)
    payload = b"".join(chunks)
    header = {
        "kind": ckpt.kind,
        "config": ckpt.config,
        "extra": ckpt.extra,
        "params": manifest,
        "payload_bytes": len(payload),
        "payload_crc32": zlib.crc32(payload),
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(hbytes)) + hbytes + payload


def from_bytes(blob: bytes, source="<bytes>") -> Checkpoint:
    if len(blob) < _PREFIX.size:
        raise FormatError(f"{source}: truncated checkpoint")
    magic, version, hlen = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"{source}: not a checkpoint (magic {magic!r})")
    if version != VERSION:
        raise FormatError(f"{source}: unsupported checkpoint version {version}")
    try:
        header = json.loads(blob[_PREFIX.size : _PREFIX.size + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{source}: unreadable header ({exc})") from None
    payload = blob[_PREFIX.size + hlen :]
    if len(payload) != header["payload_bytes"] or zlib.crc32(payload) != header["payload_crc32"]:
        raise FormatError(f"{source}: tensor payload checksum mismatch")
    params = {}
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape, dtype=np.int64))
        start = entry["offset"]
        arr = np.frombuffer(payload[start : start + 4 * n], dtype="<f4").reshape(shape)
        params[entry["name"]] = arr.astype(np.float64)
    return Checkpoint(header["kind"], header["config"], params, header["extra"])


def save(path, ckpt: Checkpoint) -> None:
    atomic_write(path, to_bytes(ckpt))


def load(path) -> Checkpoint:
    return from_bytes(read_bytes(path), source=path)


def quantize(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Round parameters through float32, i.e. what a save/load cycle yields."""
    return {k: np.asarray(v, dtype=np.float32).astype(np.float64) for k, v in params.items()}
