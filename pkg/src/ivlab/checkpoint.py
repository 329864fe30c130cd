"""Binary checkpoints of named float32 arrays with a key=value metadata trailer.

Layout (little-endian)::

    b"IVCK" | u32 version | u32 count
    count x ( u16 name_len | name utf-8 | u8 dtype (0 = f32) | u8 rank | rank x u32 dim | payload )
    u32 meta_len | meta utf-8 ("key=value" lines, sorted by key)

Compute happens in float64; saving casts to float32, loading casts back.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"IVCK"
VERSION = 1
DTYPE_F32 = 0


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    meta: dict[str, str] = field(default_factory=dict)


def encode(params: Mapping[str, np.ndarray], meta: Mapping[str, object] | None = None) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(params))]
    for name in sorted(params):
        arr = np.asarray(params[name])
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointError(f"name too long: {name[:40]}...")
        if arr.ndim > 255:
            raise CheckpointError(f"rank {arr.ndim} too large for {name}")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", DTYPE_F32, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    text = "".join(f"{k}={v}\n" for k, v in sorted((meta or {}).items()))
    for k, v in (meta or {}).items():
        if "=" in str(k) or "\n" in str(k) or "\n" in str(v):
            raise CheckpointError(f"metadata entry {k!r} cannot be encoded")
    blob = text.encode("utf-8")
    parts.append(struct.pack("<I", len(blob)) + blob)
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    version, count = r.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"version mismatch: file has {version}, reader supports {VERSION}")
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode("utf-8")
        if name in params:
            raise CheckpointError(f"duplicate entry {name!r}")
        dtype, rank = r.unpack("<BB")
        if dtype != DTYPE_F32:
            raise CheckpointError(f"unsupported dtype code {dtype} for {name!r}")
        shape = r.unpack(f"<{rank}I")
        size = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(r.take(4 * size), dtype="<f4")
        params[name] = data.astype(np.float64).reshape(shape)
    (m,) = r.unpack("<I")
    meta = {}
    for line in r.take(m).decode("utf-8").splitlines():
        k, _, v = line.partition("=")
        meta[k] = v
    if r.pos != len(buf):
        raise CheckpointError("trailing bytes after metadata")
    return Checkpoint(params, meta)


def save_checkpoint(params: Mapping[str, np.ndarray], meta: Mapping[str, object] | None, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode(params, meta))
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    return decode(Path(path).read_bytes())
