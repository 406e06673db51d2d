"""Binary parameter container used for backbone and run-state checkpoints.

Layout (all integers little-endian)::

    offset  size  field
    0       4     magic  b"DPCK"
    4       2     format version (uint16, currently 1)
    6       2     reserved, zero
    8       4     config length C (uint32)
    12      C     config block, UTF-8 JSON
    12+C    4     record count R (uint32)
    ...           R records, each:
                    2   name length n (uint16)
                    n   name, UTF-8
                    1   ndim k (uint8)
                    4k  dims (uint32 each)
                    8*prod(dims)  float64 payload, row-major
    end-32  32    SHA-256 of every preceding byte
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DPCK"
VERSION = 1


class CheckpointError(ValueError):
    """Malformed, truncated or tampered checkpoint."""


def encode(params: dict[str, np.ndarray], config: dict) -> bytes:
    cfg = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    out = bytearray(MAGIC)
    out += struct.pack("<HHI", VERSION, 0, len(cfg))
    out += cfg
    out += struct.pack("<I", len(params))
    for name in sorted(params):
        arr = np.asarray(params[name], dtype="<f8")
        raw = name.encode()
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.tobytes()
    out += hashlib.sha256(out).digest()
    return bytes(out)


def decode(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if len(blob) < 48 or blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic or too short)")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checksum mismatch")
    version, _, clen = struct.unpack_from("<HHI", body, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 12
    config = json.loads(body[pos:pos + clen].decode())
    pos += clen
    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    params: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos:pos + nlen].decode()
            pos += nlen
            (ndim,) = struct.unpack_from("<B", body, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", body, pos)
            pos += 4 * ndim
            n = int(np.prod(shape, dtype=np.int64))
            if pos + 8 * n > len(body):
                raise CheckpointError(f"record {name!r} runs past end of file")
            params[name] = np.frombuffer(body, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * n
    except struct.error as exc:
        raise CheckpointError(f"truncated record table: {exc}") from None
    if pos != len(body):
        raise CheckpointError(f"{len(body) - pos} trailing bytes after last record")
    return params, config


def checksum(params: dict[str, np.ndarray], config: dict | None = None) -> str:
    """Hex digest of the encoded container; equal iff every byte matches."""
    return hashlib.sha256(encode(params, config or {})).hexdigest()


def save(path: str | Path, params: dict[str, np.ndarray], config: dict) -> str:
    blob = encode(params, config)
    Path(path).write_bytes(blob)
    return blob[-32:].hex()


def load(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"checkpoint not found: {p}")
    return decode(p.read_bytes())
