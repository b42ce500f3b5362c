"""Binary checkpoint container.

Layout (little-endian)::

    b"PSCK" | u32 schema version | u32 header length | header (UTF-8 text)
    | float32 values of every parameter, in header order

The header is ``key=value`` metadata lines followed by one
``param <name> <d0>,<d1>,...`` line per tensor.
"""
from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

CHECKPOINT_MAGIC = b"PSCK"
SCHEMA_VERSION = 1
_PREFIX = struct.Struct("<4sII")


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint."""


def encode_checkpoint(params: dict[str, np.ndarray], meta: dict[str, str]) -> bytes:
    lines = []
    for key in sorted(meta):
        value = str(meta[key])
        if "\n" in value or "=" in key or key.startswith("param "):
            raise CheckpointError(f"metadata entry {key!r} cannot be encoded")
        lines.append(f"{key}={value}")
    blobs = []
    for name, arr in params.items():
        if any(ch.isspace() for ch in name):
            raise CheckpointError(f"parameter name {name!r} contains whitespace")
        lines.append(f"param {name} {','.join(str(d) for d in arr.shape)}")
        blobs.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    header = ("\n".join(lines) + "\n").encode("utf-8")
    return _PREFIX.pack(CHECKPOINT_MAGIC, SCHEMA_VERSION, len(header)) + header + b"".join(blobs)


def decode_checkpoint(raw: bytes) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    if len(raw) < _PREFIX.size:
        raise CheckpointError("checkpoint shorter than its fixed prefix")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {magic!r}")
    if version != SCHEMA_VERSION:
        raise CheckpointError(f"unsupported checkpoint schema version {version}")
    start = _PREFIX.size
    if start + hlen > len(raw):
        raise CheckpointError("checkpoint header is truncated")
    try:
        header = raw[start : start + hlen].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CheckpointError("checkpoint header is not UTF-8") from exc
    meta: dict[str, str] = {}
    specs = []
    for line in header.splitlines():
        if line.startswith("param "):
            parts = line.split(" ")
            if len(parts) != 3:
                raise CheckpointError(f"bad parameter line {line!r}")
            shape = tuple(int(d) for d in parts[2].split(",")) if parts[2] else ()
            specs.append((parts[1], shape))
        elif "=" in line:
            key, value = line.split("=", 1)
            meta[key] = value
        elif line:
            raise CheckpointError(f"unrecognised header line {line!r}")
    params: dict[str, np.ndarray] = {}
    offset = start + hlen
    for name, shape in specs:
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + 4 * count
        if end > len(raw):
            raise CheckpointError(f"payload truncated while reading {name}")
        params[name] = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(shape).astype(np.float32)
        offset = end
    if offset != len(raw):
        raise CheckpointError(f"{len(raw) - offset} trailing bytes after the last parameter")
    return params, meta


def save_checkpoint(path: str | Path, params: dict[str, np.ndarray], meta: dict[str, str]) -> str:
    """Write a checkpoint and return the sha256 of its bytes."""
    raw = encode_checkpoint(params, meta)
    Path(path).write_bytes(raw)
    return hashlib.sha256(raw).hexdigest()


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    return decode_checkpoint(Path(path).read_bytes())


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
