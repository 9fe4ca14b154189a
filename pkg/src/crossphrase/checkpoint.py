"""Versioned binary container for named float64 arrays.

Layout (all integers little-endian unsigned 32-bit unless noted):

    magic   4 bytes  b"CPX1"
    version u32
    hash    u32 length + UTF-8 config hash string
    count   u32 number of arrays
    entry*  u32 name length + UTF-8 name
            u32 ndim, then ndim u32 dims
            raw little-endian float64 data, C order

Round-trips are bit-exact.  The config hash in the header lets loaders
detect checkpoints written for a different model configuration.
"""

from __future__ import annotations

import hashlib
import struct
from typing import BinaryIO, Mapping

import numpy as np

__all__ = [
    "CHECKPOINT_VERSION",
    "CheckpointFormatError",
    "config_hash",
    "save_arrays",
    "load_arrays",
]

MAGIC = b"CPX1"
CHECKPOINT_VERSION = 1


class CheckpointFormatError(ValueError):
    """The file is not a readable checkpoint container."""


def config_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _write_str(fh: BinaryIO, s: str) -> None:
    raw = s.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)


def _read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    raw = fh.read(n)
    if len(raw) != n:
        raise CheckpointFormatError(f"truncated checkpoint while reading {what}")
    return raw


def _read_str(fh: BinaryIO, what: str) -> str:
    (n,) = struct.unpack("<I", _read_exact(fh, 4, what))
    return _read_exact(fh, n, what).decode("utf-8")


def save_arrays(path, arrays: Mapping[str, np.ndarray], config_digest: str = "") -> None:
    """Write named arrays in iteration order."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        _write_str(fh, config_digest)
        fh.write(struct.pack("<I", len(arrays)))
        for name, array in arrays.items():
            if "\n" in name:
                raise ValueError(f"array name contains a newline: {name!r}")
            data = np.ascontiguousarray(array, dtype="<f8")
            _write_str(fh, name)
            fh.write(struct.pack("<I", data.ndim))
            for dim in data.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(data.tobytes())


def load_arrays(path) -> tuple[dict[str, np.ndarray], str]:
    """Read back (arrays in file order, config hash)."""
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != MAGIC:
            raise CheckpointFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointFormatError(
                f"unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
            )
        digest = _read_str(fh, "config hash")
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "array count"))
        arrays: dict[str, np.ndarray] = {}
        for _ in range(count):
            name = _read_str(fh, "array name")
            if name in arrays:
                raise CheckpointFormatError(f"duplicate array name {name!r}")
            (ndim,) = struct.unpack("<I", _read_exact(fh, 4, "ndim"))
            shape = tuple(
                struct.unpack("<I", _read_exact(fh, 4, "dim"))[0] for _ in range(ndim)
            )
            n_bytes = int(np.prod(shape, dtype=np.int64)) * 8
            raw = _read_exact(fh, n_bytes, f"data for {name!r}")
            arrays[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
        trailing = fh.read(1)
        if trailing:
            raise CheckpointFormatError("trailing bytes after last array")
    return arrays, digest
