"""Binary matrix codec shared by bank files and training checkpoints.

Layout: 4-byte magic ``UPBK``, 32-bit little-endian version, 64-bit LE row
count, 64-bit LE dim, then rows*dim IEEE-754 values row-major.  Version 1
stores float32 (the interchange format for bank matrices and sampled
latents); version 2 stores float64 and is used by checkpoints, where a
lossy round-trip would break bitwise reproducibility.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from .core import ShapeMismatch

MAGIC = b"UPBK"
VERSION_F32 = 1
VERSION_F64 = 2
_HEADER = struct.Struct("<4sIQQ")


class CodecError(ValueError):
    """Malformed binary matrix file."""


def write_matrix(path: str | Path, matrix, version: int = VERSION_F32) -> None:
    """Write a 2-D array; float32 payload for version 1, float64 for 2."""
    arr = np.ascontiguousarray(np.asarray(matrix, dtype=np.float64))
    if arr.ndim != 2:
        raise ShapeMismatch(f"expected 2-D matrix, got shape {arr.shape}")
    if version == VERSION_F32:
        payload = arr.astype("<f4").tobytes()
    elif version == VERSION_F64:
        payload = arr.astype("<f8").tobytes()
    else:
        raise CodecError(f"unsupported version {version}")
    header = _HEADER.pack(MAGIC, version, arr.shape[0], arr.shape[1])
    Path(path).write_bytes(header + payload)


def read_matrix(path: str | Path, expect_version: int | None = None) -> np.ndarray:
    """Read a matrix back as float64, validating header and payload size."""
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise CodecError(f"{path}: truncated header")
    magic, version, rows, dim = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise CodecError(f"{path}: bad magic {magic!r}")
    if version not in (VERSION_F32, VERSION_F64):
        raise CodecError(f"{path}: unsupported version {version}")
    if expect_version is not None and version != expect_version:
        raise CodecError(f"{path}: expected version {expect_version}, found {version}")
    itemsize = 4 if version == VERSION_F32 else 8
    expected = _HEADER.size + rows * dim * itemsize
    if len(blob) != expected:
        raise CodecError(f"{path}: expected {expected} bytes, found {len(blob)}")
    dtype = "<f4" if version == VERSION_F32 else "<f8"
    data = np.frombuffer(blob, dtype=dtype, offset=_HEADER.size)
    return data.astype(np.float64).reshape(rows, dim)


def quantize_f32(matrix) -> np.ndarray:
    """Round float64 values through float32, so in-memory matrices match
    what a version-1 file round-trip would produce bit-for-bit."""
    return np.asarray(matrix, dtype=np.float64).astype(np.float32).astype(np.float64)


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
