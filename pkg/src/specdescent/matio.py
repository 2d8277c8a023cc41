"""SMAT binary matrix files and plain CSV grids."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .linalg import Precision

MAGIC = b"SMAT"
VERSION = 1
_HEADER = struct.Struct("<4sIQQB")
_PAYLOAD = {
    Precision.F64: "<f8",
    Precision.F32: "<f4",
    Precision.F16E: "<f2",
    # bf16 has no IEEE interchange type; values are exact in binary32
    Precision.BF16E: "<f4",
}


def write_smat(path, m: np.ndarray, precision: Precision = Precision.F64) -> None:
    m = np.atleast_2d(np.asarray(m))
    rows, cols = m.shape
    payload = np.ascontiguousarray(precision.round(m), dtype=_PAYLOAD[precision])
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, rows, cols, precision.tag))
        fh.write(payload.tobytes())


def read_smat(path) -> tuple[np.ndarray, Precision]:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated header")
    magic, version, rows, cols, tag = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    if tag >= len(Precision):
        raise ValueError(f"{path}: unknown precision tag {tag}")
    precision = Precision.from_tag(tag)
    dtype = np.dtype(_PAYLOAD[precision])
    expected = rows * cols * dtype.itemsize
    body = raw[_HEADER.size :]
    if len(body) != expected:
        raise ValueError(f"{path}: payload has {len(body)} bytes, expected {expected}")
    data = np.frombuffer(body, dtype=dtype).reshape(rows, cols)
    return data.astype(precision.dtype), precision


def read_matrix(path) -> tuple[np.ndarray, Precision]:
    """Load an SMAT file, or a CSV grid (returned as double)."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == MAGIC:
        return read_smat(path)
    return np.loadtxt(path, delimiter=",", ndmin=2, dtype=np.float64), Precision.F64
