"""Shared binary tensor file format (MTEN) and CSV export helpers.

Layout: magic "MTEN", version u16, scalar kind u8 (0 = real64,
1 = complex as interleaved re/im float64 pairs), ndims u32, one u64 per
extent, then the payload as little-endian 64-bit floats in column-major
order (first index fastest).
"""

import csv
import struct

import numpy as np

MAGIC = b"MTEN"
VERSION = 1
_KIND_REAL = 0
_KIND_COMPLEX = 1

__all__ = [
    "TensorFormatError",
    "save_tensor",
    "load_tensor",
    "save_signatures_csv",
    "save_table_csv",
]


class TensorFormatError(ValueError):
    """Malformed or truncated tensor file."""


def save_tensor(path, array):
    """Write an array to `path` in the shared tensor format."""
    arr = np.asarray(array)
    if np.iscomplexobj(arr):
        kind = _KIND_COMPLEX
        flat = np.ascontiguousarray(arr.astype(np.complex128).ravel(order="F"))
        payload = np.empty(2 * flat.size, dtype="<f8")
        payload[0::2] = flat.real
        payload[1::2] = flat.imag
    else:
        kind = _KIND_REAL
        payload = arr.astype("<f8").ravel(order="F")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HBI", VERSION, kind, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(payload.tobytes())


def load_tensor(path):
    """Read an array written by :func:`save_tensor`."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise ValueError(f"{path}: not a tensor file (bad magic {magic!r})")
        version, kind, ndims = struct.unpack("<HBI", fh.read(7))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported tensor format version {version}")
        if kind not in (_KIND_REAL, _KIND_COMPLEX):
            raise ValueError(f"{path}: unknown scalar kind {kind}")
        shape = struct.unpack(f"<{ndims}Q", fh.read(8 * ndims))
        count = 1
        for s in shape:
            count *= s
        if kind == _KIND_COMPLEX:
            count *= 2
        payload = np.frombuffer(fh.read(8 * count), dtype="<f8")
        if payload.size != count:
            raise ValueError(f"{path}: truncated payload")
    if kind == _KIND_COMPLEX:
        data = payload[0::2] + 1j * payload[1::2]
    else:
        data = payload
    return np.reshape(data, shape, order="F").copy()


def save_signatures_csv(path, mat, names=None):
    """Export a factor matrix as CSV: one column per atom, header r1..rR."""
    mat = np.atleast_2d(np.asarray(mat, dtype=float))
    if names is None:
        names = [f"r{j + 1}" for j in range(mat.shape[1])]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(names))
        for row in mat:
            writer.writerow([repr(float(v)) for v in row])


def save_table_csv(path, header, rows):
    """Export a generic table (e.g. connectivity edge lists) as CSV."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(header))
        for row in rows:
            writer.writerow([repr(float(v)) if isinstance(v, float) else v for v in row])
