"""Flat binary tensor serialization (F64T) and CSV export.

F64T layout: 4-byte magic ``F64T``, little-endian u32 ndim, u32 dims,
then the row-major float64 payload, also little-endian.
"""

import struct

import numpy as np

from .errors import FormatError

_MAGIC = b"F64T"


def save_f64t(path, array):
    arr = np.ascontiguousarray(array, dtype=np.float64)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.astype("<f8").tobytes(order="C"))


def load_f64t(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, expected {_MAGIC!r}")
        raw = fh.read(4)
        if len(raw) != 4:
            raise FormatError(f"{path}: truncated header")
        (ndim,) = struct.unpack("<I", raw)
        raw = fh.read(4 * ndim)
        if len(raw) != 4 * ndim:
            raise FormatError(f"{path}: truncated dims")
        dims = struct.unpack(f"<{ndim}I", raw)
        count = 1
        for d in dims:
            if d <= 0:
                raise FormatError(f"{path}: non-positive dimension {d}")
            count *= d
        payload = fh.read(8 * count)
        if len(payload) != 8 * count:
            raise FormatError(f"{path}: truncated payload")
        data = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    return data.reshape(dims)


def save_csv(path, array):
    """One value per line, row-major; round-trips via repr."""
    arr = np.ascontiguousarray(array, dtype=np.float64)
    with open(path, "w", newline="\n") as fh:
        for v in arr.ravel(order="C"):
            fh.write(repr(float(v)))
            fh.write("\n")
