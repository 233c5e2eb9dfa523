"""Binary tensor blobs.

Layout (little-endian)::

    b"PDT1" | u32 rank | rank x u32 extent | prod(extents) x f32
"""

from __future__ import annotations

import io
import struct
from typing import BinaryIO

import numpy as np

from .errors import FormatError

TENSOR_MAGIC = b"PDT1"


def write_tensor(fh: BinaryIO, array) -> None:
    arr = np.asarray(getattr(array, "data", array))
    fh.write(TENSOR_MAGIC)
    fh.write(struct.pack("<I", arr.ndim))
    if arr.ndim:
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated tensor blob: wanted {n} bytes, got {len(buf)}")
    return buf


def read_tensor(fh: BinaryIO) -> np.ndarray:
    magic = _read_exact(fh, 4)
    if magic != TENSOR_MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}")
    (rank,) = struct.unpack("<I", _read_exact(fh, 4))
    if rank > 8:
        raise FormatError(f"implausible tensor rank {rank}")
    shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank)) if rank else ()
    n = int(np.prod(shape, dtype=np.int64))
    data = np.frombuffer(_read_exact(fh, 4 * n), dtype="<f4")
    return data.reshape(shape).astype(np.float32)


def tensor_to_bytes(array) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, array)
    return buf.getvalue()


def tensor_from_bytes(blob: bytes) -> np.ndarray:
    return read_tensor(io.BytesIO(blob))
