"""ICIT binary tensor files.

Layout (all little-endian)::

    b"ICIT" | u8 version=1 | u8 dtype=1 (f64) | u8 rank | u8 reserved=0
    rank x u32 dims | prod(dims) x f64 payload, row-major
"""
from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"ICIT"
VERSION = 1
DTYPE_F64 = 1


class ICITFormatError(ValueError):
    pass


def encode(array) -> bytes:
    arr = np.asarray(array, dtype="<f8")
    if not 1 <= arr.ndim <= 4:
        raise ICITFormatError(f"rank must be 1-4, got {arr.ndim}")
    header = MAGIC + struct.pack("<BBBB", VERSION, DTYPE_F64, arr.ndim, 0)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr).tobytes()


def decode(blob: bytes) -> np.ndarray:
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise ICITFormatError("missing ICIT magic")
    version, dtype, rank, reserved = struct.unpack_from("<BBBB", blob, 4)
    if version != VERSION:
        raise ICITFormatError(f"unsupported version {version}")
    if dtype != DTYPE_F64:
        raise ICITFormatError(f"unsupported dtype code {dtype}")
    if not 1 <= rank <= 4 or reserved != 0:
        raise ICITFormatError(f"bad rank/reserved bytes ({rank}, {reserved})")
    dims = struct.unpack_from(f"<{rank}I", blob, 8)
    offset = 8 + 4 * rank
    count = int(np.prod(dims))
    if len(blob) != offset + 8 * count:
        raise ICITFormatError(f"payload is {len(blob) - offset} bytes, expected {8 * count}")
    return np.frombuffer(blob, dtype="<f8", offset=offset).reshape(dims).astype(np.float64)


def write_tensor(path: str | os.PathLike, array) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(array))


def read_tensor(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode(fh.read())
