"""VTNS binary tensor files.

Layout: magic ``VTNS``, u8 version (1), u8 dtype (0=f32, 1=f64), u8 rank,
rank x u32 little-endian dims, then the row-major little-endian payload.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"VTNS"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class VTNSError(ValueError):
    pass


def dumps(arr) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype not in _CODES:
        arr = arr.astype(np.float32)
    code = _CODES[arr.dtype]
    header = MAGIC + struct.pack("<BBB", VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def loads(buf: bytes) -> np.ndarray:
    if len(buf) < 7 or buf[:4] != MAGIC:
        raise VTNSError("not a VTNS file (bad magic)")
    version, code, rank = struct.unpack_from("<BBB", buf, 4)
    if version != VERSION:
        raise VTNSError(f"unsupported VTNS version {version}")
    if code not in _DTYPES:
        raise VTNSError(f"unknown dtype code {code}")
    offset = 7 + 4 * rank
    if len(buf) < offset:
        raise VTNSError("truncated header")
    shape = struct.unpack_from(f"<{rank}I", buf, 7)
    dtype = _DTYPES[code]
    count = int(np.prod(shape, dtype=np.int64))
    if len(buf) != offset + count * dtype.itemsize:
        raise VTNSError("payload size does not match header")
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=offset).reshape(shape)
    return arr.astype(dtype.newbyteorder("="))


def save(path, arr) -> None:
    Path(path).write_bytes(dumps(arr))


def load(path) -> np.ndarray:
    return loads(Path(path).read_bytes())
