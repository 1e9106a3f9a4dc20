"""Binary tensor container ("CTSR"): little-endian header plus a row-major payload.

Layout: magic ``b"CTSR"``, u32 version, u8 dtype code (0 = float32, 1 = uint8),
u8 ndim, ndim x u32 dims, then the values.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"CTSR"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}
CODES = {np.dtype("float32"): 0, np.dtype("uint8"): 1}


class TensorFileError(ValueError):
    pass


def encode(array: np.ndarray) -> bytes:
    a = np.asarray(array)
    if a.dtype not in CODES:
        raise TensorFileError(f"unsupported dtype {a.dtype}; use float32 or uint8")
    if a.ndim > 255:
        raise TensorFileError("too many dimensions")
    code = CODES[a.dtype]
    header = MAGIC + struct.pack("<IBB", VERSION, code, a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return header + np.ascontiguousarray(a, dtype=DTYPES[code]).tobytes()


def decode(buf: bytes) -> np.ndarray:
    if buf[:4] != MAGIC:
        raise TensorFileError("not a tensor file (bad magic)")
    version, code, ndim = struct.unpack_from("<IBB", buf, 4)
    if version != VERSION:
        raise TensorFileError(f"unsupported tensor file version {version}")
    if code not in DTYPES:
        raise TensorFileError(f"unknown dtype code {code}")
    dims = struct.unpack_from(f"<{ndim}I", buf, 10)
    offset = 10 + 4 * ndim
    dtype = DTYPES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(buf) - offset != expected:
        raise TensorFileError(f"payload is {len(buf) - offset} bytes, header implies {expected}")
    out = np.frombuffer(buf, dtype=dtype, offset=offset).reshape(dims)
    return out.astype(dtype.newbyteorder("="), copy=True)


def write(path: str | os.PathLike, array: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        path.write_bytes(encode(array))
    except OSError as exc:
        raise OSError(f"failed writing tensor file {path}: {exc}") from exc


def read(path: str | os.PathLike) -> np.ndarray:
    return decode(Path(path).read_bytes())
