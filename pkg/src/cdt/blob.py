"""CDTT tensor blob format.

Layout: ``b"CDTT"``, u8 version (1), u8 dtype (1=f32, 2=f64), u8 rank,
u8 reserved, ``rank`` little-endian u64 dims, then the row-major payload in
little-endian byte order.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

MAGIC = b"CDTT"
VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
_CODE_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


class BlobFormatError(ValueError):
    pass


def encode(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    dt = arr.dtype.newbyteorder("<")
    if dt not in _DTYPE_CODES:
        raise BlobFormatError(f"unsupported dtype {arr.dtype}; only float32/float64")
    if arr.ndim > 255:
        raise BlobFormatError("rank too large")
    header = MAGIC + struct.pack("<BBBB", VERSION, _DTYPE_CODES[dt], arr.ndim, 0)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=dt).tobytes(order="C")
    return header + dims + payload


def decode(buf: bytes) -> np.ndarray:
    arr, used = _decode_from(memoryview(buf), 0)
    if used != len(buf):
        raise BlobFormatError(f"{len(buf) - used} trailing bytes after blob")
    return arr


def _decode_from(buf, offset: int) -> tuple[np.ndarray, int]:
    if bytes(buf[offset:offset + 4]) != MAGIC:
        raise BlobFormatError("bad magic")
    version, code, rank, _ = struct.unpack_from("<BBBB", buf, offset + 4)
    if version != VERSION:
        raise BlobFormatError(f"unsupported version {version}")
    if code not in _CODE_DTYPES:
        raise BlobFormatError(f"unknown dtype code {code}")
    pos = offset + 8
    dims = struct.unpack_from(f"<{rank}Q", buf, pos)
    pos += 8 * rank
    dt = _CODE_DTYPES[code]
    n = int(np.prod(dims, dtype=np.int64)) if rank else 1
    nbytes = n * dt.itemsize
    if pos + nbytes > len(buf):
        raise BlobFormatError("truncated payload")
    arr = np.frombuffer(bytes(buf[pos:pos + nbytes]), dtype=dt).reshape(dims)
    return arr.astype(dt.newbyteorder("="), copy=True), pos + nbytes


def save(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode(arr))


def load(path) -> np.ndarray:
    return decode(Path(path).read_bytes())


def read_stream(stream: io.BufferedIOBase) -> np.ndarray:
    """Read exactly one blob from a binary stream."""
    head = stream.read(8)
    if len(head) != 8 or head[:4] != MAGIC:
        raise BlobFormatError("bad magic")
    rank = head[6]
    dims_raw = stream.read(8 * rank)
    dims = struct.unpack(f"<{rank}Q", dims_raw)
    dt = _CODE_DTYPES.get(head[5])
    if dt is None:
        raise BlobFormatError(f"unknown dtype code {head[5]}")
    n = int(np.prod(dims, dtype=np.int64)) if rank else 1
    payload = stream.read(n * dt.itemsize)
    return decode(head + dims_raw + payload)
