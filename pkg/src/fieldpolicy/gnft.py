"""GNFT binary tensor container.

Layout (little-endian): magic ``b"GNFT"``, u32 version (=1), u8 dtype code
(1 = float32, 2 = float64), u8 rank, ``rank`` u64 extents, then the row-major
payload.
"""
from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"GNFT"
VERSION = 1
_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


class GNFTError(ValueError):
    """Malformed container; message names the file and byte offset."""


def encode(array: np.ndarray) -> bytes:
    arr = np.asarray(array)
    if arr.dtype not in _CODES:
        raise TypeError(f"GNFT stores float32/float64 only, got {arr.dtype}")
    header = MAGIC + struct.pack("<IBB", VERSION, _CODES[arr.dtype], arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=_DTYPES[_CODES[arr.dtype]]).tobytes()
    return header + payload


def decode(buf: bytes, path: str = "<bytes>") -> np.ndarray:
    if len(buf) < 10:
        raise GNFTError(f"{path}: truncated header at byte offset {len(buf)}")
    if buf[:4] != MAGIC:
        raise GNFTError(f"{path}: bad magic {buf[:4]!r} at byte offset 0")
    version, code, rank = struct.unpack_from("<IBB", buf, 4)
    if version != VERSION:
        raise GNFTError(f"{path}: unsupported version {version} at byte offset 4")
    if code not in _DTYPES:
        raise GNFTError(f"{path}: unknown dtype code {code} at byte offset 8")
    off = 10
    if len(buf) < off + 8 * rank:
        raise GNFTError(f"{path}: truncated extents at byte offset {len(buf)}")
    shape = struct.unpack_from(f"<{rank}Q", buf, off)
    off += 8 * rank
    dtype = _DTYPES[code]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(buf) - off != expected:
        raise GNFTError(
            f"{path}: payload size {len(buf) - off} does not match extents {shape} at byte offset {off}"
        )
    arr = np.frombuffer(buf, dtype=dtype, offset=off).reshape(shape)
    return arr.astype(dtype.newbyteorder("="), copy=True)


def save(path: str | os.PathLike, array: np.ndarray) -> None:
    try:
        with open(path, "wb") as fh:
            fh.write(encode(array))
    except OSError as exc:
        raise OSError(f"cannot write GNFT file {os.fspath(path)}: {exc.strerror}") from exc


def load(path: str | os.PathLike) -> np.ndarray:
    path = os.fspath(path)
    with open(path, "rb") as fh:
        buf = fh.read()
    return decode(buf, path)
