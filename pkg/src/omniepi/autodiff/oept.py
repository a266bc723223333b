"""Raw tensor file format.

Layout: ``b"OEPT"``, version byte, dtype code byte (0 = f32, 1 = f64), rank
byte, ``rank`` little-endian u32 extents, then the row-major little-endian
payload. Blobs are self-delimiting, so several can follow each other in one
stream.
"""
from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

MAGIC = b"OEPT"
VERSION = 1
_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_OF = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def write_tensor(fh: BinaryIO, array: np.ndarray) -> None:
    array = np.asarray(array)
    if array.dtype not in _CODE_OF:
        raise ValueError(f"OEPT stores float32/float64 only, got {array.dtype}")
    if array.ndim > 255:
        raise ValueError("OEPT rank is limited to 255")
    code = _CODE_OF[array.dtype]
    fh.write(MAGIC + struct.pack("<BBB", VERSION, code, array.ndim))
    fh.write(struct.pack(f"<{array.ndim}I", *array.shape))
    fh.write(np.ascontiguousarray(array, dtype=_CODES[code]).tobytes())


def read_tensor(fh: BinaryIO) -> np.ndarray:
    head = fh.read(7)
    if len(head) != 7 or head[:4] != MAGIC:
        raise ValueError("not an OEPT blob (bad magic)")
    version, code, rank = struct.unpack("<BBB", head[4:])
    if version != VERSION:
        raise ValueError(f"unsupported OEPT version {version}")
    if code not in _CODES:
        raise ValueError(f"unknown OEPT dtype code {code}")
    shape = struct.unpack(f"<{rank}I", fh.read(4 * rank))
    dtype = _CODES[code]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    payload = fh.read(nbytes)
    if len(payload) != nbytes:
        raise ValueError("truncated OEPT payload")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))


def save(path, array: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, array)


def load(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)
