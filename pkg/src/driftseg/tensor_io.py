"""Flat binary tensor blocks.

Layout, little-endian throughout:

    magic   4 bytes  b"CDT1"  (compact dense tensor, version 1)
    prec    u8       1 = float32, 2 = float64
    rank    u8       1..4
    dims    rank * u32
    data    prod(dims) raw values, C order

Round trips are bit-exact; these blocks are embedded in checkpoint
containers and written per sample in dataset directories.
"""

import io
import struct

import numpy as np

from .errors import FormatError

MAGIC = b"CDT1"
_PREC_TO_DTYPE = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_DTYPE_TO_PREC = {"float32": 1, "float64": 2}
MAX_RANK = 4


def write_tensor(fp, arr: np.ndarray) -> None:
    """Append one block to a binary file object."""
    prec = _DTYPE_TO_PREC.get(arr.dtype.name)
    if prec is None:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    if not 1 <= arr.ndim <= MAX_RANK:
        raise FormatError(f"rank must be 1..{MAX_RANK}, got {arr.ndim}")
    fp.write(MAGIC)
    fp.write(struct.pack("<BB", prec, arr.ndim))
    fp.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fp.write(np.ascontiguousarray(arr, dtype=_PREC_TO_DTYPE[prec]).tobytes())


def read_tensor(fp) -> np.ndarray:
    """Read one block from a binary file object."""
    magic = fp.read(4)
    if magic != MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}")
    head = fp.read(2)
    if len(head) != 2:
        raise FormatError("truncated tensor header")
    prec, rank = struct.unpack("<BB", head)
    if prec not in _PREC_TO_DTYPE:
        raise FormatError(f"unknown precision tag {prec}")
    if not 1 <= rank <= MAX_RANK:
        raise FormatError(f"bad rank {rank}")
    raw = fp.read(4 * rank)
    if len(raw) != 4 * rank:
        raise FormatError("truncated dims")
    dims = struct.unpack(f"<{rank}I", raw)
    dtype = _PREC_TO_DTYPE[prec]
    count = int(np.prod(dims)) if rank else 0
    payload = fp.read(count * dtype.itemsize)
    if len(payload) != count * dtype.itemsize:
        raise FormatError("truncated tensor payload")
    return np.frombuffer(payload, dtype=dtype).reshape(dims).copy()


def save_tensor(path, arr: np.ndarray) -> None:
    with open(path, "wb") as fp:
        write_tensor(fp, arr)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fp:
        arr = read_tensor(fp)
        if fp.read(1):
            raise FormatError(f"trailing bytes after tensor block in {path}")
    return arr


def tensor_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, arr)
    return buf.getvalue()
