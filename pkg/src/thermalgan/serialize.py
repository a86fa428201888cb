"""Flat binary tensor format.

Layout, little-endian: magic ``TGT1``, u32 rank, rank x u64 extents, then
the float32 values in C order.
"""

import struct

import numpy as np

MAGIC = b"TGT1"


class FormatError(ValueError):
    """Serialized data is truncated or malformed."""


def tensor_to_bytes(arr):
    arr = np.ascontiguousarray(arr, dtype="<f4")
    head = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes()


def tensor_from_bytes(buf, offset=0):
    """Decode one tensor at ``offset``; returns ``(array, new_offset)``."""
    end = len(buf)
    if offset + 8 > end or buf[offset : offset + 4] != MAGIC:
        raise FormatError(f"no TGT1 tensor at offset {offset}")
    (rank,) = struct.unpack_from("<I", buf, offset + 4)
    offset += 8
    if offset + 8 * rank > end:
        raise FormatError("truncated tensor header")
    shape = struct.unpack_from(f"<{rank}Q", buf, offset)
    offset += 8 * rank
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    nbytes = 4 * count
    if offset + nbytes > end:
        raise FormatError(f"truncated tensor data: need {nbytes} bytes, have {end - offset}")
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=offset).astype(np.float32).reshape(shape)
    return arr, offset + nbytes


def save_tensor(path, arr):
    with open(path, "wb") as f:
        f.write(tensor_to_bytes(arr))


def load_tensor(path):
    with open(path, "rb") as f:
        buf = f.read()
    arr, off = tensor_from_bytes(buf)
    if off != len(buf):
        raise FormatError(f"{len(buf) - off} trailing bytes after tensor")
    return arr
