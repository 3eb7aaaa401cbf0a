"""GI2I binary tensor container.

Layout: magic ``b"GI2I"``, version u8 (=1), ndim u8, ndim x u32 extents, then
the little-endian float64 payload in row-major order. No padding.
"""

import struct

import numpy as np

from ..errors import InputError

MAGIC = b"GI2I"
VERSION = 1


def tensor_to_bytes(arr):
    arr = np.asarray(getattr(arr, "data", arr), dtype=np.float64)
    if arr.ndim > 255:
        raise InputError("too many dimensions for GI2I")
    head = MAGIC + struct.pack("<BB", VERSION, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f8").tobytes()


def tensor_from_bytes(buf, offset=0):
    """Decode one tensor starting at ``offset``; returns (array, end_offset)."""
    if bytes(buf[offset : offset + 4]) != MAGIC:
        raise InputError("bad magic: not a GI2I tensor")
    version, ndim = struct.unpack_from("<BB", buf, offset + 4)
    if version != VERSION:
        raise InputError(f"unsupported GI2I version {version}")
    pos = offset + 6
    shape = struct.unpack_from(f"<{ndim}I", buf, pos)
    pos += 4 * ndim
    count = int(np.prod(shape)) if ndim else 1
    end = pos + 8 * count
    if end > len(buf):
        raise InputError("truncated GI2I payload")
    arr = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).astype(np.float64).reshape(shape)
    return arr, end


def save_tensor(path, arr):
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(arr))


def load_tensor(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    arr, end = tensor_from_bytes(buf)
    if end != len(buf):
        raise InputError(f"{path}: trailing bytes after GI2I tensor")
    return arr
