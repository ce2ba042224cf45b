"""Self-describing binary tensor container.

Layout (all integers little-endian):

    magic   4 bytes  "XAST"
    version u32
    repeated until EOF:
        name_len u32, name (utf-8),
        dtype tag u8, ndim u32, shape ndim x u64,
        payload (row-major)

Dtype tags: 0 = float32, 1 = float64, 2 = int32, 3 = int64.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import DataError

MAGIC = b"XAST"
VERSION = 1

_TAG_TO_DTYPE = {0: "<f4", 1: "<f8", 2: "<i4", 3: "<i8"}
_DTYPE_TO_TAG = {
    np.dtype(np.float32): 0,
    np.dtype(np.float64): 1,
    np.dtype(np.int32): 2,
    np.dtype(np.int64): 3,
}


def write_tensors(path, tensors: dict[str, np.ndarray]):
    """Write named tensors to `path`. Insertion order is preserved."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr)
            if arr.dtype not in _DTYPE_TO_TAG:
                if np.issubdtype(arr.dtype, np.integer):
                    arr = arr.astype(np.int64)
                elif np.issubdtype(arr.dtype, np.floating):
                    arr = arr.astype(np.float64)
                else:
                    raise DataError(f"unsupported dtype {arr.dtype} for {name!r}")
            name_b = name.encode("utf-8")
            f.write(struct.pack("<I", len(name_b)))
            f.write(name_b)
            f.write(struct.pack("<BI", _DTYPE_TO_TAG[arr.dtype], arr.ndim))
            for dim in arr.shape:
                f.write(struct.pack("<Q", dim))
            f.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def read_tensors(path) -> dict[str, np.ndarray]:
    """Read all tensors from `path` into a name -> array dict."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise DataError(f"bad magic in {path}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise DataError(f"unsupported container version {version}")
    off = 8
    out: dict[str, np.ndarray] = {}
    while off < len(blob):
        (name_len,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + name_len].decode("utf-8")
        off += name_len
        tag, ndim = struct.unpack_from("<BI", blob, off)
        off += 5
        if tag not in _TAG_TO_DTYPE:
            raise DataError(f"unknown dtype tag {tag} for {name!r}")
        shape = struct.unpack_from(f"<{ndim}Q", blob, off)
        off += 8 * ndim
        dtype = np.dtype(_TAG_TO_DTYPE[tag])
        count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        nbytes = count * dtype.itemsize
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=off)
        off += nbytes
        out[name] = arr.reshape(shape).copy()
    return out
