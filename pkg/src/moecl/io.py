"""MCLB1 checkpoint container: named, shape-prefixed f64 arrays."""

import struct

import numpy as np

from .errors import DataError

MAGIC = b"MCLB1"


def save_arrays(path, arrays):
    """Write an ordered mapping of name -> float64 ndarray."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<q", len(arrays)))
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr, dtype=np.float64)
            enc = name.encode("utf-8")
            fh.write(struct.pack("<q", len(enc)))
            fh.write(enc)
            fh.write(struct.pack("<q", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}q", *arr.shape))
            fh.write(arr.tobytes())


def load_arrays(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:5] != MAGIC:
        raise DataError(f"bad magic in {path!r}")
    pos = 5

    def read(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(blob):
            raise DataError(f"truncated checkpoint {path!r}")
        vals = struct.unpack_from(fmt, blob, pos)
        pos += size
        return vals

    (count,) = read("<q")
    out = {}
    for _ in range(count):
        (name_len,) = read("<q")
        if pos + name_len > len(blob):
            raise DataError(f"truncated checkpoint {path!r}")
        name = blob[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (ndim,) = read("<q")
        shape = read(f"<{ndim}q") if ndim else ()
        n_items = int(np.prod(shape)) if shape else 1
        nbytes = n_items * 8
        if pos + nbytes > len(blob):
            raise DataError(f"truncated checkpoint {path!r}")
        out[name] = np.frombuffer(blob[pos:pos + nbytes]).reshape(shape).copy()
        pos += nbytes
    if pos != len(blob):
        raise DataError(f"trailing bytes in checkpoint {path!r}")
    return out
