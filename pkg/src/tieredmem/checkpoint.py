"""Binary checkpoint format for named float32 arrays.

Layout: magic ``MEMO``, u32 format version, u32 array count; per array:
u32 name length, name bytes, u32 rank, u32 dims, u32 dtype tag
(0 = little-endian float32), raw data. Round-trips are bit-exact.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"MEMO"
VERSION = 1
DTYPE_F32 = 0


class CheckpointError(RuntimeError):
    pass


def save_arrays(arrays, path):
    """arrays: dict name -> numpy array (written as float32 LE, sorted by name)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(arrays)))
        for name in sorted(arrays):
            arr = np.asarray(arrays[name], dtype="<f4", order="C")
            nb = name.encode()
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(struct.pack("<I", DTYPE_F32))
            f.write(arr.tobytes())


def load_arrays(path):
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise CheckpointError(f"{path}: bad magic")
        version, count = struct.unpack("<II", f.read(8))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", f.read(4))
            name = f.read(nlen).decode()
            (rank,) = struct.unpack("<I", f.read(4))
            dims = struct.unpack(f"<{rank}I", f.read(4 * rank)) if rank else ()
            (tag,) = struct.unpack("<I", f.read(4))
            if tag != DTYPE_F32:
                raise CheckpointError(f"{path}: unknown dtype tag {tag}")
            n = int(np.prod(dims)) if dims else 1
            out[name] = np.frombuffer(f.read(4 * n), dtype="<f4").reshape(dims).copy()
    return out
