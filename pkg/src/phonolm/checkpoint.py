"""Binary container for named float64 tensors.

Layout (all integers little-endian):

    magic    4 bytes  b"PHLM"
    version  u32
    record*  until EOF, each:
        name_len  u32
        name      UTF-8 bytes
        rank      u64
        dims      u64 * rank
        payload   little-endian f64 * prod(dims)

Model parameters, K-means codebooks and RVQ layers all serialize through this
one container; configs travel in JSON sidecars.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"PHLM"
VERSION = 1


class CheckpointError(ValueError):
    """Corrupt or incompatible checkpoint file."""


def save_tensors(path, tensors: dict) -> None:
    """Write {name: array} to `path`. Order follows dict insertion order."""
    path = Path(path)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(np.asarray(arr, dtype=np.float64))
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<Q", arr.ndim))
            for dim in arr.shape:
                f.write(struct.pack("<Q", dim))
            f.write(arr.astype("<f8", copy=False).tobytes())


def load_tensors(path) -> dict:
    """Read a container back into {name: float64 array}, preserving order."""
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    out = {}
    off = 8
    total = len(blob)
    while off < total:
        (name_len,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off : off + name_len].decode("utf-8")
        off += name_len
        (rank,) = struct.unpack_from("<Q", blob, off)
        off += 8
        dims = struct.unpack_from(f"<{rank}Q", blob, off)
        off += 8 * rank
        count = int(np.prod(dims)) if rank else 1
        end = off + 8 * count
        if end > total:
            raise CheckpointError(f"{path}: truncated payload for {name!r}")
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=off)
        out[name] = arr.astype(np.float64).reshape(dims)
        off = end
    return out
