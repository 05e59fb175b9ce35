"""Versioned binary checkpoint container.

Layout (all integers little-endian):
    magic           8 bytes  b"RECCKPT1"
    version         u32
    digest_len      u16      followed by that many ascii bytes (config digest)
    n_params        u32
    per parameter:
        name_len    u16      followed by utf-8 name
        ndim        u8
        dims        ndim x u64
        data        prod(dims) x f64 little-endian

Round-trips are bit-exact: raw float64 bytes are stored untouched.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"RECCKPT1"
VERSION = 1


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint file."""


def save_checkpoint(path: str | Path, params: dict[str, np.ndarray], config_digest: str = "") -> None:
    digest = config_digest.encode("ascii")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<H", len(digest)))
        f.write(digest)
        f.write(struct.pack("<I", len(params)))
        for name, arr in params.items():
            name_b = name.encode("utf-8")
            # ascontiguousarray would promote 0-d arrays to 1-d; asarray keeps rank
            arr = np.asarray(arr, dtype="<f8", order="C")
            f.write(struct.pack("<H", len(name_b)))
            f.write(name_b)
            f.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<Q", d))
            f.write(arr.tobytes())


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], str]:
    """Returns (named parameter arrays, stored config digest)."""
    blob = Path(path).read_bytes()
    if blob[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    off = 8
    (version,) = struct.unpack_from("<I", blob, off)
    off += 4
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (dlen,) = struct.unpack_from("<H", blob, off)
    off += 2
    digest = blob[off : off + dlen].decode("ascii")
    off += dlen
    (n_params,) = struct.unpack_from("<I", blob, off)
    off += 4
    params: dict[str, np.ndarray] = {}
    for _ in range(n_params):
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off : off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<B", blob, off)
        off += 1
        dims = struct.unpack_from(f"<{ndim}Q", blob, off) if ndim else ()
        off += 8 * ndim
        count = int(np.prod(dims)) if ndim else 1
        data = np.frombuffer(blob, dtype="<f8", count=count, offset=off).copy()
        off += 8 * count
        params[name] = data.reshape(dims)
    if off != len(blob):
        raise CheckpointError(f"{path}: trailing bytes after last parameter block")
    return params, digest
