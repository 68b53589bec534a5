"""Binary checkpoint files for named parameter/buffer arrays.

Layout (all integers little-endian):

    magic  b"CKPT"
    u16    format version: 1 = float32 payload, 2 = float64 payload
    entry* where entry =
        u32    name length in bytes
        bytes  UTF-8 name
        u8     ndim
        u64*   one extent per dimension
        bytes  row-major little-endian scalars

All entries in one file share a dtype (it is encoded by the version), so
a write/read/write cycle is byte-exact.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .errors import CorruptionError, FormatError, UsageError

MAGIC = b"CKPT"

_VERSION_BY_DTYPE = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_DTYPE_BY_VERSION = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


def save_checkpoint(entries, path) -> None:
    """Write named arrays in iteration order. ``entries`` maps name -> array."""
    items = list(entries.items() if isinstance(entries, dict) else entries)
    if not items:
        raise UsageError("refusing to write an empty checkpoint")
    dtypes = {np.asarray(a).dtype for _, a in items}
    if len(dtypes) != 1:
        raise UsageError(f"checkpoint entries must share one dtype, got {sorted(map(str, dtypes))}")
    dtype = dtypes.pop()
    if dtype not in _VERSION_BY_DTYPE:
        raise UsageError(f"checkpoints store float32 or float64, got {dtype}")

    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<H", _VERSION_BY_DTYPE[dtype]))
        for name, arr in items:
            arr = np.ascontiguousarray(arr)
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<Q", dim))
            fh.write(arr.astype(dtype.newbyteorder("<"), copy=False).tobytes())


def load_checkpoint(path) -> "OrderedDict[str, np.ndarray]":
    """Read a checkpoint back as an ordered name -> array mapping."""
    blob = Path(path).read_bytes()
    if len(blob) < 6 or blob[:4] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<H", blob, 4)
    dtype = _DTYPE_BY_VERSION.get(version)
    if dtype is None:
        raise FormatError(f"{path}: unknown checkpoint format version {version}")

    out: OrderedDict[str, np.ndarray] = OrderedDict()
    off = 6
    total = len(blob)
    while off < total:
        if off + 4 > total:
            raise CorruptionError(f"{path}: truncated entry header")
        (name_len,) = struct.unpack_from("<I", blob, off)
        off += 4
        if off + name_len + 1 > total:
            raise CorruptionError(f"{path}: truncated entry name")
        name = blob[off : off + name_len].decode("utf-8")
        off += name_len
        ndim = blob[off]
        off += 1
        if off + 8 * ndim > total:
            raise CorruptionError(f"{path}: truncated shape for {name!r}")
        shape = struct.unpack_from(f"<{ndim}Q", blob, off) if ndim else ()
        off += 8 * ndim
        count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        nbytes = count * dtype.itemsize
        if off + nbytes > total:
            raise CorruptionError(f"{path}: payload for {name!r} ends past end of file")
        if name in out:
            raise CorruptionError(f"{path}: duplicate entry {name!r}")
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=off).reshape(shape)
        out[name] = arr.astype(dtype.newbyteorder("="), copy=True)
        off += nbytes
    return out
