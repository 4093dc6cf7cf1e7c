"""MLTA tensor archive: the on-disk format for weights, datasets and checkpoints.

Layout, little-endian throughout:

    magic  4 bytes  b"MLTA"
    u32    version (currently 1)
    u32    entry count
    per entry:
        u16   name length
        ...   UTF-8 name
        u8    dtype code (0 = float32, 1 = float64)
        u8    rank
        u64 x rank  extents
        raw row-major payload

dtype code 1 exists so 64-bit verification builds round-trip bit-exactly;
code 0 is what every shipped archive uses. Entries are written in sorted
name order so identical contents produce identical bytes.
"""

from __future__ import annotations

import struct
from typing import Dict

import numpy as np

from .errors import ArchiveError

MAGIC = b"MLTA"
VERSION = 1

_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def save_archive(path, entries: Dict[str, np.ndarray]) -> None:
    """Write a name->array mapping; arrays must be float32/float64."""
    names = sorted(entries)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(names)))
        for name in names:
            arr = np.ascontiguousarray(entries[name])
            if arr.dtype not in _DTYPE_CODES:
                raise ArchiveError(f"entry '{name}': unsupported dtype {arr.dtype}")
            raw = name.encode("utf-8")
            if len(raw) > 0xFFFF:
                raise ArchiveError(f"entry name too long ({len(raw)} bytes)")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def load_archive(path) -> Dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise ArchiveError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    off = 4
    try:
        version, count = struct.unpack_from("<II", data, off)
    except struct.error as exc:
        raise ArchiveError("truncated header") from exc
    off += 8
    if version != VERSION:
        raise ArchiveError(f"unsupported version {version}")
    out: Dict[str, np.ndarray] = {}
    for i in range(count):
        try:
            (nlen,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off:off + nlen].decode("utf-8")
            off += nlen
            code, rank = struct.unpack_from("<BB", data, off)
            off += 2
            shape = struct.unpack_from(f"<{rank}Q", data, off)
            off += 8 * rank
        except struct.error as exc:
            raise ArchiveError(f"truncated entry header at index {i}") from exc
        if code not in _CODE_DTYPES:
            raise ArchiveError(f"entry '{name}': unknown dtype code {code}")
        dtype = _CODE_DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if rank else dtype.itemsize
        if rank == 0:
            nbytes = dtype.itemsize
        payload = data[off:off + nbytes]
        if len(payload) != nbytes:
            raise ArchiveError(f"entry '{name}': truncated payload")
        off += nbytes
        arr = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
        out[name] = arr
    if off != len(data):
        raise ArchiveError(f"{len(data) - off} trailing bytes after last entry")
    return out
