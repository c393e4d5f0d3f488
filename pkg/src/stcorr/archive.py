"""Tensor archive files used for checkpoints, clips and fixtures.

Layout (all integers little-endian)::

    magic      4 bytes  b"STTA"
    version    u32      FORMAT_VERSION
    count      u64      number of entries
    per entry:
      name_len u32, name (UTF-8)
      rank     u32
      extents  rank x u64
      dtype    u8       tag from DTYPE_TAGS
      data     raw little-endian values, C order

A JSON manifest can ride along as a uint8 entry named ``__manifest__``.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"STTA"
FORMAT_VERSION = 1
MANIFEST_KEY = "__manifest__"

DTYPE_TAGS = {
    0: np.dtype("<f8"),
    1: np.dtype("<f4"),
    2: np.dtype("<i8"),
    3: np.dtype("<i4"),
    4: np.dtype("u1"),
    5: np.dtype("?"),
}
_TAG_OF = {dt: tag for tag, dt in DTYPE_TAGS.items()}


class ArchiveError(ValueError):
    pass


def _tag(arr: np.ndarray) -> int:
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    for tag, known in DTYPE_TAGS.items():
        if np.dtype(dt).kind == known.kind and np.dtype(dt).itemsize == known.itemsize:
            return tag
    raise ArchiveError(f"unsupported dtype {arr.dtype}")


def save_archive(path, tensors: Mapping[str, np.ndarray], manifest: dict | None = None) -> None:
    entries = dict(tensors)
    if manifest is not None:
        entries[MANIFEST_KEY] = np.frombuffer(
            json.dumps(manifest, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    out = bytearray(MAGIC)
    out += struct.pack("<IQ", FORMAT_VERSION, len(entries))
    for name, arr in entries.items():
        arr = np.asarray(arr)
        tag = _tag(arr)
        raw = np.ascontiguousarray(arr, dtype=DTYPE_TAGS[tag]).tobytes()
        encoded = name.encode("utf-8")
        out += struct.pack("<I", len(encoded)) + encoded
        out += struct.pack("<I", arr.ndim)
        out += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        out += struct.pack("<B", tag)
        out += raw
    Path(path).write_bytes(bytes(out))


def load_archive(path) -> tuple[dict[str, np.ndarray], dict | None]:
    """Return ``(tensors, manifest)``; manifest is None when absent."""
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ArchiveError(f"{path}: bad magic {buf[:4]!r}")
    version, count = struct.unpack_from("<IQ", buf, 4)
    if version != FORMAT_VERSION:
        raise ArchiveError(f"{path}: unsupported format version {version}")
    pos = 16
    tensors: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}Q", buf, pos)
            pos += 8 * rank
            (tag,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            dt = DTYPE_TAGS[tag]
            n = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(buf, dtype=dt, count=n, offset=pos).reshape(shape)
            pos += n * dt.itemsize
            tensors[name] = arr.astype(dt.newbyteorder("="), copy=True)
    except (struct.error, KeyError, ValueError) as exc:
        raise ArchiveError(f"{path}: truncated or corrupt archive ({exc})") from exc
    manifest = None
    if MANIFEST_KEY in tensors:
        manifest = json.loads(tensors.pop(MANIFEST_KEY).tobytes().decode("utf-8"))
    return tensors, manifest
