"""Binary checkpoint container with exact round-trip guarantees.

Byte layout (all integers little-endian, no alignment padding):

    offset  size  field
    0       4     magic "MVCK"
    4       4     format version (u32), currently 1
    8       4     metadata length M (u32)
    12      M     metadata, UTF-8 JSON (canonical: sorted keys, no spaces)
    ...     4     entry count (u32)
    per entry:
            2     name length L (u16)
            L     name, UTF-8
            1     rank (u8)
            4*r   dims (u32 each)
            4*n   data, float32, C order (n = product of dims)
    last 4        CRC32 of every preceding byte (u32)

Writes are atomic (temp file + rename) and refuse non-finite values.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from typing import Dict, Optional, Tuple

import numpy as np

from .errors import (
    BadMagicError,
    CheckpointFormatError,
    CrcError,
    NumericError,
    ShapeMismatchError,
    UnsupportedVersionError,
)
from .nn_core import ParameterStore

MAGIC = b"MVCK"
FORMAT_VERSION = 1


def _canonical_meta(meta: dict) -> bytes:
    return json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save(arrays: Dict[str, np.ndarray], meta: dict, path: str) -> None:
    """Write named float32 arrays plus a JSON metadata blob."""
    chunks = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    meta_bytes = _canonical_meta(meta)
    chunks.append(struct.pack("<I", len(meta_bytes)))
    chunks.append(meta_bytes)
    chunks.append(struct.pack("<I", len(arrays)))
    seen = set()
    for name, value in arrays.items():
        if name in seen:
            raise CheckpointFormatError(f"duplicate entry name {name!r}")
        seen.add(name)
        data = np.ascontiguousarray(value, dtype="<f4")
        if not np.isfinite(data).all():
            raise NumericError(f"refusing to save non-finite values in {name!r}")
        name_bytes = name.encode("utf-8")
        if len(name_bytes) > 0xFFFF:
            raise CheckpointFormatError(f"entry name too long: {name!r}")
        if data.ndim > 0xFF:
            raise CheckpointFormatError(f"entry rank too large: {name!r}")
        chunks.append(struct.pack("<H", len(name_bytes)))
        chunks.append(name_bytes)
        chunks.append(struct.pack("<B", data.ndim))
        chunks.append(struct.pack(f"<{data.ndim}I", *data.shape))
        chunks.append(data.tobytes())
    payload = b"".join(chunks)
    payload += struct.pack("<I", zlib.crc32(payload))
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointFormatError(
                f"truncated checkpoint: needed {n} bytes for {what} at offset {self.pos}"
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u16(self, what: str) -> int:
        return struct.unpack("<H", self.take(2, what))[0]

    def u8(self, what: str) -> int:
        return struct.unpack("<B", self.take(1, what))[0]


def load(path: str) -> Tuple[Dict[str, np.ndarray], dict]:
    """Read back (arrays, metadata); every failure mode is a distinct error."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < len(MAGIC) + 12:
        raise CheckpointFormatError(f"file too short ({len(buf)} bytes)")
    if buf[: len(MAGIC)] != MAGIC:
        raise BadMagicError(f"bad magic {buf[:len(MAGIC)]!r}, expected {MAGIC!r}")
    expected_crc = struct.unpack("<I", buf[-4:])[0]
    actual_crc = zlib.crc32(buf[:-4])
    if expected_crc != actual_crc:
        raise CrcError(
            f"CRC mismatch over bytes [0, {len(buf) - 4}): stored "
            f"{expected_crc:#010x}, computed {actual_crc:#010x}"
        )
    r = _Reader(buf[:-4])
    r.take(len(MAGIC), "magic")
    version = r.u32("version")
    if version > FORMAT_VERSION:
        raise UnsupportedVersionError(
            f"checkpoint version {version} newer than supported {FORMAT_VERSION}"
        )
    meta_len = r.u32("metadata length")
    try:
        meta = json.loads(r.take(meta_len, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"invalid metadata JSON: {exc}") from exc
    count = r.u32("entry count")
    arrays: Dict[str, np.ndarray] = {}
    for _ in range(count):
        name_len = r.u16("name length")
        try:
            name = r.take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointFormatError(f"invalid entry name bytes: {exc}") from exc
        if name in arrays:
            raise CheckpointFormatError(f"duplicate entry name {name!r}")
        rank = r.u8("rank")
        dims = tuple(r.u32(f"dim of {name!r}") for _ in range(rank))
        n = 1
        for d in dims:
            n *= d
        raw = r.take(4 * n, f"data of {name!r}")
        arrays[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
    if r.pos != len(r.buf):
        raise CheckpointFormatError(
            f"{len(r.buf) - r.pos} trailing bytes after the last entry"
        )
    if not isinstance(meta, dict):
        raise CheckpointFormatError("metadata must be a JSON object")
    return arrays, meta


# ---------------------------------------------------------------------------
# Model-level helpers


def save_checkpoint(
    store: ParameterStore,
    meta: dict,
    path: str,
    extra_arrays: Optional[Dict[str, np.ndarray]] = None,
) -> None:
    """Persist a parameter store (plus optional optimizer state) and configs."""
    arrays: Dict[str, np.ndarray] = {name: p.data for name, p in store.items()}
    if extra_arrays:
        overlap = set(arrays) & set(extra_arrays)
        if overlap:
            raise CheckpointFormatError(f"extra array names collide: {sorted(overlap)}")
        arrays.update(extra_arrays)
    save(arrays, meta, path)


def load_into_store(store: ParameterStore, arrays: Dict[str, np.ndarray]) -> None:
    """Assign stored values into an already-built store, validating shapes."""
    for name in store.names():
        if name not in arrays:
            raise ShapeMismatchError(f"checkpoint is missing parameter {name!r}")
        value = arrays[name]
        expected = store[name].data.shape
        if tuple(value.shape) != expected:
            raise ShapeMismatchError(
                f"parameter {name!r}: checkpoint shape {tuple(value.shape)} vs "
                f"model shape {expected}"
            )
        store.set_value(name, value)
