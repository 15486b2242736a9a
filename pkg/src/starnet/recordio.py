"""Binary record container used by checkpoints and feature caches.

Layout: magic ``STARNET1``, version u32, a 32-byte content hash, record
count u32, then per record: name length u32 + UTF-8 name, rank u32, one u64
extent per axis, the float64 little-endian payload, and a CRC32 over the
record's own bytes. All integers little-endian.
"""
from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .synthdata import ChecksumError, FormatError

MAGIC = b"STARNET1"
VERSION = 1


class ConfigMismatchError(ValueError):
    """Stored content hash does not match what the caller expects."""


def pack_records(content_hash: bytes, records) -> bytes:
    """records: iterable of (name, float64 ndarray)."""
    if len(content_hash) != 32:
        raise ValueError("content hash must be 32 bytes")
    records = list(records)
    out = [MAGIC, struct.pack("<I", VERSION), content_hash,
           struct.pack("<I", len(records))]
    for name, arr in records:
        arr = np.ascontiguousarray(arr, dtype="<f8")
        name_b = name.encode("utf-8")
        body = struct.pack("<I", len(name_b)) + name_b
        body += struct.pack("<I", arr.ndim)
        body += b"".join(struct.pack("<Q", e) for e in arr.shape)
        body += arr.tobytes()
        out.append(body)
        out.append(struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))
    return b"".join(out)


def unpack_records(raw: bytes, label: str = "records") -> tuple:
    """-> (content_hash, list[(name, ndarray)]); verifies every CRC."""
    if len(raw) < 48 or raw[:8] != MAGIC:
        raise FormatError(f"{label}: bad magic")
    (version,) = struct.unpack("<I", raw[8:12])
    if version != VERSION:
        raise FormatError(f"{label}: unsupported version {version}")
    content_hash = raw[12:44]
    (count,) = struct.unpack("<I", raw[44:48])
    pos = 48
    records = []
    for i in range(count):
        start = pos
        try:
            (name_len,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            name = raw[pos:pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}Q", raw, pos) if rank else ()
            pos += 8 * rank
            n_elem = 1
            for e in shape:
                n_elem *= e
            payload_end = pos + 8 * n_elem
            payload = raw[pos:payload_end]
            if len(payload) != 8 * n_elem:
                raise struct.error("payload short")
            pos = payload_end
            (crc,) = struct.unpack_from("<I", raw, pos)
            pos += 4
        except (struct.error, UnicodeDecodeError) as exc:
            raise FormatError(f"{label}: truncated or malformed record {i}: {exc}")
        if zlib.crc32(raw[start:pos - 4]) & 0xFFFFFFFF != crc:
            raise ChecksumError(f"{label}: CRC mismatch in record {i} ({name!r})")
        arr = np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)
        records.append((name, arr))
    if pos != len(raw):
        raise FormatError(f"{label}: {len(raw) - pos} trailing bytes")
    return content_hash, records


def write_records(path, content_hash: bytes, records) -> None:
    Path(path).write_bytes(pack_records(content_hash, records))


def read_records(path) -> tuple:
    return unpack_records(Path(path).read_bytes(), str(path))


def peek_hash(path) -> bytes:
    """Read just the header's content hash."""
    with open(path, "rb") as fh:
        head = fh.read(44)
    if len(head) < 44 or head[:8] != MAGIC:
        raise FormatError(f"{path}: bad magic")
    return head[12:44]
