"""Checkpoint container: magic "MPRS", u32 version, JSON header, raw blobs.

Layout:
    bytes 0..3   magic b"MPRS"
    bytes 4..7   format version, little-endian u32
    bytes 8..15  header length, little-endian u64
    header       UTF-8 JSON: config snapshot, RNG states, progress cursor,
                 log rows, and an ordered blob directory [{name, shape}]
    blobs        float64 little-endian arrays, in directory order

Save -> load round-trips byte-identically; any truncation or version
mismatch raises a typed format error instead of crashing.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import FormatError

MAGIC = b"MPRS"
VERSION = 1


def save_checkpoint(path: str, header: dict, blobs: dict[str, np.ndarray]) -> None:
    """Write header metadata plus named float64 arrays."""
    directory = [{"name": k, "shape": list(v.shape)} for k, v in blobs.items()]
    full_header = dict(header)
    full_header["blobs"] = directory
    header_bytes = json.dumps(full_header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(header_bytes)
        for entry in directory:
            arr = np.ascontiguousarray(blobs[entry["name"]], dtype="<f8")
            f.write(arr.tobytes())


def load_checkpoint(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a checkpoint; returns (header, blobs)."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r} at byte offset 0")
        raw = f.read(4)
        if len(raw) != 4:
            raise FormatError("truncated checkpoint version field at byte offset 4")
        version = struct.unpack("<I", raw)[0]
        if version != VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        raw = f.read(8)
        if len(raw) != 8:
            raise FormatError("truncated checkpoint header length at byte offset 8")
        (header_len,) = struct.unpack("<Q", raw)
        header_bytes = f.read(header_len)
        if len(header_bytes) != header_len:
            raise FormatError(f"truncated checkpoint header at byte offset {16 + len(header_bytes)}")
        try:
            header = json.loads(header_bytes.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"corrupt checkpoint header: {exc}") from exc
        blobs: dict[str, np.ndarray] = {}
        offset = 16 + header_len
        for entry in header.get("blobs", []):
            shape = tuple(int(s) for s in entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = f.read(count * 8)
            if len(raw) != count * 8:
                raise FormatError(
                    f"truncated blob {entry['name']!r} at byte offset {offset + len(raw)}"
                )
            blobs[entry["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
            offset += count * 8
        if f.read(1):
            raise FormatError(f"trailing bytes after final blob at byte offset {offset}")
    return header, blobs
