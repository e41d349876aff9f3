"""Binary container shared by dataset and checkpoint files.

Layout: magic bytes, u16 little-endian version, u32 little-endian length of a
UTF-8 JSON header, the header itself, then a raw payload whose interpretation
is up to the caller.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path


class FormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def pack(magic: bytes, version: int, header: dict, payload: bytes) -> bytes:
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return magic + struct.pack("<HI", version, len(head)) + head + payload


def unpack(blob: bytes, magic: bytes, version: int) -> tuple[dict, memoryview, int]:
    """Return ``(header, payload, payload_offset)`` or raise :class:`FormatError`."""
    n = len(magic)
    if len(blob) < n or blob[:n] != magic:
        raise FormatError(f"bad magic, expected {magic!r}", 0)
    if len(blob) < n + 6:
        raise FormatError("truncated preamble", len(blob))
    ver, hlen = struct.unpack_from("<HI", blob, n)
    if ver != version:
        raise FormatError(f"unsupported version {ver}", n)
    start = n + 6
    if len(blob) < start + hlen:
        raise FormatError("truncated header", len(blob))
    try:
        header = json.loads(bytes(blob[start:start + hlen]).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable header: {exc}", start) from None
    off = start + hlen
    return header, memoryview(blob)[off:], off


def write_bytes(path, blob: bytes) -> None:
    Path(path).write_bytes(blob)


def read_bytes(path) -> bytes:
    return Path(path).read_bytes()
