"""Canonical, deterministic byte encoding for state snapshots and digests.

Internal format (not a compatibility surface): each value is encoded as a
one-byte tag followed by fixed-width or length-prefixed payload, so distinct
token trees never collide. Used for state hashing (dedup in the explorer,
trace state hashes) and argument digests; the normative measurement and
bundle layouts live in crypto.py / attestation.py.
"""

from __future__ import annotations

import hashlib
import struct
from typing import Any

_TAG_NONE = b"\x00"
_TAG_FALSE = b"\x01"
_TAG_TRUE = b"\x02"
_TAG_INT = b"\x03"
_TAG_NEG = b"\x04"
_TAG_BYTES = b"\x05"
_TAG_STR = b"\x06"
_TAG_SEQ = b"\x07"
_TAG_BIG = b"\x08"


def u32(n: int) -> bytes:
    return struct.pack("<I", n)


def u64(n: int) -> bytes:
    return struct.pack("<Q", n)


def canon(value: Any) -> bytes:
    """Encode a token tree (None/bool/int/bytes/str/sequence) canonically."""
    out = bytearray()
    _emit(value, out)
    return bytes(out)


def _emit(value: Any, out: bytearray) -> None:
    if value is None:
        out += _TAG_NONE
    elif value is True:
        out += _TAG_TRUE
    elif value is False:
        out += _TAG_FALSE
    elif isinstance(value, int):
        mag = -value if value < 0 else value
        if mag < 1 << 64:
            out += _TAG_NEG if value < 0 else _TAG_INT
            out += u64(mag)
        else:
            raw = mag.to_bytes((mag.bit_length() + 7) // 8, "little")
            out += _TAG_BIG
            out += b"\x01" if value < 0 else b"\x00"
            out += u32(len(raw))
            out += raw
    elif isinstance(value, (bytes, bytearray, memoryview)):
        raw = bytes(value)
        out += _TAG_BYTES
        out += u32(len(raw))
        out += raw
    elif isinstance(value, str):
        raw = value.encode("utf-8")
        out += _TAG_STR
        out += u32(len(raw))
        out += raw
    elif isinstance(value, (tuple, list)):
        out += _TAG_SEQ
        out += u32(len(value))
        for item in value:
            _emit(item, out)
    else:
        raise TypeError(f"cannot canonically encode {type(value).__name__}")


def digest(value: Any) -> bytes:
    """sha3-256 over the canonical encoding."""
    return hashlib.sha3_256(canon(value)).digest()


def short_digest(value: Any) -> str:
    """16 hex chars for compact trace fields."""
    return digest(value).hex()[:16]
