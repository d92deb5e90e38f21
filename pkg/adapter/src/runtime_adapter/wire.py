"""Reader for the protobuf wire format, just enough for model decoding.

Only the four wire types that appear in practice are handled: varint,
64-bit, length-delimited, and 32-bit.  Every read is bounds-checked and
malformed input raises :class:`WireError` rather than yielding garbage.
"""

from __future__ import annotations

from typing import Iterator

__all__ = [
    "FIXED32",
    "FIXED64",
    "LENGTH",
    "VARINT",
    "WireError",
    "iter_fields",
    "read_varint",
    "to_signed64",
    "unpack_varints",
]

VARINT = 0
FIXED64 = 1
LENGTH = 2
FIXED32 = 5

_U64_MAX = (1 << 64) - 1


class WireError(ValueError):
    """The byte stream is not a well-formed sequence of wire-format fields."""


def read_varint(buf: bytes, pos: int) -> tuple[int, int]:
    """Decode one base-128 varint at ``pos``; return (value, next position)."""
    result = 0
    shift = 0
    while True:
        if pos >= len(buf):
            raise WireError("truncated varint")
        byte = buf[pos]
        pos += 1
        result |= (byte & 0x7F) << shift
        if not byte & 0x80:
            break
        shift += 7
        if shift > 63:
            raise WireError("varint longer than 64 bits")
    if result > _U64_MAX:
        raise WireError("varint overflows 64 bits")
    return result, pos


def to_signed64(raw: int) -> int:
    """Reinterpret an unsigned varint value as a two's-complement int64."""
    return raw - (1 << 64) if raw >= (1 << 63) else raw


def iter_fields(buf: bytes) -> Iterator[tuple[int, int, int | bytes]]:
    """Yield (field_number, wire_type, value) for each field in ``buf``.

    Varint fields yield the raw unsigned int; 32/64-bit fields yield their
    little-endian bytes; length-delimited fields yield the payload bytes.
    """
    pos = 0
    size = len(buf)
    while pos < size:
        tag, pos = read_varint(buf, pos)
        number = tag >> 3
        wtype = tag & 0x7
        if number == 0:
            raise WireError("field number 0 is reserved")
        if wtype == VARINT:
            value, pos = read_varint(buf, pos)
        elif wtype == FIXED64:
            if pos + 8 > size:
                raise WireError("truncated 64-bit field")
            value = buf[pos:pos + 8]
            pos += 8
        elif wtype == LENGTH:
            length, pos = read_varint(buf, pos)
            if pos + length > size:
                raise WireError("length-delimited field overruns the buffer")
            value = buf[pos:pos + length]
            pos += length
        elif wtype == FIXED32:
            if pos + 4 > size:
                raise WireError("truncated 32-bit field")
            value = buf[pos:pos + 4]
            pos += 4
        else:
            raise WireError(f"unsupported wire type {wtype}")
        yield number, wtype, value


def unpack_varints(blob: bytes) -> list[int]:
    """Decode a packed run of varints (the whole blob must be consumed)."""
    values = []
    pos = 0
    while pos < len(blob):
        value, pos = read_varint(blob, pos)
        values.append(value)
    return values
