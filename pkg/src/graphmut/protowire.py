"""Minimal protobuf wire-format codec.

Just enough of the encoding (varints, 32-bit fixed, length-delimited fields)
to read and write the ONNX message subset this package uses, with fully
deterministic byte output. No schema compiler involved: callers state field
numbers explicitly.
"""
from __future__ import annotations

import struct

_MASK64 = (1 << 64) - 1

VARINT = 0
FIXED64 = 1
LENGTH = 2
FIXED32 = 5


class WireError(Exception):
    """Raised on malformed wire data."""


def encode_varint(value: int) -> bytes:
    value &= _MASK64  # negatives as 64-bit two's complement, per protobuf
    out = bytearray()
    while True:
        byte = value & 0x7F
        value >>= 7
        if value:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return bytes(out)


def decode_varint(data: bytes, pos: int) -> tuple[int, int]:
    result = 0
    shift = 0
    while True:
        if pos >= len(data):
            raise WireError("truncated varint")
        byte = data[pos]
        pos += 1
        result |= (byte & 0x7F) << shift
        if not byte & 0x80:
            return result & _MASK64, pos
        shift += 7
        if shift >= 70:
            raise WireError("varint too long")


def to_signed64(value: int) -> int:
    value &= _MASK64
    return value - (1 << 64) if value >= (1 << 63) else value


class Writer:
    """Appends protobuf fields to a growing buffer."""

    def __init__(self):
        self._buf = bytearray()

    def _tag(self, field: int, wire: int):
        self._buf += encode_varint((field << 3) | wire)

    def varint_field(self, field: int, value: int):
        self._tag(field, VARINT)
        self._buf += encode_varint(value)

    def float_field(self, field: int, value: float):
        self._tag(field, FIXED32)
        self._buf += struct.pack("<f", value)

    def bytes_field(self, field: int, value: bytes):
        self._tag(field, LENGTH)
        self._buf += encode_varint(len(value))
        self._buf += value

    def string_field(self, field: int, value: str):
        self.bytes_field(field, value.encode("utf-8"))

    def message_field(self, field: int, sub: "Writer"):
        self.bytes_field(field, bytes(sub))

    def packed_varints_field(self, field: int, values) -> None:
        payload = b"".join(encode_varint(v) for v in values)
        self.bytes_field(field, payload)

    def __bytes__(self) -> bytes:
        return bytes(self._buf)


def iter_fields(data: bytes):
    """Yield (field_number, wire_type, value) triples from one message.

    Length-delimited values come back as bytes; varints as unsigned ints;
    fixed32/fixed64 as raw bytes of that width.
    """
    pos = 0
    while pos < len(data):
        key, pos = decode_varint(data, pos)
        field, wire = key >> 3, key & 0x7
        if wire == VARINT:
            value, pos = decode_varint(data, pos)
        elif wire == LENGTH:
            size, pos = decode_varint(data, pos)
            if pos + size > len(data):
                raise WireError(f"field {field}: truncated payload")
            value = data[pos : pos + size]
            pos += size
        elif wire == FIXED32:
            if pos + 4 > len(data):
                raise WireError(f"field {field}: truncated fixed32")
            value = data[pos : pos + 4]
            pos += 4
        elif wire == FIXED64:
            if pos + 8 > len(data):
                raise WireError(f"field {field}: truncated fixed64")
            value = data[pos : pos + 8]
            pos += 8
        else:
            raise WireError(f"unsupported wire type {wire} for field {field}")
        yield field, wire, value


def decode_packed_varints(data: bytes) -> list[int]:
    out = []
    pos = 0
    while pos < len(data):
        value, pos = decode_varint(data, pos)
        out.append(value)
    return out


def read_float32(raw: bytes) -> float:
    return struct.unpack("<f", raw)[0]
