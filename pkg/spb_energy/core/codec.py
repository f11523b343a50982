"""Canonical length-prefixed binary encoding.

Each field is written as a 4-byte big-endian length followed by its bytes.
Integers are encoded as 8-byte big-endian signed values, strings as UTF-8.
"""

import struct
from typing import Iterable, List, Union

Field = Union[bytes, int, str, bool]

_LENGTH = struct.Struct(">I")
_INT = struct.Struct(">q")


def encode_field(value: Field) -> bytes:
    """Encode a single field with its length prefix."""
    if isinstance(value, bool):
        raw = b"\x01" if value else b"\x00"
    elif isinstance(value, int):
        raw = _INT.pack(value)
    elif isinstance(value, str):
        raw = value.encode("utf-8")
    elif isinstance(value, (bytes, bytearray)):
        raw = bytes(value)
    else:
        raise TypeError(f"Cannot encode field of type {type(value).__name__}")
    return _LENGTH.pack(len(raw)) + raw


def encode_fields(values: Iterable[Field]) -> bytes:
    """Encode fields in order."""
    return b"".join(encode_field(v) for v in values)


def decode_fields(data: bytes) -> List[bytes]:
    """Split a length-prefixed buffer back into raw field payloads.

    Raises
    ------
        ValueError: if the buffer is truncated
    """
    fields = []
    offset = 0
    while offset < len(data):
        if offset + _LENGTH.size > len(data):
            raise ValueError("Truncated length prefix")
        (length,) = _LENGTH.unpack_from(data, offset)
        offset += _LENGTH.size
        if offset + length > len(data):
            raise ValueError("Truncated field")
        fields.append(data[offset : offset + length])
        offset += length
    return fields


def decode_int(raw: bytes) -> int:
    """Decode an 8-byte signed integer field."""
    return _INT.unpack(raw)[0]
