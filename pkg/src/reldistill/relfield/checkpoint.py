"""Field checkpoint container.

Layout (all little-endian)::

    magic     4 bytes  b"RLFD"
    version   uint32   1
    box_min   3 x float64
    box_max   3 x float64
    res       3 x uint32   (nx, ny, nz)
    channels  uint32       relevancy channel count C
    payload   float32[4 + C][nz][ny][nx]

The payload is channel-major with x varying fastest. Channel order is
density, r, g, b, relevancy_0 .. relevancy_{C-1}; values are raw logits.
"""
from __future__ import annotations

import struct

import numpy as np

from ..errors import ParseError
from .field import RelevancyField

MAGIC = b"RLFD"
VERSION = 1
_HEADER = struct.Struct("<4sI3d3d3II")


def to_bytes(field: RelevancyField) -> bytes:
    head = _HEADER.pack(MAGIC, VERSION, *field.lo, *field.hi, *field.resolution, field.channels)
    payload = np.ascontiguousarray(field.params.transpose(3, 2, 1, 0), dtype="<f4")
    return head + payload.tobytes()


def from_bytes(data: bytes) -> RelevancyField:
    if len(data) < _HEADER.size:
        raise ParseError("checkpoint truncated in header")
    magic, version, *rest = _HEADER.unpack_from(data)
    if magic != MAGIC or version != VERSION:
        raise ParseError("not a field checkpoint (bad magic or version)")
    lo, hi, res, C = rest[0:3], rest[3:6], tuple(rest[6:9]), rest[9]
    count = (4 + C) * res[0] * res[1] * res[2]
    payload = np.frombuffer(data, dtype="<f4", offset=_HEADER.size)
    if payload.size != count:
        raise ParseError(f"checkpoint payload has {payload.size} values, expected {count}")
    params = payload.reshape(4 + C, res[2], res[1], res[0]).transpose(3, 2, 1, 0).astype(np.float64)
    return RelevancyField(lo, hi, res, C, params)


def save_field(field: RelevancyField, path) -> None:
    with open(path, "wb") as f:
        f.write(to_bytes(field))


def load_field(path) -> RelevancyField:
    with open(path, "rb") as f:
        return from_bytes(f.read())
