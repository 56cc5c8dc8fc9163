"""Minimal `.semb` stream writer.

The byte format is the contract with the sense-dictionary tooling
(all multi-byte integers little-endian): magic "SEMB", version u16 = 1,
dtype u8 (0 = float32 LE), reserved u8 = 0, dim u32, record_count u64
(all-ones = unknown), then records of token_id u32 followed by `dim`
float32 values.
"""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

MAGIC = b"SEMB"
VERSION = 1
DTYPE_FLOAT32 = 0
UNKNOWN_COUNT = 0xFFFF_FFFF_FFFF_FFFF

_HEADER = struct.Struct("<4sHBBIQ")
_TOKEN = struct.Struct("<I")
_COUNT_OFFSET = 12


def write_header(sink: BinaryIO, dim: int, record_count: int = UNKNOWN_COUNT) -> None:
    sink.write(_HEADER.pack(MAGIC, VERSION, DTYPE_FLOAT32, 0, dim, record_count))


def write_record(sink: BinaryIO, token_id: int, vector: np.ndarray) -> None:
    sink.write(_TOKEN.pack(int(token_id)))
    sink.write(np.ascontiguousarray(vector, dtype="<f4").tobytes())


def patch_record_count(sink: BinaryIO, record_count: int) -> None:
    """Overwrite the header's count field once the true total is known."""
    sink.seek(_COUNT_OFFSET)
    sink.write(struct.pack("<Q", record_count))
