"""The `.semb` embedding-stream format.

An embedding stream is an ordered sequence of (token id, vector) records
behind a fixed 20-byte header. All multi-byte integers are little-endian:

    bytes 0-3   magic ASCII "SEMB"
    bytes 4-5   version u16 = 1
    byte  6     dtype: 0 = IEEE-754 binary32 LE, 1 = binary16 LE
    byte  7     reserved = 0
    bytes 8-11  dim u32
    bytes 12-19 record_count u64 (all-ones = unknown; EOF-delimited)

Each record is token_id u32 followed by `dim` values in the declared
dtype. Values are widened to float64 on read; NaN/Inf payloads are
rejected because every downstream computation is undefined on them.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import BinaryIO, Iterable, Iterator, NamedTuple

import numpy as np

from .errors import (
    BadMagic,
    DimMismatch,
    NonFiniteValue,
    TruncatedRecord,
    UnsupportedVersion,
    ZeroDim,
)

MAGIC = b"SEMB"
VERSION = 1
HEADER_SIZE = 20
UNKNOWN_COUNT = 0xFFFF_FFFF_FFFF_FFFF

_HEADER_STRUCT = struct.Struct("<4sHBBIQ")
_TOKEN_STRUCT = struct.Struct("<I")

_DTYPE_CODES = {"float32": 0, "float16": 1}
_CODE_DTYPES = {0: "float32", 1: "float16"}
_NP_DTYPES = {"float32": np.dtype("<f4"), "float16": np.dtype("<f2")}


@dataclass
class StreamHeader:
    """Parsed `.semb` header; record_count None means unknown/EOF-delimited."""

    dtype: str
    dim: int
    record_count: int | None
    version: int = VERSION

    @property
    def value_dtype(self) -> np.dtype:
        return _NP_DTYPES[self.dtype]

    @property
    def record_size(self) -> int:
        return _TOKEN_STRUCT.size + self.dim * self.value_dtype.itemsize


class OccurrenceRecord(NamedTuple):
    """One token occurrence: the token id and its contextual embedding."""

    token: int
    embedding: np.ndarray


def read_header(source: BinaryIO) -> StreamHeader:
    """Read and validate the 20-byte header, leaving `source` at the first record."""
    raw = source.read(HEADER_SIZE)
    if len(raw) < HEADER_SIZE:
        raise BadMagic(f"stream shorter than header ({len(raw)} bytes)")
    magic, version, dtype_code, _reserved, dim, count = _HEADER_STRUCT.unpack(raw)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise UnsupportedVersion(f"stream version {version}, expected {VERSION}")
    if dtype_code not in _CODE_DTYPES:
        raise UnsupportedVersion(f"unknown dtype code {dtype_code}")
    if dim == 0:
        raise ZeroDim("header declares dim 0")
    return StreamHeader(
        dtype=_CODE_DTYPES[dtype_code],
        dim=dim,
        record_count=None if count == UNKNOWN_COUNT else count,
    )


def stream_records(source: BinaryIO, header: StreamHeader) -> Iterator[OccurrenceRecord]:
    """Yield records in file order, widened to float64.

    Raises TruncatedRecord on EOF mid-record or when fewer records than
    declared are present, NonFiniteValue on NaN/Inf payloads.
    """
    payload_size = header.dim * header.value_dtype.itemsize
    produced = 0
    while header.record_count is None or produced < header.record_count:
        head = source.read(_TOKEN_STRUCT.size)
        if len(head) == 0:
            if header.record_count is not None:
                raise TruncatedRecord(
                    f"declared {header.record_count} records, found {produced}"
                )
            return
        if len(head) < _TOKEN_STRUCT.size:
            raise TruncatedRecord(f"EOF inside token id of record {produced}")
        payload = source.read(payload_size)
        if len(payload) < payload_size:
            raise TruncatedRecord(f"EOF inside vector of record {produced}")
        (token,) = _TOKEN_STRUCT.unpack(head)
        values = np.frombuffer(payload, dtype=header.value_dtype).astype(np.float64)
        if not np.all(np.isfinite(values)):
            raise NonFiniteValue(f"record {produced} contains NaN/Inf")
        produced += 1
        yield OccurrenceRecord(token, values)


def write_stream(
    records: Iterable[OccurrenceRecord | tuple[int, np.ndarray]],
    header: StreamHeader,
    sink: BinaryIO,
) -> int:
    """Write a header plus records; returns the number of records written.

    Values are cast to the header dtype, so the output round-trips
    exactly at that precision. A record whose length differs from the
    header dim raises DimMismatch; values that become non-finite at the
    storage dtype raise NonFiniteValue.
    """
    count_field = UNKNOWN_COUNT if header.record_count is None else header.record_count
    sink.write(
        _HEADER_STRUCT.pack(
            MAGIC, VERSION, _DTYPE_CODES[header.dtype], 0, header.dim, count_field
        )
    )
    value_dtype = header.value_dtype
    written = 0
    for token, embedding in records:
        values = np.asarray(embedding)
        if values.shape != (header.dim,):
            raise DimMismatch(
                f"record {written}: vector shape {values.shape}, stream dim {header.dim}"
            )
        with np.errstate(over="ignore"):
            stored = values.astype(value_dtype)
        if not np.all(np.isfinite(stored.astype(np.float64))):
            raise NonFiniteValue(f"record {written} non-finite at dtype {header.dtype}")
        sink.write(_TOKEN_STRUCT.pack(int(token) & 0xFFFF_FFFF))
        sink.write(stored.tobytes())
        written += 1
    if header.record_count is not None and written != header.record_count:
        raise ValueError(
            f"header declares {header.record_count} records, wrote {written}"
        )
    return written


@dataclass
class StreamSummary:
    records: int
    distinct_tokens: int
    dim: int


def validate_stream(source: BinaryIO) -> StreamSummary:
    """Full structural scan; returns counts or raises on the first defect."""
    header = read_header(source)
    tokens: set[int] = set()
    records = 0
    for token, _embedding in stream_records(source, header):
        tokens.add(token)
        records += 1
    return StreamSummary(records=records, distinct_tokens=len(tokens), dim=header.dim)


def read_all(source: BinaryIO) -> tuple[StreamHeader, np.ndarray, np.ndarray]:
    """Load a whole stream: (header, token ids u32 array, n×dim float64 matrix)."""
    header = read_header(source)
    tokens: list[int] = []
    rows: list[np.ndarray] = []
    for token, embedding in stream_records(source, header):
        tokens.append(token)
        rows.append(embedding)
    matrix = (
        np.vstack(rows) if rows else np.empty((0, header.dim), dtype=np.float64)
    )
    return header, np.asarray(tokens, dtype=np.uint32), matrix
