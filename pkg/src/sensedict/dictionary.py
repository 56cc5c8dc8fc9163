"""The multi-sense dictionary: build, query, persist, audit.

A dictionary maps each token id to its ordered set of sense vectors
(cluster centroids) with occupancy counts. Senses are stored at the
configured storage dtype (float32 default) while all math runs in
float64; retrieval is an exhaustive dot-product argmax since sense
counts are small.

On-disk `.sdict` format (little-endian):

    magic "SDCT"; version u16 = 1; dtype u8 (0 = f32, 1 = f16);
    reserved u8; dim u32; token_count u32; seed u64; flags u32.
    Token entries sorted ascending by token id:
        token_id u32, n_senses u16, total u64,
        then n_senses x [count u32, dim values in dtype].
    Footer: CRC-32 (poly 0xEDB88320, standard reflected) of all
    preceding bytes, u32.
"""

from __future__ import annotations

import concurrent.futures
import io
import struct
import zlib
from dataclasses import dataclass, field, replace
from typing import BinaryIO, Iterable

import numpy as np

from .clustering import AdaptivePolicy, KmeansConfig, adaptive_k, kmeans_fit
from .errors import (
    BadMagic,
    ChecksumMismatch,
    DimMismatch,
    EmptyInput,
    NotInDictionary,
    TruncatedFile,
    UnsupportedVersion,
)
from .stream import read_header, stream_records

MAGIC = b"SDCT"
VERSION = 1
FLAG_ADAPTIVE = 0x1

_HEADER_STRUCT = struct.Struct("<4sHBBIIQI")
_ENTRY_STRUCT = struct.Struct("<IHQ")
_COUNT_STRUCT = struct.Struct("<I")
_CRC_STRUCT = struct.Struct("<I")

_DTYPE_CODES = {"float32": 0, "float16": 1}
_CODE_DTYPES = {0: "float32", 1: "float16"}
_NP_DTYPES = {"float32": np.dtype("<f4"), "float16": np.dtype("<f2")}

MAX_SENSES = 0xFFFF  # n_senses is a u16 on disk


@dataclass
class SenseSet:
    """Senses of one token, ordered by descending occupancy."""

    token: int
    senses: np.ndarray   # (k, dim) at storage dtype, read-only
    counts: np.ndarray   # (k,) int64, read-only
    total: int

    def __post_init__(self):
        self.senses = np.ascontiguousarray(self.senses)
        self.counts = np.ascontiguousarray(self.counts, dtype=np.int64)
        self.senses.setflags(write=False)
        self.counts.setflags(write=False)
        self._senses_f64: np.ndarray | None = None

    def __len__(self) -> int:
        return self.senses.shape[0]

    @property
    def senses_f64(self) -> np.ndarray:
        """Senses widened to working precision (cached)."""
        if self._senses_f64 is None:
            wide = self.senses.astype(np.float64)
            wide.setflags(write=False)
            self._senses_f64 = wide
        return self._senses_f64

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, SenseSet)
            and self.token == other.token
            and self.total == other.total
            and self.senses.dtype == other.senses.dtype
            and np.array_equal(self.senses, other.senses)
            and np.array_equal(self.counts, other.counts)
        )


@dataclass
class SenseDictionary:
    """Immutable map token id -> SenseSet, safe to share across threads."""

    dim: int
    dtype: str
    entries: dict[int, SenseSet]
    seed: int = 0
    flags: int = 0

    def __contains__(self, token: int) -> bool:
        return token in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, SenseDictionary)
            and self.dim == other.dim
            and self.dtype == other.dtype
            and self.seed == other.seed
            and self.flags == other.flags
            and self.entries == other.entries
        )


@dataclass
class BuildConfig:
    """Dictionary build settings.

    `adaptive` None means fixed-k mode with `kmeans.k`; otherwise the
    per-token k comes from the MCL policy and `kmeans` serves as the
    iteration/tolerance template. Per-token determinism derives the
    effective seed as `seed XOR token id`, so results are independent
    of record order and parallelism.
    """

    kmeans: KmeansConfig
    adaptive: AdaptivePolicy | None = None
    max_per_token: int = 8000
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.max_per_token < 1:
            raise ValueError("max_per_token must be >= 1")
        if self.dtype not in _NP_DTYPES:
            raise ValueError(f"unsupported storage dtype {self.dtype!r}")


def _token_seed(seed: int, token: int) -> int:
    return (seed ^ token) & 0xFFFF_FFFF_FFFF_FFFF


def build_sense_set(token: int, embeddings, config: BuildConfig) -> SenseSet:
    """Cluster one token's occurrences into a SenseSet.

    Rows are put in canonical (lexicographic) order first so the result
    depends only on the multiset of embeddings. Above max_per_token a
    seeded subsample is clustered; `total` reports the clustered count
    so per-sense counts always sum to it.
    """
    pts = np.asarray(embeddings, dtype=np.float64)
    if pts.size == 0:
        raise EmptyInput(f"token {token}: no occurrences")
    if pts.ndim != 2:
        raise DimMismatch("embeddings must be 2-D (n, dim)")

    pts = pts[np.lexsort(pts.T[::-1])]
    seed = _token_seed(config.seed, token)
    rng = np.random.default_rng(seed)
    if pts.shape[0] > config.max_per_token:
        pick = np.sort(rng.choice(pts.shape[0], size=config.max_per_token, replace=False))
        pts = pts[pick]

    if config.adaptive is not None:
        k = adaptive_k(pts, config.adaptive)
    else:
        k = config.kmeans.k
    k = min(k, MAX_SENSES)

    result = kmeans_fit(pts, replace(config.kmeans, k=k, seed=seed))
    # descending occupancy, ties to the lowest original cluster index
    order = np.lexsort((np.arange(len(result.sizes)), -result.sizes))
    senses = result.centroids[order].astype(_NP_DTYPES[config.dtype])
    return SenseSet(
        token=token,
        senses=senses,
        counts=result.sizes[order],
        total=int(pts.shape[0]),
    )


def build_dictionary_from_records(
    dim: int,
    records: Iterable[tuple[int, np.ndarray]],
    config: BuildConfig,
    threads: int = 1,
) -> SenseDictionary:
    """Group records by token and build every SenseSet.

    The result is a pure function of the per-token record multisets and
    the config: record order and thread count change nothing.
    """
    groups: dict[int, list[np.ndarray]] = {}
    for token, embedding in records:
        if embedding.shape != (dim,):
            raise DimMismatch(
                f"token {token}: vector shape {embedding.shape}, expected ({dim},)"
            )
        groups.setdefault(int(token), []).append(np.asarray(embedding, dtype=np.float64))

    tokens = sorted(groups)
    if threads > 1 and len(tokens) > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as pool:
            sense_sets = list(
                pool.map(
                    lambda t: build_sense_set(t, np.vstack(groups[t]), config), tokens
                )
            )
    else:
        sense_sets = [build_sense_set(t, np.vstack(groups[t]), config) for t in tokens]

    entries = {ss.token: ss for ss in sense_sets}
    flags = FLAG_ADAPTIVE if config.adaptive is not None else 0
    return SenseDictionary(
        dim=dim, dtype=config.dtype, entries=entries, seed=config.seed, flags=flags
    )


def build_dictionary(
    source: BinaryIO, config: BuildConfig, threads: int = 1
) -> SenseDictionary:
    """Build a dictionary from a `.semb` stream (empty stream -> empty dict)."""
    header = read_header(source)
    return build_dictionary_from_records(
        header.dim, stream_records(source, header), config, threads=threads
    )


def nearest_sense(
    dictionary: SenseDictionary, token: int, query
) -> tuple[int, np.ndarray]:
    """Sense maximizing the dot product with the query; ties to lowest index.

    Raises NotInDictionary for unknown tokens (a signal: callers fall
    back to the contextual embedding), DimMismatch for bad queries.
    """
    q = np.asarray(query, dtype=np.float64)
    if q.shape != (dictionary.dim,):
        raise DimMismatch(f"query shape {q.shape}, dictionary dim {dictionary.dim}")
    entry = dictionary.entries.get(int(token))
    if entry is None:
        raise NotInDictionary(int(token))
    index = int(np.argmax(entry.senses_f64 @ q))
    return index, entry.senses[index]


def serialize(dictionary: SenseDictionary, sink: BinaryIO) -> int:
    """Write the `.sdict` byte image (CRC-32 footer included); returns bytes written."""
    buf = io.BytesIO()
    buf.write(
        _HEADER_STRUCT.pack(
            MAGIC,
            VERSION,
            _DTYPE_CODES[dictionary.dtype],
            0,
            dictionary.dim,
            len(dictionary.entries),
            dictionary.seed & 0xFFFF_FFFF_FFFF_FFFF,
            dictionary.flags & 0xFFFF_FFFF,
        )
    )
    value_dtype = _NP_DTYPES[dictionary.dtype]
    for token in sorted(dictionary.entries):
        entry = dictionary.entries[token]
        buf.write(_ENTRY_STRUCT.pack(token, len(entry), entry.total))
        stored = entry.senses.astype(value_dtype)
        for i in range(len(entry)):
            buf.write(_COUNT_STRUCT.pack(int(entry.counts[i])))
            buf.write(stored[i].tobytes())
    body = buf.getvalue()
    crc = zlib.crc32(body) & 0xFFFF_FFFF
    data = body + _CRC_STRUCT.pack(crc)
    sink.write(data)
    return len(data)


def deserialize(source: BinaryIO) -> SenseDictionary:
    """Parse a `.sdict` file, verifying the CRC before trusting any payload."""
    data = source.read()
    if len(data) < _HEADER_STRUCT.size + _CRC_STRUCT.size:
        raise TruncatedFile(f"file of {len(data)} bytes cannot hold a dictionary")
    if data[:4] != MAGIC:
        raise BadMagic(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    body, footer = data[:-4], data[-4:]
    (crc_stored,) = _CRC_STRUCT.unpack(footer)
    if zlib.crc32(body) & 0xFFFF_FFFF != crc_stored:
        raise ChecksumMismatch("CRC-32 footer does not match contents")

    _magic, version, dtype_code, _reserved, dim, token_count, seed, flags = (
        _HEADER_STRUCT.unpack_from(body, 0)
    )
    if version != VERSION:
        raise UnsupportedVersion(f"dictionary version {version}, expected {VERSION}")
    if dtype_code not in _CODE_DTYPES:
        raise UnsupportedVersion(f"unknown dtype code {dtype_code}")
    dtype = _CODE_DTYPES[dtype_code]
    value_dtype = _NP_DTYPES[dtype]

    offset = _HEADER_STRUCT.size
    entries: dict[int, SenseSet] = {}
    for _ in range(token_count):
        if offset + _ENTRY_STRUCT.size > len(body):
            raise TruncatedFile("entry header overruns file")
        token, n_senses, total = _ENTRY_STRUCT.unpack_from(body, offset)
        offset += _ENTRY_STRUCT.size
        sense_bytes = dim * value_dtype.itemsize
        need = n_senses * (_COUNT_STRUCT.size + sense_bytes)
        if offset + need > len(body):
            raise TruncatedFile(f"token {token}: sense payload overruns file")
        counts = np.empty(n_senses, dtype=np.int64)
        senses = np.empty((n_senses, dim), dtype=value_dtype)
        for i in range(n_senses):
            (counts[i],) = _COUNT_STRUCT.unpack_from(body, offset)
            offset += _COUNT_STRUCT.size
            senses[i] = np.frombuffer(body, dtype=value_dtype, count=dim, offset=offset)
            offset += sense_bytes
        entries[token] = SenseSet(token=token, senses=senses, counts=counts, total=total)
    if offset != len(body):
        raise TruncatedFile(f"{len(body) - offset} unexpected bytes after entries")
    return SenseDictionary(dim=dim, dtype=dtype, entries=entries, seed=seed, flags=flags)


@dataclass
class DictionaryStats:
    token_count: int
    sense_histogram: dict[int, int]
    tokens_at_max: int
    storage_bytes: int


def stats(dictionary: SenseDictionary) -> DictionaryStats:
    """Sense-count histogram plus exact serialized size."""
    histogram: dict[int, int] = {}
    for entry in dictionary.entries.values():
        histogram[len(entry)] = histogram.get(len(entry), 0) + 1
    max_senses = max(histogram) if histogram else 0
    buf = io.BytesIO()
    size = serialize(dictionary, buf)
    return DictionaryStats(
        token_count=len(dictionary.entries),
        sense_histogram=dict(sorted(histogram.items())),
        tokens_at_max=histogram.get(max_senses, 0) if histogram else 0,
        storage_bytes=size,
    )


def estimate_active_memory(
    context_len: int, dim: int, k: int, bytes_per_value: int
) -> int:
    """Worst-case bytes to hold the senses active in one context window.

    Assumes every context position holds a distinct token carrying k
    senses: context_len x k x dim x bytes_per_value.
    """
    for name, value in (
        ("context_len", context_len),
        ("dim", dim),
        ("k", k),
        ("bytes_per_value", bytes_per_value),
    ):
        if value < 1:
            raise ValueError(f"{name} must be positive")
    return context_len * k * dim * bytes_per_value


def non_self_dominant_senses(dictionary: SenseDictionary) -> dict[int, list[int]]:
    """Audit: senses that do not select themselves under dot-product retrieval.

    A sense s_i is self-dominant when <s_i, s_i> >= <s_i, s_j> for every
    sense j of the same token. Dot-product retrieval over Euclidean
    centroids does not guarantee this, so it is measured, not enforced.
    Returns {token: [non-self-dominant sense indices]} for affected tokens.
    """
    offenders: dict[int, list[int]] = {}
    for token, entry in dictionary.entries.items():
        grams = entry.senses_f64 @ entry.senses_f64.T
        bad = [
            i
            for i in range(len(entry))
            if np.any(grams[i] > grams[i, i])
        ]
        if bad:
            offenders[token] = bad
    return offenders
