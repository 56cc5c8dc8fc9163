"""Word-level sense construction and word-similarity evaluation.

Words live in their own id namespace (a TSV sidecar maps ids to
surfaces). Pair similarity is the maximum dot product over the two
words' sense sets; benchmark agreement is Spearman rank correlation
with average ranks for ties.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import BinaryIO, TextIO

import numpy as np

from .clustering import KmeansConfig
from .dictionary import BuildConfig, SenseDictionary, SenseSet, build_dictionary
from .errors import (
    DegenerateInput,
    DimMismatch,
    FormatError,
    LengthMismatch,
)


class BenchmarkFormatError(FormatError):
    """Benchmark or vocabulary text file violates its line format."""


def read_vocab_tsv(source: TextIO) -> dict[str, int]:
    """Parse an `id<TAB>surface` sidecar; ids must be unique and contiguous from 0."""
    vocab: dict[str, int] = {}
    ids: set[int] = set()
    for lineno, line in enumerate(source, start=1):
        line = line.rstrip("\n")
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise BenchmarkFormatError(f"vocab line {lineno}: expected id<TAB>surface")
        try:
            word_id = int(parts[0])
        except ValueError:
            raise BenchmarkFormatError(f"vocab line {lineno}: bad id {parts[0]!r}")
        surface = parts[1]
        if surface in vocab:
            raise BenchmarkFormatError(f"vocab line {lineno}: duplicate surface {surface!r}")
        if word_id in ids:
            raise BenchmarkFormatError(f"vocab line {lineno}: duplicate id {word_id}")
        vocab[surface] = word_id
        ids.add(word_id)
    if ids and ids != set(range(len(ids))):
        raise BenchmarkFormatError("vocab ids must be contiguous from 0")
    return vocab


def write_vocab_tsv(vocab: dict[str, int], sink: TextIO) -> None:
    for surface, word_id in sorted(vocab.items(), key=lambda kv: kv[1]):
        sink.write(f"{word_id}\t{surface}\n")


def read_benchmark_tsv(source: TextIO) -> list[tuple[str, str, float]]:
    """Parse `word1<TAB>word2<TAB>score` lines; `#` comments and blanks ignored."""
    pairs: list[tuple[str, str, float]] = []
    for lineno, line in enumerate(source, start=1):
        line = line.rstrip("\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) < 3:
            raise BenchmarkFormatError(
                f"benchmark line {lineno}: expected word1<TAB>word2<TAB>score"
            )
        try:
            score = float(parts[2])
        except ValueError:
            raise BenchmarkFormatError(f"benchmark line {lineno}: bad score {parts[2]!r}")
        if not np.isfinite(score):
            raise BenchmarkFormatError(f"benchmark line {lineno}: non-finite score")
        pairs.append((parts[0], parts[1], score))
    return pairs


def build_word_senses(
    source: BinaryIO, k: int = 5, seed: int = 0, max_per_word: int = 8000
) -> SenseDictionary:
    """Cluster a word-keyed stream into word senses (fixed k, default 5).

    The producer guarantees each record's embedding is already the mean
    of the word occurrence's token embeddings.
    """
    config = BuildConfig(
        kmeans=KmeansConfig(k=k, seed=seed), max_per_token=max_per_word, seed=seed
    )
    return build_dictionary(source, config)


def word_similarity(senses1: SenseSet, senses2: SenseSet) -> float:
    """Maximum dot product over all sense pairs of the two words."""
    if senses1.senses.shape[1] != senses2.senses.shape[1]:
        raise DimMismatch(
            f"sense dims differ: {senses1.senses.shape[1]} vs {senses2.senses.shape[1]}"
        )
    return float(np.max(senses1.senses_f64 @ senses2.senses_f64.T))


@dataclass
class ScoredPairs:
    """Predicted scores aligned with gold scores; excluded pairs counted."""

    predicted: list[float]
    gold: list[float]
    missing: int


def score_pairs(
    dictionary: SenseDictionary,
    vocab: dict[str, int],
    benchmark: list[tuple[str, str, float]],
) -> ScoredPairs:
    """Score every benchmark pair whose words are both known.

    Pairs with a word absent from the vocabulary or the dictionary are
    excluded and counted rather than scored, to avoid biasing the
    correlation.
    """
    predicted: list[float] = []
    gold: list[float] = []
    missing = 0
    for word1, word2, score in benchmark:
        id1 = vocab.get(word1)
        id2 = vocab.get(word2)
        if id1 is None or id2 is None or id1 not in dictionary or id2 not in dictionary:
            missing += 1
            continue
        predicted.append(
            word_similarity(dictionary.entries[id1], dictionary.entries[id2])
        )
        gold.append(score)
    return ScoredPairs(predicted=predicted, gold=gold, missing=missing)


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """Ranks 1..n with tied values sharing the mean of their positions."""
    n = values.shape[0]
    order = np.argsort(values, kind="stable")
    ranks = np.empty(n, dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < n:
        j = i
        while j < n and sorted_vals[j] == sorted_vals[i]:
            j += 1
        ranks[order[i:j]] = (i + j - 1) / 2.0 + 1.0
        i = j
    return ranks


def spearman(pred, gold) -> float:
    """Spearman rank correlation: Pearson correlation of average ranks.

    Requires equal lengths >= 2 and at least two distinct values on each
    side (a constant list has no defined rank correlation).
    """
    x = np.asarray(pred, dtype=np.float64)
    y = np.asarray(gold, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise LengthMismatch(f"shapes {x.shape} vs {y.shape}")
    if x.shape[0] < 2:
        raise DegenerateInput("need at least 2 pairs")
    rx = _average_ranks(x)
    ry = _average_ranks(y)
    dx = rx - rx.mean()
    dy = ry - ry.mean()
    var_x = float(dx @ dx)
    var_y = float(dy @ dy)
    if var_x == 0.0 or var_y == 0.0:
        raise DegenerateInput("constant list has undefined rank correlation")
    # single sqrt of the product keeps rho(x, x) == 1.0 exactly
    return float(dx @ dy) / float(np.sqrt(var_x * var_y))
