"""Shared synthetic-data generators and stream helpers."""

from __future__ import annotations

import io

import numpy as np

from sensedict import StreamHeader, write_stream


def semb_bytes(records, dim, dtype="float32", count="auto") -> bytes:
    """Serialize records into an in-memory `.semb` image."""
    records = list(records)
    if count == "auto":
        count = len(records)
    header = StreamHeader(dtype=dtype, dim=dim, record_count=count)
    buf = io.BytesIO()
    write_stream(records, header, buf)
    return buf.getvalue()


def unit_means(rng, n_senses, dim, min_sep=0.5):
    """Unit-norm sense means with all pairwise Euclidean distances >= min_sep."""
    while True:
        means = rng.normal(size=(n_senses, dim))
        means /= np.linalg.norm(means, axis=1, keepdims=True)
        gaps = [
            np.linalg.norm(means[i] - means[j])
            for i in range(n_senses)
            for j in range(i + 1, n_senses)
        ]
        if not gaps or min(gaps) >= min_sep:
            return means


def gaussian_corpus(
    n_tokens=100,
    n_senses=3,
    dim=16,
    sigma=0.05,
    occurrences=300,
    seed=7,
    min_sep=0.5,
):
    """Token occurrences drawn from per-token Gaussian mixtures.

    Returns (records, component labels aligned with records, true means
    keyed by token). Components cycle within each token so every sense
    receives occurrences/n_senses points.
    """
    rng = np.random.default_rng(seed)
    records: list[tuple[int, np.ndarray]] = []
    labels: list[int] = []
    true_means: dict[int, np.ndarray] = {}
    for token in range(n_tokens):
        means = unit_means(rng, n_senses, dim, min_sep)
        true_means[token] = means
        for i in range(occurrences):
            component = i % n_senses
            records.append(
                (token, means[component] + rng.normal(scale=sigma, size=dim))
            )
            labels.append(component)
    return records, np.asarray(labels), true_means


def best_match_distances(centroids, means):
    """Greedy-free exact matching: centroid-to-mean distances under the
    permutation minimizing the total distance (sense counts are small)."""
    import itertools

    k = len(means)
    assert len(centroids) == k
    dists = np.linalg.norm(centroids[:, None, :] - means[None, :, :], axis=2)
    best = None
    for perm in itertools.permutations(range(k)):
        total = sum(dists[i, perm[i]] for i in range(k))
        if best is None or total < best[0]:
            best = (total, perm)
    _, perm = best
    return np.asarray([dists[i, perm[i]] for i in range(k)])
