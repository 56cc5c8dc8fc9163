"""Per-token clustering: K-means (k-means++ seeding), Markov Clustering,
and the adaptive cluster-count policy that combines them.

All operations are pure functions of their inputs and deterministic for
a fixed seed; ties break toward the lowest index everywhere so results
are reproducible across platforms.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import DimMismatch, EmptyInput, ZeroVector


@dataclass
class KmeansConfig:
    k: int
    max_iters: int = 100
    tol: float = 1e-7
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.tol < 0:
            raise ValueError("tol must be >= 0")


@dataclass
class MclConfig:
    inflation: float = 1.65
    expansion: int = 2
    knn: int = 10
    prune_eps: float = 1e-5
    conv_tol: float = 1e-6
    max_iters: int = 100

    def __post_init__(self):
        if self.inflation <= 1:
            raise ValueError("inflation must be > 1")
        if self.expansion < 2:
            raise ValueError("expansion must be >= 2")
        if self.knn < 1:
            raise ValueError("knn must be >= 1")


@dataclass
class AdaptivePolicy:
    """Maps an MCL cluster count to a K-means k.

    Counts above `threshold` mark generic tokens with many plausible
    senses and are scaled by `coef_high`; smaller counts by `coef_low`.
    The result is clamped to [1, number of points].
    """

    mcl: MclConfig = field(default_factory=MclConfig)
    threshold: int = 900
    coef_low: float = 0.1
    coef_high: float = 0.4

    def __post_init__(self):
        if self.threshold < 1:
            raise ValueError("threshold must be >= 1")
        for name in ("coef_low", "coef_high"):
            value = getattr(self, name)
            if not 0 < value <= 1:
                raise ValueError(f"{name} must lie in (0, 1]")


@dataclass
class Clustering:
    """Result of one clustering run: no empty clusters, every point assigned."""

    centroids: np.ndarray        # (k, dim) float64
    assignment: np.ndarray       # (n,) int64
    sizes: np.ndarray            # (k,) int64
    objective_per_iter: list[float] = field(default_factory=list)


def _as_points(points) -> np.ndarray:
    arr = np.asarray(points, dtype=np.float64)
    if arr.size == 0:
        raise EmptyInput("no points")
    if arr.ndim != 2:
        raise DimMismatch(f"points must be 2-D (n, dim), got ndim={arr.ndim}")
    return arr


def kmeans_pp_init(points, k: int, seed: int) -> np.ndarray:
    """Greedy k-means++ seeding.

    Each step draws 2 + floor(ln k) candidates D²-weighted and keeps the
    one that lowers the potential most, which makes single-run seeding
    reliable on well-separated data. Returns min(k, distinct points)
    pairwise-distinct centers, all drawn from the input set;
    deterministic for a fixed seed.
    """
    pts = _as_points(points)
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = np.random.default_rng(seed)
    n = pts.shape[0]
    n_candidates = 2 + int(np.log(k)) if k > 1 else 1

    first = int(rng.integers(n))
    centers = [pts[first]]
    # squared distance to the nearest chosen center
    dist_sq = np.sum((pts - pts[first]) ** 2, axis=1)
    while len(centers) < k:
        total = dist_sq.sum()
        if total <= 0.0:
            break  # every remaining point duplicates a chosen center
        candidates = rng.choice(n, size=n_candidates, p=dist_sq / total)
        best_idx = -1
        best_dist = None
        best_potential = np.inf
        for idx in candidates:
            cand_dist = np.minimum(dist_sq, np.sum((pts - pts[idx]) ** 2, axis=1))
            potential = cand_dist.sum()
            if potential < best_potential:
                best_idx, best_dist, best_potential = int(idx), cand_dist, potential
        centers.append(pts[best_idx])
        dist_sq = best_dist
    return np.vstack(centers)


def _assign(points: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-centroid assignment by squared Euclidean; ties to lowest index."""
    # ||p - c||^2 = ||p||^2 - 2 p.c + ||c||^2; the ||p||^2 term is constant per row
    cross = points @ centroids.T
    d2 = np.sum(centroids**2, axis=1)[None, :] - 2.0 * cross
    labels = np.argmin(d2, axis=1)
    point_sq = np.sum(points**2, axis=1)
    best = d2[np.arange(points.shape[0]), labels] + point_sq
    return labels, np.maximum(best, 0.0)


def _repair_empty(
    points: np.ndarray,
    centroids: np.ndarray,
    labels: np.ndarray,
    dist_sq: np.ndarray,
) -> None:
    """Give each empty cluster the point farthest from its current centroid.

    Mutates centroids/labels/dist_sq in place; deterministic (clusters in
    index order, farthest-point ties to lowest point index).
    """
    k = centroids.shape[0]
    present = np.bincount(labels, minlength=k)
    for cluster in np.flatnonzero(present == 0):
        farthest = int(np.argmax(dist_sq))
        present[labels[farthest]] -= 1
        labels[farthest] = cluster
        present[cluster] = 1
        centroids[cluster] = points[farthest]
        dist_sq[farthest] = 0.0


def kmeans_fit(points, config: KmeansConfig) -> Clustering:
    """Lloyd's algorithm from k-means++ seeds.

    The squared-Euclidean objective is non-increasing per iteration
    (recorded in objective_per_iter). Empty clusters are repaired by
    reassigning the farthest point. When the input has fewer distinct
    points than k, one centroid per distinct point is returned.
    """
    pts = _as_points(points)
    n = pts.shape[0]

    distinct = np.unique(pts, axis=0)
    if distinct.shape[0] <= config.k:
        # one centroid per distinct point; assignment by exact match
        labels = np.empty(n, dtype=np.int64)
        for i, row in enumerate(distinct):
            labels[np.all(pts == row, axis=1)] = i
        sizes = np.bincount(labels, minlength=distinct.shape[0])
        return Clustering(
            centroids=distinct,
            assignment=labels,
            sizes=sizes.astype(np.int64),
            objective_per_iter=[0.0] if distinct.shape[0] == n else [],
        )

    centroids = kmeans_pp_init(pts, config.k, config.seed).copy()
    objective: list[float] = []
    labels = np.zeros(n, dtype=np.int64)
    for _ in range(config.max_iters):
        labels, dist_sq = _assign(pts, centroids)
        _repair_empty(pts, centroids, labels, dist_sq)
        objective.append(float(dist_sq.sum()))
        new_centroids = np.empty_like(centroids)
        for j in range(config.k):
            new_centroids[j] = pts[labels == j].mean(axis=0)
        shift = float(np.max(np.sqrt(np.sum((new_centroids - centroids) ** 2, axis=1))))
        centroids = new_centroids
        if shift <= config.tol:
            break

    labels, dist_sq = _assign(pts, centroids)
    _repair_empty(pts, centroids, labels, dist_sq)
    sizes = np.bincount(labels, minlength=config.k).astype(np.int64)
    return Clustering(
        centroids=centroids,
        assignment=labels,
        sizes=sizes,
        objective_per_iter=objective,
    )


def kmeans_objective(points, centroids, assignment) -> float:
    """Sum of squared distances from each point to its assigned centroid."""
    pts = np.asarray(points, dtype=np.float64)
    cts = np.asarray(centroids, dtype=np.float64)
    diff = pts - cts[np.asarray(assignment)]
    return float(np.sum(diff * diff))


def build_knn_graph(points, knn: int) -> sp.csr_matrix:
    """Column-stochastic mutual-kNN graph under cosine similarity.

    Negative similarities clip to 0 and zero-weight edges are dropped.
    Every node carries a self-loop weighted by its maximum incident edge
    (1 if isolated), then columns are normalized to sum 1.
    """
    pts = _as_points(points)
    n = pts.shape[0]
    norms = np.sqrt(np.sum(pts**2, axis=1))
    if np.any(norms == 0.0):
        raise ZeroVector(f"point {int(np.argmin(norms))} has zero norm")
    unit = pts / norms[:, None]
    sims = unit @ unit.T

    # tie-inclusive selection: every candidate tied with the knn-th
    # similarity stays a neighbor, so duplicate-heavy point sets remain
    # connected instead of isolating by index order
    neighbors: list[np.ndarray] = []
    for i in range(n):
        order = np.argsort(-sims[i], kind="stable")
        order = order[order != i]
        if order.shape[0] > knn:
            cutoff = sims[i, order[knn - 1]]
            order = order[sims[i, order] >= cutoff]
        neighbors.append(order)
    neighbor_sets = [set(nb.tolist()) for nb in neighbors]

    rows, cols, data = [], [], []
    max_incident = np.zeros(n)
    for i in range(n):
        for j in neighbors[i]:
            if j <= i:
                continue  # handle each unordered pair once
            if i not in neighbor_sets[j]:
                continue
            w = max(float(sims[i, j]), 0.0)
            if w == 0.0:
                continue
            rows.extend((i, j))
            cols.extend((j, i))
            data.extend((w, w))
            max_incident[i] = max(max_incident[i], w)
            max_incident[j] = max(max_incident[j], w)

    for i in range(n):
        rows.append(i)
        cols.append(i)
        data.append(max_incident[i] if max_incident[i] > 0.0 else 1.0)

    graph = sp.csr_matrix((data, (rows, cols)), shape=(n, n))
    return _column_normalize(graph)


def _column_normalize(matrix: sp.csr_matrix) -> sp.csr_matrix:
    sums = np.asarray(matrix.sum(axis=0)).ravel()
    scale = np.where(sums > 0.0, 1.0 / np.where(sums > 0.0, sums, 1.0), 0.0)
    return (matrix @ sp.diags(scale)).tocsr()


def mcl_cluster(points, config: MclConfig) -> tuple[int, np.ndarray]:
    """Markov Clustering over the mutual-kNN graph of the points.

    Iterates expansion (matrix power), inflation (elementwise power plus
    column renormalization) and pruning until the Frobenius-norm change
    drops below conv_tol or max_iters is reached (non-convergence is not
    an error). Clusters are read off attractor rows; each node goes to
    the attractor of maximal weight, ties to the lowest attractor index.

    Returns (cluster count, per-point cluster assignment).
    """
    pts = _as_points(points)
    n = pts.shape[0]
    if n == 1:
        return 1, np.zeros(1, dtype=np.int64)

    matrix = build_knn_graph(pts, config.knn)
    for _ in range(config.max_iters):
        previous = matrix
        expanded = matrix
        for _ in range(config.expansion - 1):
            expanded = expanded @ matrix
        expanded = expanded.tocsr()
        expanded.data = np.power(expanded.data, config.inflation)
        expanded = _column_normalize(expanded)
        expanded.data[expanded.data < config.prune_eps] = 0.0
        expanded.eliminate_zeros()
        expanded = _restore_dead_columns(expanded)
        expanded = _column_normalize(expanded)
        matrix = expanded
        delta = matrix - previous
        if np.sqrt(delta.multiply(delta).sum()) < config.conv_tol:
            break

    dense_cols = matrix.tocsc()
    diag = matrix.diagonal()
    attractors = np.flatnonzero(diag > 0.0)
    labels = np.empty(n, dtype=np.int64)
    for j in range(n):
        column = dense_cols.getcol(j).toarray().ravel()
        if attractors.size:
            weights = column[attractors]
            best = int(np.argmax(weights))
            if weights[best] > 0.0:
                labels[j] = attractors[best]
                continue
        labels[j] = int(np.argmax(column))

    unique = np.unique(labels)
    remap = {int(old): new for new, old in enumerate(unique)}
    labels = np.asarray([remap[int(v)] for v in labels], dtype=np.int64)
    return len(unique), labels


def _restore_dead_columns(matrix: sp.csr_matrix) -> sp.csr_matrix:
    """Re-seat a unit self-loop in any column that pruning emptied."""
    sums = np.asarray(matrix.sum(axis=0)).ravel()
    dead = np.flatnonzero(sums == 0.0)
    if dead.size == 0:
        return matrix
    fix = sp.csr_matrix(
        (np.ones(dead.size), (dead, dead)), shape=matrix.shape
    )
    return (matrix + fix).tocsr()


def scale_cluster_count(count: int, n_points: int, policy: AdaptivePolicy) -> int:
    """Apply the scaling-coefficient policy to an MCL cluster count."""
    coef = policy.coef_high if count > policy.threshold else policy.coef_low
    k = round(coef * count)
    return max(1, min(k, n_points))


def adaptive_k(points, policy: AdaptivePolicy) -> int:
    """MCL cluster count scaled into a per-token K-means k."""
    pts = _as_points(points)
    count, _labels = mcl_cluster(pts, policy.mcl)
    return scale_cluster_count(count, pts.shape[0], policy)
