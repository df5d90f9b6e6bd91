"""Clustering primitives and evaluation metrics.

Accuracy aligns predicted clusters with true classes through a single
exact minimum-cost matching on the (zero-padded, negated) contingency
matrix; the same matching is reused for the head/medium/tail group
accuracies so they stay comparable with the overall number.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .longtail import HEAD, MEDIUM, TAIL


class LengthMismatchError(ValueError):
    code = "LENGTH_MISMATCH"


@dataclass
class KMeansResult:
    assignment: np.ndarray
    centroids: np.ndarray
    inertia: float
    n_iter: int

    @property
    def k(self) -> int:
        return self.centroids.shape[0]


@dataclass
class MetricsReport:
    nmi: float
    ari: float
    acc: float
    group_acc: dict[str, float]
    per_class_acc: list[float]
    n: int
    k: int
    seed: int = 0
    config_hash: str = ""

    def to_dict(self) -> dict:
        return {
            "nmi": self.nmi,
            "ari": self.ari,
            "acc": self.acc,
            "group_acc": self.group_acc,
            "per_class_acc": self.per_class_acc,
            "n": self.n,
            "k": self.k,
            "seed": self.seed,
            "config_hash": self.config_hash,
        }


def _pairwise_sq(x, centroids):
    # ||x - c||^2 expanded; clip tiny negatives from cancellation
    d = (x * x).sum(axis=1)[:, None] - 2 * x @ centroids.T + (centroids * centroids).sum(axis=1)
    return np.maximum(d, 0.0)


def kmeans(x, k: int, seed: int = 0, max_iter: int = 300, tol: float = 1e-6) -> KMeansResult:
    """Lloyd iterations from a D^2-weighted seeding, deterministic per seed.

    Empty clusters are re-seeded to the point farthest from its current
    centroid. Assignment ties go to the lowest centroid index.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if k > n:
        raise ValueError(f"k={k} exceeds {n} points")
    rng = np.random.default_rng(seed)

    centroids = np.empty((k, x.shape[1]))
    first = int(rng.integers(n))
    centroids[0] = x[first]
    closest = _pairwise_sq(x, centroids[:1]).ravel()
    for j in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=closest / total))
        centroids[j] = x[idx]
        closest = np.minimum(closest, _pairwise_sq(x, centroids[j : j + 1]).ravel())

    assignment = np.zeros(n, dtype=np.int64)
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        dists = _pairwise_sq(x, centroids)
        assignment = np.argmin(dists, axis=1)
        new_centroids = centroids.copy()
        for j in range(k):
            members = assignment == j
            if members.any():
                new_centroids[j] = x[members].mean(axis=0)
            else:
                # farthest point from its own centroid restarts the cluster
                point_dist = dists[np.arange(n), assignment]
                far = int(np.argmax(point_dist))
                new_centroids[j] = x[far]
        shift = np.linalg.norm(new_centroids - centroids, axis=1).max()
        centroids = new_centroids
        if shift < tol:
            break
    dists = _pairwise_sq(x, centroids)
    assignment = np.argmin(dists, axis=1)
    inertia = float(dists[np.arange(n), assignment].sum())
    return KMeansResult(assignment=assignment, centroids=centroids, inertia=inertia, n_iter=n_iter)


def hungarian(cost) -> np.ndarray:
    """Exact minimum-cost assignment of a square matrix; perm[row] = column."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValueError("cost matrix must be square; pad rectangular inputs first")
    rows, cols = linear_sum_assignment(cost)
    perm = np.empty(cost.shape[0], dtype=np.int64)
    perm[rows] = cols
    return perm


def _contingency(y_true, y_pred):
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise LengthMismatchError(f"{y_true.shape} vs {y_pred.shape}")
    k_true = int(y_true.max()) + 1 if y_true.size else 0
    k_pred = int(y_pred.max()) + 1 if y_pred.size else 0
    table = np.zeros((k_true, k_pred), dtype=np.int64)
    np.add.at(table, (y_true, y_pred), 1)
    return table


def _matching(y_true, y_pred) -> tuple[np.ndarray, np.ndarray]:
    """Square-padded contingency matrix and the agreement-maximizing matching."""
    table = _contingency(y_true, y_pred)
    size = max(table.shape)
    padded = np.zeros((size, size), dtype=np.int64)
    padded[: table.shape[0], : table.shape[1]] = table
    perm = hungarian(-padded.astype(np.float64))
    return padded, perm


def clustering_accuracy(y_true, y_pred) -> float:
    """Fraction of samples explained by the best one-to-one cluster matching."""
    padded, perm = _matching(y_true, y_pred)
    matched = padded[np.arange(len(perm)), perm].sum()
    return float(matched) / len(np.asarray(y_true))


def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def nmi(y_true, y_pred) -> float:
    """Mutual information normalized by the geometric mean of the entropies."""
    table = _contingency(y_true, y_pred).astype(np.float64)
    n = table.sum()
    h_true = _entropy(table.sum(axis=1))
    h_pred = _entropy(table.sum(axis=0))
    if h_true == 0.0 and h_pred == 0.0:
        return 1.0
    if h_true == 0.0 or h_pred == 0.0:
        return 0.0
    pij = table / n
    outer = np.outer(table.sum(axis=1) / n, table.sum(axis=0) / n)
    mask = pij > 0
    mi = float((pij[mask] * np.log(pij[mask] / outer[mask])).sum())
    return mi / np.sqrt(h_true * h_pred)


def ari(y_true, y_pred) -> float:
    """Pair-counting adjusted Rand index; degenerate identical partitions give 1."""
    table = _contingency(y_true, y_pred).astype(np.float64)
    n = table.sum()

    def comb2(a):
        return a * (a - 1) / 2.0

    sum_cells = comb2(table).sum()
    sum_rows = comb2(table.sum(axis=1)).sum()
    sum_cols = comb2(table.sum(axis=0)).sum()
    total = comb2(n)
    expected = sum_rows * sum_cols / total if total > 0 else 0.0
    maximum = 0.5 * (sum_rows + sum_cols)
    if maximum - expected == 0.0:
        return 1.0
    return float((sum_cells - expected) / (maximum - expected))


def grouped_accuracy(y_true, y_pred, groups) -> dict[str, float]:
    """Accuracy per HEAD/MEDIUM/TAIL group under the single global matching.

    ``groups`` maps each true class id to its tag.
    """
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    padded, perm = _matching(y_true, y_pred)
    # column of predicted cluster -> matched true class
    matched_true = np.full(padded.shape[0], -1, dtype=np.int64)
    matched_true[perm] = np.arange(len(perm))
    correct = matched_true[y_pred] == y_true
    groups = np.asarray(groups)
    out = {}
    for tag in (HEAD, MEDIUM, TAIL):
        members = np.isin(y_true, np.flatnonzero(groups == tag))
        out[tag.lower()] = float(correct[members].mean()) if members.any() else 0.0
    return out


def per_class_accuracy(y_true, y_pred, k: int) -> list[float]:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    padded, perm = _matching(y_true, y_pred)
    matched_true = np.full(padded.shape[0], -1, dtype=np.int64)
    matched_true[perm] = np.arange(len(perm))
    correct = matched_true[y_pred] == y_true
    out = []
    for c in range(k):
        members = y_true == c
        out.append(float(correct[members].mean()) if members.any() else 0.0)
    return out


def estimate_k(x, k_prime: int, threshold: int, seed: int = 0) -> int:
    """Over-cluster with k_prime centers, count clusters of size >= threshold."""
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    result = kmeans(x, k_prime, seed=seed)
    sizes = np.bincount(result.assignment, minlength=k_prime)
    return int((sizes >= threshold).sum())


def evaluate_predictions(y_true, y_pred, groups=None, k: int | None = None,
                         seed: int = 0, config_hash: str = "") -> MetricsReport:
    """Full metrics report for one partition pair."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if k is None:
        k = int(max(y_true.max(), y_pred.max())) + 1
    group_acc = (
        grouped_accuracy(y_true, y_pred, groups)
        if groups is not None
        else {"head": 0.0, "medium": 0.0, "tail": 0.0}
    )
    return MetricsReport(
        nmi=nmi(y_true, y_pred),
        ari=ari(y_true, y_pred),
        acc=clustering_accuracy(y_true, y_pred),
        group_acc=group_acc,
        per_class_acc=per_class_accuracy(y_true, y_pred, k),
        n=len(y_true),
        k=k,
        seed=seed,
        config_hash=config_hash,
    )
