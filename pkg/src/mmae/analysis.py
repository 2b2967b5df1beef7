"""Linear baselines and clustering evaluation.

PCA and K-Means follow the scikit-learn estimator conventions; the metrics are
plain functions. Distances are Euclidean throughout.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.spatial.distance import cdist
from sklearn.base import BaseEstimator, ClusterMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .data.dataset import FeatureMatrix, Modality
from .exceptions import (
    AlignmentError,
    ConfigError,
    IoError,
    MetricUndefinedError,
    RankError,
    ShapeError,
)

# ---------------------------------------------------------------------------
# PCA


class PCA(TransformerMixin, BaseEstimator):
    """Principal component analysis by SVD of the centred data.

    ``components_`` has shape ``(n_features, n_components)`` with orthonormal
    columns, so ``transform(X) == (X - mean_) @ components_``. Each component
    is signed so that its largest-magnitude entry is positive.
    """

    def __init__(self, n_components=2):
        self.n_components = n_components

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        n, dim = X.shape
        d = int(self.n_components)
        if d < 1 or d > min(n - 1, dim):
            raise RankError(f"n_components={d} must lie in [1, min(n-1, dim)={min(n - 1, dim)}]")
        self.mean_ = X.mean(axis=0)
        _, s, vt = np.linalg.svd(X - self.mean_, full_matrices=False)
        components = vt[:d].T
        pivot = np.argmax(np.abs(components), axis=0)
        signs = np.sign(components[pivot, np.arange(d)])
        signs[signs == 0] = 1.0
        self.components_ = components * signs
        self.explained_variance_ = s[:d] ** 2 / (n - 1)
        self.n_features_in_ = dim
        return self

    def transform(self, X):
        check_is_fitted(self)
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ShapeError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return (X - self.mean_) @ self.components_

    def inverse_transform(self, Z):
        check_is_fitted(self)
        return np.asarray(Z) @ self.components_.T + self.mean_


def pca_fit(X, d: int) -> PCA:
    return PCA(d).fit(X)


def pca_transform(model: PCA, X) -> np.ndarray:
    return model.transform(X)


# ---------------------------------------------------------------------------
# Weighted concatenation baseline


@dataclass(frozen=True)
class FusionWeights:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0

    def __post_init__(self):
        w = (self.alpha, self.beta, self.gamma)
        if min(w) < 0 or max(w) == 0:
            raise ConfigError("fusion weights must be non-negative and not all zero")


def fuse_concat(img, aud, txt, w: FusionWeights = FusionWeights()) -> FeatureMatrix:
    """Row-wise ``[alpha*x_I | beta*x_A | gamma*x_T]``."""
    blocks = [m.values if isinstance(m, FeatureMatrix) else np.asarray(m, dtype=np.float64)
              for m in (img, aud, txt)]
    rows = {b.shape[0] for b in blocks}
    if len(rows) != 1:
        raise AlignmentError(f"modalities disagree on row count: {sorted(rows)}")
    return FeatureMatrix(
        np.hstack([w.alpha * blocks[0], w.beta * blocks[1], w.gamma * blocks[2]]),
        Modality.FUSED,
    )


# ---------------------------------------------------------------------------
# K-Means


def _sq_dists(X, C):
    return cdist(X, C, "sqeuclidean")


def _kmeans_pp(X, k, rng):
    n = X.shape[0]
    centers = np.empty((k, X.shape[1]))
    centers[0] = X[rng.integers(n)]
    closest = ((X - centers[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = closest.sum()
        if total > 0:
            idx = rng.choice(n, p=closest / total)
        else:
            idx = rng.integers(n)
        centers[i] = X[idx]
        closest = np.minimum(closest, ((X - centers[i]) ** 2).sum(axis=1))
    return centers


def _lloyd(X, centers, max_iter, tol):
    """One Lloyd run; returns (labels, centers, inertia, inertia_path, n_iter)."""
    k = centers.shape[0]
    path = []
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        d = _sq_dists(X, centers)
        labels = d.argmin(axis=1)
        path.append(float(d[np.arange(X.shape[0]), labels].sum()))
        new = np.empty_like(centers)
        counts = np.bincount(labels, minlength=k)
        empty = np.flatnonzero(counts == 0)
        for j in range(k):
            if counts[j]:
                new[j] = X[labels == j].mean(axis=0)
        if empty.size:
            # reseed each empty cluster at the point farthest from its centre
            point_cost = d[np.arange(X.shape[0]), labels]
            farthest = np.argsort(-point_cost, kind="stable")
            for j, far in zip(empty, farthest):
                new[j] = X[far]
        shift = float(np.sqrt(((new - centers) ** 2).sum(axis=1)).max())
        centers = new
        if shift < tol:
            break
    d = _sq_dists(X, centers)
    labels = d.argmin(axis=1)
    inertia = float(((X - centers[labels]) ** 2).sum())
    path.append(inertia)
    return labels, centers, inertia, path, n_iter


@dataclass(frozen=True)
class KMeansConfig:
    k: int
    n_restarts: int = 10
    max_iter: int = 300
    tol: float = 1e-4
    seed: int = 42

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.n_restarts < 1 or self.max_iter < 1 or self.tol < 0:
            raise ConfigError("n_restarts and max_iter must be >= 1, tol >= 0")


class KMeans(ClusterMixin, BaseEstimator):
    """Lloyd's algorithm with k-means++ seeding, best of ``n_init`` restarts.

    Restart ``r`` draws from ``default_rng(random_state + r)``. Converged when
    no centroid moves more than ``tol``.
    """

    def __init__(self, n_clusters=8, n_init=10, max_iter=300, tol=1e-4, random_state=42):
        self.n_clusters = n_clusters
        self.n_init = n_init
        self.max_iter = max_iter
        self.tol = tol
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        cfg = KMeansConfig(self.n_clusters, self.n_init, self.max_iter, self.tol, self.random_state)
        if cfg.k > X.shape[0]:
            raise ConfigError(f"k={cfg.k} exceeds the number of samples {X.shape[0]}")
        best = None
        for r in range(cfg.n_restarts):
            rng = np.random.default_rng(cfg.seed + r)
            run = _lloyd(X, _kmeans_pp(X, cfg.k, rng), cfg.max_iter, cfg.tol)
            if best is None or run[2] < best[2]:
                best = run
        self.labels_, self.cluster_centers_, self.inertia_, self.inertia_path_, self.n_iter_ = best
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self)
        X = check_array(X, dtype=np.float64)
        return _sq_dists(X, self.cluster_centers_).argmin(axis=1)


def kmeans(X, cfg: KMeansConfig):
    """Returns ``(assignment, centroids, inertia)``."""
    est = KMeans(cfg.k, cfg.n_restarts, cfg.max_iter, cfg.tol, cfg.seed).fit(X)
    return est.labels_, est.cluster_centers_, est.inertia_


# ---------------------------------------------------------------------------
# Metrics


def _contingency(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"label vectors must be 1-D and equal length, got {a.shape} and {b.shape}")
    _, ia = np.unique(a, return_inverse=True)
    _, ib = np.unique(b, return_inverse=True)
    table = np.zeros((ia.max() + 1, ib.max() + 1), dtype=np.int64)
    np.add.at(table, (ia, ib), 1)
    return table


def _comb2(x):
    x = np.asarray(x, dtype=np.float64)
    return float(np.sum(x * (x - 1) / 2.0))


def ari(labels_a, labels_b) -> float:
    """Adjusted Rand index."""
    table = _contingency(labels_a, labels_b)
    n = int(table.sum())
    if n < 2:
        raise ShapeError("ARI needs at least 2 samples")
    index = _comb2(table)
    sum_a = _comb2(table.sum(axis=1))
    sum_b = _comb2(table.sum(axis=0))
    expected = sum_a * sum_b / (n * (n - 1) / 2.0)
    max_index = (sum_a + sum_b) / 2.0
    if max_index == expected:
        # both partitions trivial and identical (all-in-one or all singletons)
        return 1.0
    return (index - expected) / (max_index - expected)


def _entropy(counts):
    counts = np.sort(np.asarray(counts, dtype=np.float64).ravel())
    counts = counts[counts > 0]
    p = counts / counts.sum()
    return float(-np.sum(p * np.log(p)))


def nmi(labels_a, labels_b) -> float:
    """Mutual information over the arithmetic mean of the two entropies (nats)."""
    table = _contingency(labels_a, labels_b)
    if table.sum() < 1:
        raise ShapeError("NMI needs at least 1 sample")
    h_a = _entropy(table.sum(axis=1))
    h_b = _entropy(table.sum(axis=0))
    denom = (h_a + h_b) / 2.0
    if denom == 0.0:
        return 0.0
    mi = h_a + h_b - _entropy(table)
    return float(min(max(mi / denom, 0.0), 1.0))


def silhouette(X, labels, sample_size: Optional[int] = None, random_state=0,
               block: int = 1024) -> float:
    """Mean silhouette coefficient, computed exactly in row blocks.

    Memory is O(block * n). Singleton clusters score 0, as do points with
    ``a == b == 0``. ``sample_size`` evaluates a seeded row subsample.
    """
    X = check_array(X, dtype=np.float64)
    labels = np.asarray(labels)
    if labels.shape != (X.shape[0],):
        raise ShapeError("labels must have one entry per row")
    if sample_size is not None and sample_size < X.shape[0]:
        idx = np.sort(np.random.default_rng(random_state).choice(X.shape[0], sample_size, replace=False))
        X, labels = X[idx], labels[idx]
    _, inv = np.unique(labels, return_inverse=True)
    k = inv.max() + 1
    if k < 2:
        raise MetricUndefinedError("silhouette needs at least 2 clusters")
    n = X.shape[0]
    counts = np.bincount(inv, minlength=k).astype(np.float64)
    onehot = np.zeros((n, k))
    onehot[np.arange(n), inv] = 1.0
    scores = np.empty(n)
    for start in range(0, n, block):
        rows = slice(start, min(start + block, n))
        d = cdist(X[rows], X)
        sums = d @ onehot
        own = inv[rows]
        own_count = counts[own]
        with np.errstate(invalid="ignore", divide="ignore"):
            a = sums[np.arange(d.shape[0]), own] / (own_count - 1)
            means = sums / counts
        means[np.arange(d.shape[0]), own] = np.inf
        b = means.min(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            s = (b - a) / np.maximum(a, b)
        s[(own_count == 1) | ~np.isfinite(s)] = 0.0
        scores[rows] = s
    return float(scores.mean())


# ---------------------------------------------------------------------------
# Reports


@dataclass
class ClusterReport:
    k: int
    silhouette: float
    ari: float
    nmi: float
    inertia: float
    assignment: np.ndarray


def evaluate_clustering(X, labels_true, cfg: KMeansConfig) -> ClusterReport:
    assignment, _, inertia = kmeans(X, cfg)
    try:
        sil = silhouette(X, assignment)
    except MetricUndefinedError:
        sil = float("nan")
    return ClusterReport(cfg.k, sil, ari(labels_true, assignment), nmi(labels_true, assignment),
                         inertia, assignment)


def grid_report(X, labels_true, k_list: Sequence[int], cfg: Optional[KMeansConfig] = None) -> list:
    """One :class:`ClusterReport` per ``k``; other K-Means settings come from ``cfg``."""
    base = cfg or KMeansConfig(k=1)
    reports = []
    for k in k_list:
        kcfg = KMeansConfig(int(k), base.n_restarts, base.max_iter, base.tol, base.seed)
        reports.append(evaluate_clustering(X, labels_true, kcfg))
    return reports


REPORT_COLUMNS = ("method", "source", "k", "silhouette", "ari", "nmi", "inertia", "seed")


def format_report_rows(rows) -> list:
    """``rows`` are ``(method, source, ClusterReport, seed)`` tuples."""
    lines = [",".join(REPORT_COLUMNS)]
    for method, source, rep, seed in rows:
        lines.append(",".join([
            method, source, str(rep.k), f"{rep.silhouette:.6f}", f"{rep.ari:.6f}",
            f"{rep.nmi:.6f}", f"{rep.inertia:.6f}", str(seed),
        ]))
    return lines


def write_reports_csv(path, rows, header: Optional[str] = None) -> None:
    lines = [f"# {h}" for h in header.splitlines()] if header else []
    lines.extend(format_report_rows(rows))
    try:
        with open(path, "w", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")
    except OSError as exc:
        raise IoError(str(exc)) from None
