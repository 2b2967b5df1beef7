"""2-D projections of embeddings (exact t-SNE, PCA) and an SVG scatter writer."""
from __future__ import annotations

import colorsys
from dataclasses import asdict, dataclass, field
from typing import Optional
from xml.sax.saxutils import escape

import numpy as np
from scipy.spatial.distance import pdist, squareform
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array

from .analysis import PCA
from .exceptions import ConfigError, IoError, ShapeError

_EPS = np.finfo(np.float64).eps


@dataclass(frozen=True)
class TsneConfig:
    perplexity: float = 30.0
    n_iter: int = 1000
    early_exaggeration: float = 12.0
    exaggeration_iters: int = 250
    learning_rate: float = 200.0
    momentum: float = 0.5
    final_momentum: float = 0.8
    init: str = "pca"
    seed: int = 42

    def __post_init__(self):
        if self.n_iter < 250:
            raise ConfigError("n_iter must be >= 250")
        if self.init not in ("pca", "random"):
            raise ConfigError("init must be 'pca' or 'random'")
        if not self.perplexity > 1:
            raise ConfigError("perplexity must be > 1")

    def check_feasible(self, n: int) -> None:
        if n < 10:
            raise ConfigError("t-SNE needs at least 10 points")
        if not 1 < self.perplexity < (n - 1) / 3:
            raise ConfigError(f"perplexity {self.perplexity} infeasible for n={n}; need < {(n - 1) / 3:.2f}")


@dataclass
class Projection2D:
    coords: np.ndarray
    final_kl: float
    config: dict = field(default_factory=dict)
    kl_path: Optional[np.ndarray] = None


def conditional_affinities(sq_dists, perplexity, tol=1e-5, max_steps=200):
    """Row-stochastic Gaussian affinities, bandwidths found by bisection.

    Each row's entropy (nats) is matched to ``log(perplexity)`` within ``tol``.
    Returns ``(P, beta)`` where ``beta = 1 / (2 sigma^2)``.
    """
    n = sq_dists.shape[0]
    d = sq_dists.astype(np.float64, copy=True)
    np.fill_diagonal(d, np.inf)
    d -= d.min(axis=1, keepdims=True)
    d_finite = np.where(np.isfinite(d), d, 0.0)
    target = np.log(perplexity)
    beta = np.ones(n)
    lo = np.zeros(n)
    hi = np.full(n, np.inf)
    active = np.ones(n, dtype=bool)
    P = np.zeros_like(d)
    for _ in range(max_steps):
        rows = np.flatnonzero(active)
        if rows.size == 0:
            break
        b = beta[rows, None]
        w = np.exp(-d[rows] * b)
        s = w.sum(axis=1)
        p = w / s[:, None]
        dp = d_finite[rows] * p
        entropy = np.log(s) + beta[rows] * dp.sum(axis=1)
        P[rows] = p
        diff = entropy - target
        done = np.abs(diff) <= tol
        active[rows[done]] = False
        up = ~done & (diff > 0)  # too flat: sharpen
        down = ~done & (diff < 0)
        r_up, r_down = rows[up], rows[down]
        lo[r_up] = beta[r_up]
        beta[r_up] = np.where(np.isinf(hi[r_up]), beta[r_up] * 2.0, (beta[r_up] + hi[r_up]) / 2.0)
        hi[r_down] = beta[r_down]
        beta[r_down] = (beta[r_down] + lo[r_down]) / 2.0
    return P, beta


def row_perplexity(P) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -np.where(P > 0, P * np.log(P), 0.0).sum(axis=1)
    return np.exp(h)


def joint_affinities(X, perplexity) -> np.ndarray:
    cond, _ = conditional_affinities(squareform(pdist(X, "sqeuclidean")), perplexity)
    P = (cond + cond.T) / (2.0 * X.shape[0])
    return np.maximum(P, _EPS)


def _kl(P, Q) -> float:
    return float(np.sum(P * np.log(P / np.maximum(Q, _EPS))))


def tsne(X, cfg: TsneConfig = TsneConfig()) -> Projection2D:
    """Exact t-SNE with early exaggeration, momentum and per-coordinate gains."""
    X = check_array(X, dtype=np.float64)
    n = X.shape[0]
    cfg.check_feasible(n)
    # Early exaggeration amplifies rounding differences by orders of magnitude
    # per step, so work in a canonical row order (exact permutation
    # equivariance) and keep identical rows at identical coordinates, as they
    # would be in exact arithmetic.
    order = np.lexsort(X.T[::-1])
    X = X[order]
    fresh = np.concatenate([[True], np.any(X[1:] != X[:-1], axis=1)])
    group = np.cumsum(fresh) - 1
    n_groups = int(group[-1]) + 1
    counts = np.bincount(group, minlength=n_groups)[:, None]

    def tie(A):
        if n_groups == n:
            return A
        sums = np.zeros((n_groups, A.shape[1]))
        np.add.at(sums, group, A)
        return (sums / counts)[group]

    P = joint_affinities(X, cfg.perplexity)
    np.fill_diagonal(P, 0.0)
    if cfg.init == "pca" and X.shape[1] >= 2:
        Y = PCA(2).fit(X).transform(X)
        Y = Y / np.std(Y[:, 0]) * 1e-4
    else:
        Y = np.random.default_rng(cfg.seed).normal(0.0, 1e-4, size=(n, 2))
    Y = tie(Y)
    update = np.zeros_like(Y)
    gains = np.ones_like(Y)
    kl_path = np.empty(cfg.n_iter + 1)
    off = ~np.eye(n, dtype=bool)
    for it in range(cfg.n_iter):
        exaggerating = it < cfg.exaggeration_iters
        momentum = cfg.momentum if exaggerating else cfg.final_momentum
        num = 1.0 / (1.0 + squareform(pdist(Y, "sqeuclidean")))
        np.fill_diagonal(num, 0.0)
        Q = num / num.sum()
        kl_path[it] = _kl(P[off], Q[off])
        PQ = ((cfg.early_exaggeration if exaggerating else 1.0) * P - Q) * num
        grad = 4.0 * (PQ.sum(axis=1)[:, None] * Y - PQ @ Y)
        same = (grad > 0) == (update > 0)
        gains = np.where(same, gains * 0.8, gains + 0.2)
        np.maximum(gains, 0.01, out=gains)
        update = tie(momentum * update - cfg.learning_rate * gains * grad)
        Y = tie(Y + update)
        Y = Y - Y.mean(axis=0)
    num = 1.0 / (1.0 + squareform(pdist(Y, "sqeuclidean")))
    np.fill_diagonal(num, 0.0)
    kl_path[cfg.n_iter] = _kl(P[off], (num / num.sum())[off])
    coords = np.empty_like(Y)
    coords[order] = Y
    return Projection2D(coords, float(max(kl_path[-1], 0.0)), asdict(cfg), kl_path)


class TSNE(TransformerMixin, BaseEstimator):
    def __init__(self, perplexity=30.0, n_iter=1000, early_exaggeration=12.0, learning_rate=200.0,
                 init="pca", random_state=42):
        self.perplexity = perplexity
        self.n_iter = n_iter
        self.early_exaggeration = early_exaggeration
        self.learning_rate = learning_rate
        self.init = init
        self.random_state = random_state

    def fit(self, X, y=None):
        cfg = TsneConfig(perplexity=self.perplexity, n_iter=self.n_iter,
                         early_exaggeration=self.early_exaggeration,
                         learning_rate=self.learning_rate, init=self.init, seed=self.random_state)
        proj = tsne(X, cfg)
        self.embedding_ = proj.coords
        self.kl_divergence_ = proj.final_kl
        self.kl_path_ = proj.kl_path
        return self

    def fit_transform(self, X, y=None):
        return self.fit(X).embedding_


def pca2d(X) -> Projection2D:
    X = check_array(X, dtype=np.float64)
    if X.shape[1] < 2:
        raise ShapeError("pca2d needs at least 2 input dimensions")
    return Projection2D(PCA(2).fit(X).transform(X), 0.0, {"method": "pca"})


# ---------------------------------------------------------------------------
# Output

_PALETTE = (
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
)


def category_colors(n: int) -> list:
    if n <= len(_PALETTE):
        return list(_PALETTE[:n])
    colors = []
    for i in range(n):
        h = (i * 0.618033988749895) % 1.0
        r, g, b = colorsys.hls_to_rgb(h, 0.45 + 0.15 * (i % 3) / 2, 0.65)
        colors.append(f"#{round(r * 255):02x}{round(g * 255):02x}{round(b * 255):02x}")
    return colors


def _categories(labels):
    labels = np.asarray(labels)
    if labels.dtype.kind in "iu":
        cats = sorted(set(labels.tolist()))
    else:
        labels = labels.astype(str)
        cats = list(dict.fromkeys(labels.tolist()))
    index = {c: i for i, c in enumerate(cats)}
    return [str(c) for c in cats], np.array([index[v] for v in labels.tolist()], dtype=int)


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def emit_scatter(p: Projection2D, labels, path, title: str = "", width: int = 640,
                 height: int = 480, radius: float = 2.5) -> None:
    """Write a self-contained SVG scatter plot, one circle per point.

    String labels keep their order of first appearance in the legend (useful
    for modality overlays); integer labels are sorted.
    """
    coords = np.asarray(p.coords, dtype=np.float64)
    labels = np.asarray(labels)
    if labels.shape != (coords.shape[0],):
        raise ShapeError("need one label per point")
    names, idx = _categories(labels)
    colors = category_colors(len(names))
    left, top, right_pad, bottom = 50.0, 30.0, 130.0, 40.0
    pw, ph = width - left - right_pad, height - top - bottom
    lo, hi = coords.min(axis=0), coords.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    lo, hi = lo - 0.05 * span, hi + 0.05 * span
    sx = lambda x: left + (x - lo[0]) / (hi[0] - lo[0]) * pw  # noqa: E731
    sy = lambda y: top + ph - (y - lo[1]) / (hi[1] - lo[1]) * ph  # noqa: E731
    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="#ffffff"/>',
    ]
    if title:
        out.append(f'<text x="{_fmt(left)}" y="18" font-family="sans-serif" font-size="13">'
                   f'{escape(title)}</text>')
    out.append(f'<g class="axes" stroke="#333333" fill="none">'
               f'<line x1="{_fmt(left)}" y1="{_fmt(top + ph)}" x2="{_fmt(left + pw)}" y2="{_fmt(top + ph)}"/>'
               f'<line x1="{_fmt(left)}" y1="{_fmt(top)}" x2="{_fmt(left)}" y2="{_fmt(top + ph)}"/></g>')
    ticks = [
        (left, top + ph + 14, "start", lo[0]), (left + pw, top + ph + 14, "end", hi[0]),
        (left - 4, top + ph, "end", lo[1]), (left - 4, top + 10, "end", hi[1]),
    ]
    for x, y, anchor, v in ticks:
        out.append(f'<text x="{_fmt(x)}" y="{_fmt(y)}" text-anchor="{anchor}" '
                   f'font-family="sans-serif" font-size="10">{v:.3g}</text>')
    out.append('<g class="points" stroke="none">')
    for (x, y), c in zip(coords, idx):
        out.append(f'<circle cx="{_fmt(sx(x))}" cy="{_fmt(sy(y))}" r="{radius}" fill="{colors[c]}" '
                   f'fill-opacity="0.8"/>')
    out.append("</g>")
    out.append('<g class="legend" font-family="sans-serif" font-size="10">')
    rows_per_col = max(1, int(ph // 14))
    for i, name in enumerate(names):
        col, row = divmod(i, rows_per_col)
        x = left + pw + 12 + col * 60
        y = top + row * 14
        out.append(f'<g class="legend-entry"><rect x="{_fmt(x)}" y="{_fmt(y)}" width="9" height="9" '
                   f'fill="{colors[i]}"/><text x="{_fmt(x + 13)}" y="{_fmt(y + 8)}">{escape(name)}</text></g>')
    out.append("</g>")
    out.append("</svg>")
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(out) + "\n")
    except OSError as exc:
        raise IoError(str(exc)) from None


def overlay(*embeddings, tags=("image", "audio", "text")):
    """Stack per-modality embeddings; returns ``(X, tags)`` for an overlay plot."""
    if len(embeddings) != len(tags):
        raise ShapeError("one tag per embedding matrix")
    X = np.vstack(embeddings)
    t = np.concatenate([np.full(e.shape[0], tag) for e, tag in zip(embeddings, tags)])
    return X, t


def write_coords_csv(path, p: Projection2D, labels, source, header: Optional[str] = None) -> None:
    """Columns ``index,x,y,label,source``; ``source`` may be a string or per-row array."""
    coords = np.asarray(p.coords)
    labels = np.asarray(labels)
    sources = np.broadcast_to(np.asarray(source, dtype=object), (coords.shape[0],))
    lines = [f"# {h}" for h in header.splitlines()] if header else []
    lines.append("index,x,y,label,source")
    for i, ((x, y), lab, src) in enumerate(zip(coords, labels, sources)):
        lines.append(f"{i},{x:.6f},{y:.6f},{lab},{src}")
    try:
        with open(path, "w", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")
    except OSError as exc:
        raise IoError(str(exc)) from None
