"""Self-checks run by ``mmae verify``: gradient checks and brute-force metric oracles."""
from __future__ import annotations

import itertools
from collections import Counter
import math
from dataclasses import dataclass

import numpy as np

from . import analysis
from .model import MmaeConfig, mmae_grad_check, mmae_init
from .nn import Mlp, grad_check


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


# ---------------------------------------------------------------------------
# Brute-force oracles


def pair_counting_ari(a, b) -> float:
    """ARI from explicit enumeration of all sample pairs."""
    n11 = n10 = n01 = n00 = 0
    for i, j in itertools.combinations(range(len(a)), 2):
        same_a, same_b = a[i] == a[j], b[i] == b[j]
        if same_a and same_b:
            n11 += 1
        elif same_a:
            n10 += 1
        elif same_b:
            n01 += 1
        else:
            n00 += 1
    denom = (n00 + n01) * (n01 + n11) + (n00 + n10) * (n10 + n11)
    if denom == 0:
        return 1.0
    return 2.0 * (n00 * n11 - n01 * n10) / denom


def entropy_nmi(a, b) -> float:
    """NMI from per-label probability sums with natural logs, arithmetic normalisation."""
    n = len(a)
    ca, cb, cab = Counter(a), Counter(b), Counter(zip(a, b))
    h_a = -sum(c / n * math.log(c / n) for c in ca.values())
    h_b = -sum(c / n * math.log(c / n) for c in cb.values())
    mi = sum(c / n * math.log(c * n / (ca[x] * cb[y])) for (x, y), c in cab.items())
    denom = (h_a + h_b) / 2
    return 0.0 if denom == 0 else mi / denom


def exhaustive_two_means(X) -> float:
    """Minimum inertia over every split of the rows into two non-empty groups."""
    n = X.shape[0]
    best = math.inf
    for mask in range(1, 2 ** (n - 1)):
        groups = np.array([(mask >> i) & 1 for i in range(n)], dtype=bool)
        cost = 0.0
        for g in (groups, ~groups):
            pts = X[g]
            cost += float(((pts - pts.mean(axis=0)) ** 2).sum())
        best = min(best, cost)
    return best


def covariance_eigenvalues(X, d) -> np.ndarray:
    return np.sort(np.linalg.eigvalsh(np.cov(X, rowvar=False)))[::-1][:d]


# ---------------------------------------------------------------------------
# Checks


def check_layer_gradients(seed=0, tolerance=1e-4) -> list:
    rng = np.random.default_rng(seed)
    out = []
    cases = {
        "dense": Mlp([4, 3], rng),
        "dense+relu": Mlp([4, 5, 3], rng, batch_norm=False),
        "dense+batchnorm+relu": Mlp([4, 5, 3], rng),
        "mlp 4x3x3x2": Mlp([4, 3, 3, 2], rng),
    }
    for name, m in cases.items():
        x = rng.normal(size=(8, m.in_dim))
        t = rng.normal(size=(8, m.out_dim))
        rep = grad_check(m, x, t, 1e-5, tolerance)
        out.append(CheckResult(f"grad {name}", rep.passed,
                               f"max_rel_err={rep.max_rel_err:.2e} checked={rep.n_checked} skipped={rep.n_skipped}"))
    return out


def check_mmae_gradients(seed=0, tolerance=1e-4) -> list:
    rng = np.random.default_rng(seed)
    out = []
    for align in (0.0, 0.1):
        cfg = MmaeConfig(input_dims=(4, 6, 5), latent_dim=3, hidden_sizes=(4, 4),
                         align_weight=align, seed=seed)
        net = mmae_init(cfg)
        batch = tuple(rng.normal(size=(8, d)) for d in cfg.input_dims)
        rep = mmae_grad_check(net, batch, 1e-5, tolerance)
        out.append(CheckResult(f"grad mmae align={align}", rep.passed,
                               f"max_rel_err={rep.max_rel_err:.2e} checked={rep.n_checked} skipped={rep.n_skipped}"))
    return out


def check_metric_oracles(n_pairs=200, seed=0) -> list:
    rng = np.random.default_rng(seed)
    worst_ari = worst_nmi = 0.0
    for _ in range(n_pairs):
        n = int(rng.integers(2, 13))
        a = rng.integers(0, rng.integers(1, 5), size=n)
        b = rng.integers(0, rng.integers(1, 5), size=n)
        worst_ari = max(worst_ari, abs(analysis.ari(a, b) - pair_counting_ari(a, b)))
        worst_nmi = max(worst_nmi, abs(analysis.nmi(a, b) - entropy_nmi(a, b)))
    same = np.array([0, 0, 1, 1, 2, 2, 2])
    relabeled = (same + 1) % 3
    identical = analysis.ari(same, relabeled) == 1.0 and analysis.nmi(same, relabeled) == 1.0
    single = analysis.nmi(np.zeros(7, int), same) == 0.0
    return [
        CheckResult("ari vs pair counting", worst_ari < 1e-10, f"max_abs_err={worst_ari:.1e}"),
        CheckResult("nmi vs entropy sums", worst_nmi < 1e-10, f"max_abs_err={worst_nmi:.1e}"),
        CheckResult("identical partitions", identical, "ari == nmi == 1"),
        CheckResult("single-cluster nmi", single, "nmi == 0"),
    ]


def check_kmeans_optimality(n_instances=50, seed=0, required=48) -> list:
    rng = np.random.default_rng(seed)
    hits = 0
    for i in range(n_instances):
        n = int(rng.integers(3, 9))
        X = rng.normal(size=(n, int(rng.integers(1, 4))))
        _, _, inertia = analysis.kmeans(X, analysis.KMeansConfig(k=2, seed=i))
        if abs(inertia - exhaustive_two_means(X)) <= 1e-9:
            hits += 1
    return [CheckResult("kmeans optimal (k=2, n<=8)", hits >= required, f"{hits}/{n_instances} optimal")]


def check_pca_oracle(seed=0) -> list:
    X = np.random.default_rng(seed).normal(size=(50, 8))
    model = analysis.pca_fit(X, 8)
    err = float(np.max(np.abs(model.explained_variance_ - covariance_eigenvalues(X, 8))))
    ortho = float(np.max(np.abs(model.components_.T @ model.components_ - np.eye(8))))
    return [
        CheckResult("pca variances vs eigh", err < 1e-8, f"max_abs_err={err:.1e}"),
        CheckResult("pca orthonormality", ortho < 1e-10, f"max_abs_err={ortho:.1e}"),
    ]


def run_all() -> list:
    return (check_layer_gradients() + check_mmae_gradients() + check_metric_oracles()
            + check_kmeans_optimality() + check_pca_oracle())
