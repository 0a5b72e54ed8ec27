"""Rank statistics and resampling intervals.

Implements the two-sided Mann-Whitney U test with midrank ties, exact
permutation enumeration for small samples and a tie- and
continuity-corrected normal approximation otherwise, plus seeded
percentile bootstrap confidence intervals.
"""

from __future__ import annotations

import math
from itertools import combinations
from typing import Callable, Sequence

import numpy as np

# enumeration cutoffs: exact path applies when the smaller sample has at
# most MAX_EXACT_N values and the label assignments stay enumerable
MAX_EXACT_N = 8
MAX_EXACT_COMBINATIONS = 300_000


def _midranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    sv = values[order]
    i = 0
    while i < len(sv):
        j = i
        while j < len(sv) and sv[j] == sv[i]:
            j += 1
        ranks[order[i:j]] = 0.5 * (i + j + 1)
        i = j
    return ranks


def _u_statistic(ranks_a: np.ndarray, n_b: int) -> float:
    n_a = len(ranks_a)
    u_a = ranks_a.sum() - n_a * (n_a + 1) / 2.0
    return float(min(u_a, n_a * n_b - u_a))


def mann_whitney_u(
    a: Sequence[float], b: Sequence[float], method: str = "auto"
) -> tuple[float, float]:
    """Two-sided Mann-Whitney U test; returns (U, p).

    U is the smaller of the two one-sided statistics. ``method`` selects
    "exact" (full permutation enumeration), "approx" (normal
    approximation with tie and continuity corrections) or "auto", which
    uses the exact path when the smaller sample has at most 8 values and
    the enumeration stays tractable.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ValueError("both samples must be non-empty")
    n_a, n_b = len(a), len(b)
    pooled = np.concatenate([a, b])
    ranks = _midranks(pooled)
    u = _u_statistic(ranks[:n_a], n_b)

    if method == "auto":
        exact = min(n_a, n_b) <= MAX_EXACT_N and (
            math.comb(n_a + n_b, min(n_a, n_b)) <= MAX_EXACT_COMBINATIONS
        )
        method = "exact" if exact else "approx"
    if method == "exact":
        return u, _exact_p(ranks, n_a, n_b)
    if method == "approx":
        return u, _approx_p(ranks, n_a, n_b, u)
    raise ValueError(f"unknown method {method!r}")


def _exact_p(ranks: np.ndarray, n_a: int, n_b: int) -> float:
    """Permutation p-value: doubled smaller tail of one sample's U."""
    n = n_a + n_b
    # enumerate label assignments on the smaller side; the two-sided
    # p-value is the same either way since U_b = n_a*n_b - U_a
    k = min(n_a, n_b)
    obs_ranks = ranks[:n_a] if n_a <= n_b else ranks[n_a:]
    u_obs = obs_ranks.sum() - k * (k + 1) / 2.0
    tol = 1e-9
    count_le = 0
    count_ge = 0
    total = 0
    for idx in combinations(range(n), k):
        u = sum(ranks[i] for i in idx) - k * (k + 1) / 2.0
        total += 1
        if u <= u_obs + tol:
            count_le += 1
        if u >= u_obs - tol:
            count_ge += 1
    p = 2.0 * min(count_le, count_ge) / total
    return min(1.0, p)


def _approx_p(ranks: np.ndarray, n_a: int, n_b: int, u: float) -> float:
    """Normal approximation with midrank tie and continuity corrections."""
    n = n_a + n_b
    mu = n_a * n_b / 2.0
    # tie correction sums t^3 - t over groups of equal pooled values
    _, counts = np.unique(ranks, return_counts=True)
    tie = float(((counts**3 - counts) * 1.0).sum())
    var = n_a * n_b / 12.0 * ((n + 1) - tie / (n * (n - 1)))
    if var <= 0.0:
        return 1.0
    # continuity correction shrinks the deviation by half a step
    z = (abs(u - mu) - 0.5) / math.sqrt(var)
    z = max(z, 0.0)
    return math.erfc(z / math.sqrt(2.0))


def bootstrap_ci(
    samples: Sequence[float],
    stat: Callable[[np.ndarray], float] = np.mean,
    n_resamples: int = 10_000,
    alpha: float = 0.05,
    seed: int = 0,
) -> tuple[float, float]:
    """Seeded percentile bootstrap interval for ``stat`` over ``samples``."""
    x = np.asarray(samples, dtype=np.float64)
    if x.size < 2:
        raise ValueError("bootstrap needs at least 2 samples")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, x.size, size=(n_resamples, x.size))
    if stat is np.mean:
        reps = x[idx].mean(axis=1)
    else:
        reps = np.array([stat(x[row]) for row in idx])
    lo, hi = np.percentile(reps, [100 * alpha / 2, 100 * (1 - alpha / 2)])
    return float(lo), float(hi)
