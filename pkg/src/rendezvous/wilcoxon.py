"""Two-tailed Wilcoxon signed-rank test for paired per-batch scores."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError

EXACT_MAX_N = 12
MIN_N = 5


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float        # sum of ranks of positive differences
    pvalue: float           # NaN when degenerate
    n: int                  # pairs left after dropping zero differences
    method: str             # exact | normal | degenerate

    @property
    def degenerate(self) -> bool:
        return self.method == "degenerate"


def signed_ranks(d: np.ndarray) -> np.ndarray:
    """Average ranks of ``|d|`` (1-based) carrying the sign of ``d``."""
    a = np.abs(d)
    order = np.argsort(a, kind="stable")
    ranks = np.empty(a.size, dtype=np.float64)
    sorted_a = a[order]
    i = 0
    while i < a.size:
        j = i
        while j + 1 < a.size and sorted_a[j + 1] == sorted_a[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return np.sign(d) * ranks


def exact_distribution(ranks: np.ndarray) -> dict[float, float]:
    """Null distribution of the positive-rank sum under random signs.

    Doubling the (half-integer) average ranks makes them integers, so a
    subset-sum DP over ``2^n`` sign patterns runs in ``O(n * sum)``.
    """
    doubled = np.rint(2 * np.asarray(ranks, dtype=np.float64)).astype(np.int64)
    total = int(doubled.sum())
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in doubled:
        counts[r:] = counts[r:] + counts[:total + 1 - r].copy()
    denom = 2.0 ** len(doubled)
    return {k / 2.0: c / denom for k, c in enumerate(counts) if c}


def wilcoxon_signed_rank(a, b) -> WilcoxonResult:
    """Exact p for up to 12 non-zero pairs, otherwise the normal approximation
    with continuity and tie corrections."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise DimensionError(f"paired samples must be equal-length vectors, got {a.shape} and {b.shape}")
    d = a - b
    d = d[d != 0]
    if d.size == 0:
        return WilcoxonResult(0.0, math.nan, 0, "degenerate")
    if d.size < MIN_N:
        raise ContractError(f"need at least {MIN_N} non-zero differences, got {d.size}")
    sr = signed_ranks(d)
    ranks = np.abs(sr)
    w_plus = float(sr[sr > 0].sum())
    n = d.size
    if n <= EXACT_MAX_N:
        dist = exact_distribution(ranks)
        lower = sum(p for w, p in dist.items() if w <= w_plus + 1e-9)
        upper = sum(p for w, p in dist.items() if w >= w_plus - 1e-9)
        return WilcoxonResult(w_plus, float(min(1.0, 2.0 * min(lower, upper))), n, "exact")
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float((tie_counts ** 3 - tie_counts).sum()) / 48.0
    dev = w_plus - mean
    z = (dev - 0.5 * np.sign(dev)) / math.sqrt(var)
    return WilcoxonResult(w_plus, math.erfc(abs(z) / math.sqrt(2.0)), n, "normal")
