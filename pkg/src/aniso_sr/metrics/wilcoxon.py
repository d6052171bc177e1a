"""One-sided Wilcoxon signed-rank test for paired samples."""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from scipy.stats import norm, rankdata

from ..volume_io import DegenerateInputError

EXACT_MAX_N = 20
MIN_PAIRS = 5


class InsufficientPairsError(ValueError):
    """Fewer than the minimum number of non-zero paired differences."""


def signed_ranks(a: Sequence[float], b: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    """Average ranks of |a - b| and the signs, with zero differences dropped."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"paired samples must be 1D of equal length, got {a.shape} and {b.shape}")
    d = a - b
    d = d[d != 0]
    return rankdata(np.abs(d)), np.sign(d)


def exact_upper_tail(doubled_ranks: Sequence[int], observed_doubled: int) -> float:
    """P(S >= observed) where S sums a uniformly random subset of the ranks.

    Ranks are passed doubled so tied (half-integer) averages stay integral;
    the subset-sum counts are built by dynamic programming over exact ints.
    """
    total = int(sum(doubled_ranks))
    counts = [0] * (total + 1)
    counts[0] = 1
    reach = 0
    for r in doubled_ranks:
        r = int(r)
        for s in range(reach, -1, -1):
            if counts[s]:
                counts[s + r] += counts[s]
        reach += r
    tail = sum(counts[max(observed_doubled, 0):])
    return tail / 2 ** len(doubled_ranks)


def wilcoxon_one_sided(a: Sequence[float], b: Sequence[float], alternative: str = "greater",
                       exact_max_n: int = EXACT_MAX_N) -> float:
    """p-value for H1: ``a`` tends to exceed ``b`` (``alternative="greater"``).

    Exact null distribution for up to ``exact_max_n`` non-zero differences,
    otherwise the normal approximation with tie and continuity corrections.
    """
    if alternative not in ("greater", "less"):
        raise ValueError(f"alternative must be 'greater' or 'less', got {alternative!r}")
    ranks, signs = signed_ranks(a, b)
    n = ranks.size
    if n == 0:
        raise DegenerateInputError("all paired differences are zero")
    if n < MIN_PAIRS:
        raise InsufficientPairsError(f"{n} non-zero differences; at least {MIN_PAIRS} required")
    if alternative == "less":
        signs = -signs
    w_plus = float(ranks[signs > 0].sum())
    if n <= exact_max_n:
        doubled = np.rint(2 * ranks).astype(int)
        return exact_upper_tail(doubled.tolist(), int(round(2 * w_plus)))
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(tie_counts ** 3 - tie_counts)) / 48.0
    z = (w_plus - mean - 0.5) / math.sqrt(var)
    return float(norm.sf(z))
