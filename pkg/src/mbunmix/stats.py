"""Paired comparison of algorithms across folds."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

EXACT_MAX_N = 20


@dataclass(frozen=True)
class ComparisonResult:
    a: str
    b: str
    n: int
    statistic: float
    p_value: float
    significant: bool
    median_difference: float = 0.0

    @property
    def verdict(self) -> str:
        """'same' unless significant; otherwise whether ``a`` scored lower (better) or higher."""
        if not self.significant:
            return "same"
        return "better" if self.median_difference < 0 else "worse"


def _exact_two_sided(doubled_ranks: np.ndarray, w_doubled: int) -> float:
    """P(min(W+, W-) <= w) under the null, counting all 2^n sign patterns.

    Ranks are doubled so midranks stay integral; the null distribution of
    W+ is built by convolving one {0, r} choice per rank.
    """
    total = int(doubled_ranks.sum())
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in doubled_ranks:
        r = int(r)
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:total + 1 - r]
        counts += shifted
    n_patterns = 2.0 ** len(doubled_ranks)
    lower = counts[:w_doubled + 1].sum()
    upper = counts[total - w_doubled:].sum()
    if 2 * w_doubled >= total:
        return 1.0
    return min(1.0, (lower + upper) / n_patterns)


def wilcoxon_signed_rank(x: Sequence[float], y: Sequence[float], alpha: float = 0.05,
                         names: tuple[str, str] = ("x", "y")) -> ComparisonResult:
    """Two-tailed Wilcoxon signed-rank test on paired samples.

    Zero differences are dropped and tied magnitudes get midranks. For up to
    20 non-zero pairs the p-value is exact; beyond that a normal
    approximation with tie and continuity corrections is used.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"paired samples must be 1-d and equal length, got {x.shape} and {y.shape}")
    d = x - y
    med = float(np.median(d)) if d.size else 0.0
    d = d[d != 0]
    n = d.size
    if n == 0:
        return ComparisonResult(names[0], names[1], 0, 0.0, 1.0, False, med)
    ranks = rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    w = min(w_plus, w_minus)
    if n <= EXACT_MAX_N:
        doubled = np.rint(2 * ranks).astype(np.int64)
        p = _exact_two_sided(doubled, int(round(2 * w)))
    else:
        mean = n * (n + 1) / 4.0
        _, tie_counts = np.unique(np.abs(d), return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(tie_counts ** 3 - tie_counts)) / 48.0
        dev = abs(w - mean)
        z = max(dev - 0.5, 0.0) / math.sqrt(var) if dev > 0 else 0.0
        p = min(1.0, math.erfc(z / math.sqrt(2.0)))
    return ComparisonResult(names[0], names[1], n, w, p, p < alpha, med)


def rank_rows(scores: np.ndarray) -> np.ndarray:
    """Midranks (1 = lowest score) of each column of a (variants, units) table."""
    scores = np.asarray(scores, dtype=np.float64)
    if np.isnan(scores).any():
        raise ValueError("score table has missing entries")
    return np.apply_along_axis(rankdata, 0, scores)


def average_rank(scores: Mapping[str, Sequence[float]] | np.ndarray):
    """Mean rank per variant across units; lower scores rank better.

    Accepts a mapping ``variant -> scores per unit`` (returns a dict) or a
    (variants, units) array (returns an array).
    """
    if isinstance(scores, Mapping):
        names = list(scores)
        lengths = {len(scores[k]) for k in names}
        if len(lengths) != 1:
            raise ValueError("every variant must be scored on every unit")
        table = np.array([scores[k] for k in names], dtype=np.float64)
        means = rank_rows(table).mean(axis=1)
        return dict(zip(names, means.tolist()))
    return rank_rows(scores).mean(axis=1)
