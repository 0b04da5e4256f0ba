"""Rank statistics: Kruskal-Wallis H with a tie correction, and the
chi-square tail probability it needs.

The tail is the regularized upper incomplete gamma function, computed by the
usual series / continued-fraction pair so the package stays free of heavy
statistics dependencies.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .errors import ConfigError, InvalidInput

_MAX_ITER = 500
_EPS = 1e-15


def _lower_gamma_series(a: float, x: float) -> float:
    """Regularized lower incomplete gamma P(a, x) for x < a + 1."""
    term = 1.0 / a
    total = term
    denom = a
    for _ in range(_MAX_ITER):
        denom += 1.0
        term *= x / denom
        total += term
        if abs(term) < abs(total) * _EPS:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _upper_gamma_contfrac(a: float, x: float) -> float:
    """Regularized upper incomplete gamma Q(a, x) for x >= a + 1 (Lentz)."""
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, _MAX_ITER):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    return h * math.exp(-x + a * math.log(x) - math.lgamma(a))


def regularized_gamma_q(a: float, x: float) -> float:
    if a <= 0 or x < 0 or not (math.isfinite(a) and math.isfinite(x)):
        raise InvalidInput(f"regularized_gamma_q needs a > 0 and x >= 0, got a={a}, x={x}")
    if x == 0.0:
        return 1.0
    if x < a + 1.0:
        return 1.0 - _lower_gamma_series(a, x)
    return _upper_gamma_contfrac(a, x)


def chi2_sf(x: float, df: int) -> float:
    """Chi-square survival function P(X >= x) with df degrees of freedom."""
    if df < 1:
        raise ConfigError(f"chi2_sf needs df >= 1, got {df}")
    if x <= 0:
        return 1.0
    return min(1.0, max(0.0, regularized_gamma_q(df / 2.0, x / 2.0)))


def _average_ranks(values: np.ndarray) -> tuple[np.ndarray, float]:
    """Midranks for tied values, plus the tie-correction sum (t^3 - t)."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    tie_sum = 0.0
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        # positions i..j share the same value; midrank is the average
        midrank = (i + j) / 2.0 + 1.0
        for k in range(i, j + 1):
            ranks[order[k]] = midrank
        t = j - i + 1
        if t > 1:
            tie_sum += t**3 - t
        i = j + 1
    return ranks, tie_sum


def kruskal_wallis(groups: Sequence[Sequence[float]]) -> tuple[float, float]:
    """Kruskal-Wallis H (tie-corrected) and its chi-square p-value.

    All samples pooled and midranked; H = 12/(N(N+1)) * sum(R_i^2/n_i)
    - 3(N+1), divided by the tie correction. All-identical data gives
    H = 0, p = 1.
    """
    if len(groups) < 2:
        raise ConfigError("kruskal_wallis needs at least two groups")
    sizes = [len(g) for g in groups]
    if any(s == 0 for s in sizes):
        raise ConfigError("kruskal_wallis groups must be nonempty")
    pooled = np.concatenate([np.asarray(g, dtype=np.float64) for g in groups])
    if not np.all(np.isfinite(pooled)):
        raise InvalidInput("kruskal_wallis values must be finite")
    n_total = len(pooled)
    ranks, tie_sum = _average_ranks(pooled)
    correction = 1.0 - tie_sum / (n_total**3 - n_total)
    df = len(groups) - 1
    if correction == 0.0:
        # every value identical
        return 0.0, 1.0
    h = 0.0
    start = 0
    for size in sizes:
        rank_sum = float(ranks[start : start + size].sum())
        h += rank_sum**2 / size
        start += size
    h = 12.0 / (n_total * (n_total + 1)) * h - 3.0 * (n_total + 1)
    h /= correction
    return h, chi2_sf(h, df)
