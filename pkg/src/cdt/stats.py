"""Statistical kernels: correlations, Fisher's exact test with Haldane odds
ratios, hypergeometric tails, Benjamini-Hochberg, Kruskal-Wallis, Cohen's d.

Everything accumulates in float64 and is pure, so safe to call from threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import gammaincc, gammaln, logsumexp

from .tensor import ContractError


class UndefinedStatisticError(ValueError):
    """The statistic is undefined for this input (e.g. zero variance)."""


@dataclass(frozen=True)
class ContingencyTable2x2:
    """Rows: high-attention yes/no. Columns: peak yes/no."""

    a: int
    b: int
    c: int
    d: int

    def __post_init__(self):
        for v in (self.a, self.b, self.c, self.d):
            if int(v) != v or v < 0:
                raise ContractError(f"table cells must be nonnegative integers: {self}")
        if self.a + self.b + self.c + self.d < 1:
            raise ContractError("table is empty")


@dataclass(frozen=True)
class TestResult:
    statistic: float
    p_value: float
    effect: float
    ci_low: float | None = None
    ci_high: float | None = None

    __test__ = False  # not a pytest class


# ---------------------------------------------------------------------------
# correlation
# ---------------------------------------------------------------------------

def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape or x.size < 2:
        raise ContractError(f"pearson needs equal-length vectors of length >= 2, got {x.size}, {y.size}")
    xc = x - x.mean()
    yc = y - y.mean()
    sxx = float(xc @ xc)
    syy = float(yc @ yc)
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedStatisticError("pearson undefined for a constant vector")
    r = float(xc @ yc) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def rankdata(x) -> np.ndarray:
    """1-based ranks with ties given their average rank."""
    x = np.asarray(x, dtype=np.float64).ravel()
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(x.size, dtype=np.float64)
    i = 0
    n = x.size
    while i < n:
        j = i
        while j + 1 < n and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(x, y) -> float:
    return pearson(rankdata(x), rankdata(y))


# ---------------------------------------------------------------------------
# hypergeometric / Fisher
# ---------------------------------------------------------------------------

def _log_comb(n, k):
    return gammaln(n + 1.0) - gammaln(k + 1.0) - gammaln(n - k + 1.0)


def hypergeom_logpmf(k, M: int, K: int, n: int):
    """log P(X = k) for X ~ Hypergeom(population M, successes K, draws n)."""
    k = np.asarray(k, dtype=np.float64)
    return _log_comb(K, k) + _log_comb(M - K, n - k) - _log_comb(M, n)


def hypergeom_sf(k: int, M: int, K: int, n: int) -> float:
    """Upper tail ``P(X >= k)``."""
    if not (0 <= K <= M and 0 <= n <= M):
        raise ContractError(f"hypergeom_sf: need 0 <= K, n <= M (M={M}, K={K}, n={n})")
    if not 0 <= k <= min(K, n):
        raise ContractError(f"hypergeom_sf: k={k} outside [0, min(K, n)={min(K, n)}]")
    lo = max(k, 0, n - (M - K))
    hi = min(K, n)
    if lo > hi:
        return 0.0
    support = np.arange(lo, hi + 1)
    p = float(np.exp(logsumexp(hypergeom_logpmf(support, M, K, n))))
    return min(1.0, p)


def haldane_odds_ratio(t: ContingencyTable2x2) -> tuple[float, float, float]:
    """Odds ratio with 0.5 added to every cell, and its Wald 95% CI."""
    a, b, c, d = (t.a + 0.5, t.b + 0.5, t.c + 0.5, t.d + 0.5)
    log_or = math.log(a) + math.log(d) - math.log(b) - math.log(c)
    se = math.sqrt(1 / a + 1 / b + 1 / c + 1 / d)
    return math.exp(log_or), math.exp(log_or - 1.96 * se), math.exp(log_or + 1.96 * se)


def fisher_exact_haldane(t: ContingencyTable2x2) -> TestResult:
    """Two-sided Fisher exact test; effect is the Haldane-corrected odds ratio.

    The p-value sums the probabilities of all tables with the observed margins
    whose probability does not exceed the observed one (relative tolerance
    1e-7, as scientific software commonly uses). ``statistic`` is the observed
    table probability.
    """
    a, b, c, d = t.a, t.b, t.c, t.d
    M = a + b + c + d
    K = a + c          # peak column total
    n = a + b          # high-attention row total
    lo, hi = max(0, n - (M - K)), min(K, n)
    support = np.arange(lo, hi + 1)
    logp = hypergeom_logpmf(support, M, K, n)
    obs = logp[a - lo]
    keep = logp <= obs + math.log1p(1e-7)
    p = float(np.exp(logsumexp(logp[keep])))
    odds, lo_ci, hi_ci = haldane_odds_ratio(t)
    return TestResult(statistic=float(np.exp(obs)), p_value=min(1.0, p), effect=odds,
                      ci_low=lo_ci, ci_high=hi_ci)


# ---------------------------------------------------------------------------
# multiple testing
# ---------------------------------------------------------------------------

def bh_adjust(pvals) -> np.ndarray:
    """Benjamini-Hochberg step-up adjusted p-values, in input order."""
    p = np.asarray(pvals, dtype=np.float64).ravel()
    if p.size == 0:
        return p.copy()
    if np.any((p < 0) | (p > 1)) or np.any(np.isnan(p)):
        raise ContractError("p-values must lie in [0, 1]")
    m = p.size
    order = np.argsort(p, kind="mergesort")
    scaled = p[order] * m / np.arange(1, m + 1)
    q_sorted = np.minimum.accumulate(scaled[::-1])[::-1]
    q = np.empty(m)
    q[order] = np.minimum(q_sorted, 1.0)
    return q


# ---------------------------------------------------------------------------
# group comparisons
# ---------------------------------------------------------------------------

def chi2_sf(x: float, df: int) -> float:
    return float(gammaincc(df / 2.0, x / 2.0)) if x > 0 else 1.0


def kruskal_wallis(groups: Sequence) -> TestResult:
    """Kruskal-Wallis H with tie correction; p from the chi-square tail.

    ``effect`` carries epsilon-squared, ``H / (n - 1)``.
    """
    groups = [np.asarray(g, dtype=np.float64).ravel() for g in groups]
    groups = [g for g in groups if g.size > 0]
    if len(groups) < 2:
        raise ContractError("kruskal_wallis needs at least two nonempty groups")
    allv = np.concatenate(groups)
    n = allv.size
    if np.unique(allv).size < 2:
        raise ContractError("kruskal_wallis undefined when all values are identical")
    ranks = rankdata(allv)
    h = 0.0
    start = 0
    for g in groups:
        r = ranks[start:start + g.size]
        h += r.sum() ** 2 / g.size
        start += g.size
    h = 12.0 / (n * (n + 1)) * h - 3.0 * (n + 1)
    _, counts = np.unique(allv, return_counts=True)
    correction = 1.0 - float((counts ** 3 - counts).sum()) / (n ** 3 - n)
    h = max(0.0, h / correction)
    df = len(groups) - 1
    return TestResult(statistic=h, p_value=chi2_sf(h, df), effect=h / (n - 1))


def cohens_d(x, y) -> float:
    """(mean(x) - mean(y)) / pooled SD with (n-1) weighting."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size < 2 or y.size < 2:
        raise ContractError("cohens_d needs at least two values per group")
    pooled = ((x.size - 1) * x.var(ddof=1) + (y.size - 1) * y.var(ddof=1)) / (x.size + y.size - 2)
    if pooled <= 0.0:
        raise ContractError("cohens_d undefined: pooled SD is zero")
    return float((x.mean() - y.mean()) / math.sqrt(pooled))
