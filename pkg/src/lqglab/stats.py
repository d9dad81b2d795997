"""Estimators and hypothesis tests used by the experiment runners.

The Kolmogorov-Smirnov critical values come from the asymptotic Kolmogorov
distribution, c(level) = sqrt(-log(level/2) / 2), which gives the usual
constants c(0.05) = 1.358 and c(0.01) = 1.628.  Each test is a deterministic
function of its inputs and returns a :class:`TestReport` that can be
re-verified from its stored fields.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


def ks_critical_coefficient(level: float) -> float:
    """Asymptotic Kolmogorov coefficient c(level)."""
    if not 0.0 < level < 1.0:
        raise ValueError(f"level must lie in (0, 1), got {level}")
    return math.sqrt(-0.5 * math.log(level / 2.0))


@dataclass
class TestReport:
    """Outcome of one hypothesis test, reproducible from its fields."""

    name: str
    statistic: float
    critical_value: float
    level: float
    n: tuple
    verdict: str = field(init=False)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.verdict = "pass" if self.statistic < self.critical_value else "fail"

    @property
    def passed(self) -> bool:
        return self.verdict == "pass"

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "statistic": self.statistic,
            "critical_value": self.critical_value,
            "level": self.level,
            "n": list(self.n),
            "verdict": self.verdict,
            "metadata": self.metadata,
        }


def _as_sorted(a) -> np.ndarray:
    arr = np.asarray(a, dtype=float).ravel()
    if arr.size == 0:
        raise ValueError("empty sample")
    return np.sort(arr)


def ks_two_sample(a, b, level: float = 0.01, name: str = "ks_two_sample") -> TestReport:
    """Supremum distance between the two empirical CDFs."""
    xs = _as_sorted(a)
    ys = _as_sorted(b)
    n, m = xs.size, ys.size
    grid = np.concatenate([xs, ys])
    grid.sort(kind="mergesort")
    fa = np.searchsorted(xs, grid, side="right") / n
    fb = np.searchsorted(ys, grid, side="right") / m
    stat = float(np.max(np.abs(fa - fb)))
    crit = ks_critical_coefficient(level) * math.sqrt((n + m) / (n * m))
    return TestReport(name, stat, crit, level, (n, m))


def ks_statistic_one_sample(samples, cdf: Callable[[np.ndarray], np.ndarray]) -> float:
    """Plain (unit-weight) one-sample KS distance."""
    xs = _as_sorted(samples)
    n = xs.size
    f = cdf(xs)
    upper = np.arange(1, n + 1) / n
    lower = np.arange(0, n) / n
    return float(max(np.max(upper - f), np.max(f - lower)))


def weighted_ks_one_sample(
    samples,
    weights,
    cdf: Callable[[np.ndarray], np.ndarray],
    level: float = 0.01,
    name: str = "weighted_ks_one_sample",
) -> TestReport:
    """KS distance of the self-normalized weighted ECDF against ``cdf``.

    The critical value uses the effective sample size
    n_eff = (sum w)^2 / sum w^2, which reduces to the ordinary one-sample
    test when all weights are equal.
    """
    x = np.asarray(samples, dtype=float).ravel()
    w = np.asarray(weights, dtype=float).ravel()
    if x.size == 0:
        raise ValueError("empty sample")
    if x.size != w.size:
        raise ValueError("samples and weights must have equal length")
    if np.any(w <= 0):
        raise ValueError("weights must be positive")
    order = np.argsort(x, kind="mergesort")
    x = x[order]
    w = w[order]
    total = w.sum()
    if total <= 0:
        raise ValueError("weights sum to zero")
    cum = np.cumsum(w) / total
    f = cdf(x)
    upper = cum
    lower = np.concatenate([[0.0], cum[:-1]])
    stat = float(max(np.max(upper - f), np.max(f - lower)))
    n_eff = float(total**2 / np.sum(w**2))
    crit = ks_critical_coefficient(level) / math.sqrt(n_eff)
    return TestReport(name, stat, crit, level, (x.size,), metadata={"n_eff": n_eff})


@dataclass
class CovEstimate:
    var_x: float
    var_y: float
    corr: float
    se_var_x: float
    se_var_y: float
    se_corr: float
    n: int


def cov_estimate(increments, dt: float) -> CovEstimate:
    """Per-unit-time second moments of paired increments, with jackknife SEs.

    ``increments`` is an (n, 2) array of (dx, dy) over disjoint intervals of
    common length ``dt``.  Moments are computed about zero (the increments
    are centred by construction).
    """
    arr = np.asarray(increments, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2 or arr.shape[0] < 2:
        raise ValueError("need an (n, 2) array with n >= 2")
    dx, dy = arr[:, 0], arr[:, 1]
    n = dx.size
    sxx, syy, sxy = dx**2, dy**2, dx * dy
    mxx, myy, mxy = sxx.mean(), syy.mean(), sxy.mean()
    if mxx <= 0 or myy <= 0:
        raise ValueError("degenerate increments")
    corr = mxy / math.sqrt(mxx * myy)

    # Delete-one jackknife, computed from running sums (O(n)).
    txx, tyy, txy = sxx.sum(), syy.sum(), sxy.sum()
    jxx = (txx - sxx) / (n - 1)
    jyy = (tyy - syy) / (n - 1)
    jxy = (txy - sxy) / (n - 1)
    jcorr = jxy / np.sqrt(jxx * jyy)
    fac = (n - 1) / n

    def jse(vals, center):
        return math.sqrt(fac * np.sum((vals - center) ** 2))

    return CovEstimate(
        var_x=mxx / dt,
        var_y=myy / dt,
        corr=corr,
        se_var_x=jse(jxx, jxx.mean()) / dt,
        se_var_y=jse(jyy, jyy.mean()) / dt,
        se_corr=jse(jcorr, jcorr.mean()),
        n=n,
    )


def two_proportion(
    successes1: int,
    n1: int,
    successes2: int,
    n2: int,
    level: float = 0.01,
    name: str = "two_proportion",
) -> TestReport:
    """Pooled z-test of equality of two binomial proportions."""
    from scipy.special import ndtri

    if n1 <= 0 or n2 <= 0:
        raise ValueError("sample sizes must be positive")
    p1 = successes1 / n1
    p2 = successes2 / n2
    pooled = (successes1 + successes2) / (n1 + n2)
    denom = pooled * (1.0 - pooled) * (1.0 / n1 + 1.0 / n2)
    z = 0.0 if denom == 0 else (p1 - p2) / math.sqrt(denom)
    crit = float(ndtri(1.0 - level / 2.0))
    return TestReport(
        name,
        abs(z),
        crit,
        level,
        (n1, n2),
        metadata={"p1": p1, "p2": p2},
    )


def order_fit(errors: Sequence[tuple]) -> float:
    """Least-squares slope of log(error) against log(step)."""
    pts = [(float(s), float(e)) for s, e in errors]
    if len(pts) < 2 or len({s for s, _ in pts}) < 2:
        raise ValueError("need at least two distinct step sizes")
    if any(s <= 0 or e <= 0 for s, e in pts):
        raise ValueError("steps and errors must be positive")
    ls = np.log([s for s, _ in pts])
    le = np.log([e for _, e in pts])
    slope = np.polyfit(ls, le, 1)[0]
    return float(slope)


def binomial_ci_halfwidth(n: int, level: float = 0.01, p: float = 0.5) -> float:
    """Normal-approximation half-width of a (1 - level) CI for a proportion."""
    from scipy.special import ndtri

    return float(ndtri(1.0 - level / 2.0)) * math.sqrt(p * (1.0 - p) / n)
