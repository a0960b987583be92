"""Small statistics used to read sweep results: seed CIs and plateau tests."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import stats


def mean_ci(values: Sequence[float], level: float = 0.95) -> tuple[float, float, float]:
    """Student-t interval for the mean across seeds: (mean, lo, hi)."""
    x = np.asarray(values, dtype=float)
    m = float(x.mean())
    if len(x) < 2:
        return m, -np.inf, np.inf
    half = stats.t.ppf(0.5 + level / 2, len(x) - 1) * x.std(ddof=1) / np.sqrt(len(x))
    return m, m - half, m + half


def intervals_disjoint(a: tuple[float, float, float], b: tuple[float, float, float]) -> bool:
    return a[2] < b[1] or b[2] < a[1]


@dataclass(frozen=True)
class SlopeTest:
    slope: float
    p_increasing: float  # one-sided p-value for slope > 0

    @property
    def stagnant(self) -> bool:
        return self.p_increasing > 0.05


def slope_test(series: Sequence[float]) -> SlopeTest:
    """OLS slope of a series against its index, with a one-sided test for
    improvement. A flat or falling series is called stagnant."""
    y = np.asarray(series, dtype=float)
    if len(y) < 3 or np.ptp(y) == 0:
        return SlopeTest(0.0, 1.0)
    fit = stats.linregress(np.arange(len(y)), y)
    p = fit.pvalue / 2 if fit.slope > 0 else 1 - fit.pvalue / 2
    return SlopeTest(float(fit.slope), float(p))
