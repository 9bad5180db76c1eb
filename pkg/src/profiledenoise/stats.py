"""Two-sided paired t-test with explicit conventions for degenerate variance."""
from __future__ import annotations

import math
from typing import NamedTuple, Sequence

import numpy as np
from scipy.special import stdtr

TIERS = ((0.001, "‡"), (0.01, "†"), (0.05, "*"))


class TTestResult(NamedTuple):
    t: float
    p: float
    tier: str


def significance_tier(p: float) -> str:
    for bound, mark in TIERS:
        if p < bound:
            return mark
    return ""


def paired_t_test(sample_a: Sequence[float], sample_b: Sequence[float]) -> TTestResult:
    """Test mean(a - b) = 0. All-zero differences give p=1; zero variance otherwise gives p=0."""
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("samples must be 1-D and of equal length")
    n = len(a)
    if n < 2:
        raise ValueError("paired t-test needs at least 2 pairs")
    d = a - b
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0.0:
        if mean == 0.0:
            return TTestResult(0.0, 1.0, "")
        return TTestResult(math.copysign(math.inf, mean), 0.0, significance_tier(0.0))
    t = mean / (sd / math.sqrt(n))
    p = float(2.0 * stdtr(n - 1, -abs(t)))
    return TTestResult(float(t), p, significance_tier(p))
