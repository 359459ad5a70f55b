"""Student-t machinery and the one-sided paired test used for verification.

The t CDF is computed through the regularized incomplete beta function
(continued-fraction evaluation, Lentz's method), with a log-space variant
so survival probabilities far below double underflow are still reported
as log10 values.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError

_CF_MAX_ITER = 300
_CF_EPS = 3e-16
_CF_TINY = 1e-300


def _betacf(a, b, x):
    """Continued fraction for the incomplete beta function."""
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _CF_TINY:
        d = _CF_TINY
    d = 1.0 / d
    h = d
    for m in range(1, _CF_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _CF_TINY:
            d = _CF_TINY
        c = 1.0 + aa / c
        if abs(c) < _CF_TINY:
            c = _CF_TINY
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _CF_TINY:
            d = _CF_TINY
        c = 1.0 + aa / c
        if abs(c) < _CF_TINY:
            c = _CF_TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _CF_EPS:
            break
    return h


def _log_beta(a, b):
    return math.lgamma(a) + math.lgamma(b) - math.lgamma(a + b)


def log_betainc(a, b, x):
    """Natural log of the regularized incomplete beta I_x(a, b)."""
    if a <= 0 or b <= 0:
        raise InvalidArgumentError("beta parameters must be positive")
    if x <= 0.0:
        return -math.inf
    if x >= 1.0:
        return 0.0
    log_front = a * math.log(x) + b * math.log1p(-x) - _log_beta(a, b)
    if x < (a + 1.0) / (a + b + 2.0):
        return log_front + math.log(_betacf(a, b, x) / a)
    # switched branch: I_x = 1 - front * cf / b evaluated on the mirror
    tail = math.exp(log_front) * _betacf(b, a, 1.0 - x) / b
    return math.log1p(-tail)


def betainc(a, b, x):
    """Regularized incomplete beta function I_x(a, b)."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    return math.exp(log_betainc(a, b, x))


def t_cdf(t, df):
    """CDF of Student's t with df degrees of freedom."""
    if df < 1:
        raise InvalidArgumentError(f"degrees of freedom must be >= 1, got {df}")
    if t == 0.0:
        return 0.5
    x = df / (df + t * t)
    half_tail = 0.5 * betainc(df / 2.0, 0.5, x)
    return 1.0 - half_tail if t > 0 else half_tail


def t_sf(t, df):
    """Survival function P(T > t); accurate for large positive t."""
    return t_cdf(-t, df)


def log10_t_sf(t, df):
    """log10 of the survival function, usable when t_sf underflows to 0."""
    if df < 1:
        raise InvalidArgumentError(f"degrees of freedom must be >= 1, got {df}")
    if t <= 0.0:
        return math.log10(t_sf(t, df))
    x = df / (df + t * t)
    ln_half_tail = math.log(0.5) + log_betainc(df / 2.0, 0.5, x)
    return ln_half_tail / math.log(10.0)


def t_quantile(p, df):
    """Inverse CDF by monotone bisection on t_cdf."""
    if not 0.0 < p < 1.0:
        raise InvalidArgumentError(f"quantile probability must be in (0,1), got {p}")
    lo, hi = -1.0, 1.0
    while t_cdf(lo, df) > p:
        lo *= 2.0
        if lo < -1e18:
            break
    while t_cdf(hi, df) < p:
        hi *= 2.0
        if hi > 1e18:
            break
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if t_cdf(mid, df) < p:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-13 * max(1.0, abs(lo), abs(hi)):
            break
    return 0.5 * (lo + hi)


@dataclass(frozen=True)
class PairedTestResult:
    """One-sided paired t-test of H1: P_b > P_v + tau."""

    t_stat: float
    p_value: float
    log10_p: float
    df: int
    mean_diff: float
    std_diff: float
    degenerate: bool

    def as_tuple(self):
        return self.t_stat, self.p_value


def paired_t_test_detailed(p_benign, p_verified, tau):
    pb = np.asarray(p_benign, dtype=np.float64).reshape(-1)
    pv = np.asarray(p_verified, dtype=np.float64).reshape(-1)
    if pb.shape != pv.shape:
        raise InvalidArgumentError("paired samples must have equal length")
    m = pb.size
    if m < 2:
        raise InvalidArgumentError(f"need at least 2 pairs, got {m}")
    d = pb - pv - tau
    mean = float(d.mean())
    s = float(d.std(ddof=1))
    df = m - 1
    if s == 0.0:
        # constant differences: the statistic is undefined, decide by sign
        if mean > 0.0:
            t, p, lp = math.inf, 0.0, -math.inf
        elif mean < 0.0:
            t, p, lp = -math.inf, 1.0, 0.0
        else:
            t, p, lp = 0.0, 0.5, math.log10(0.5)
        return PairedTestResult(t, p, lp, df, mean, s, True)
    t = math.sqrt(m) * mean / s
    p = t_sf(t, df)
    lp = log10_t_sf(t, df)
    return PairedTestResult(t, p, lp, df, mean, s, False)


def paired_t_test(p_benign, p_verified, tau):
    """(t statistic, one-sided p-value) for H1: P_b > P_v + tau."""
    return paired_t_test_detailed(p_benign, p_verified, tau).as_tuple()
