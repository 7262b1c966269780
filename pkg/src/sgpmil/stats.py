"""Welch's two-sample t-test with a self-contained Student-t tail.

The two-sided p-value is ``I_x(df/2, 1/2)`` with ``x = df / (df + t^2)``,
where ``I`` is the regularized incomplete beta function evaluated by a
modified-Lentz continued fraction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, InvalidArgumentError

_EPS = 1e-16
_TINY = 1e-300
_MAX_ITER = 10_000


def _beta_cf(a: float, b: float, x: float) -> float:
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _TINY:
        d = _TINY
    d = 1.0 / d
    h = d
    for m in range(1, _MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _TINY:
            d = _TINY
        c = 1.0 + aa / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _TINY:
            d = _TINY
        c = 1.0 + aa / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc_reg(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta ``I_x(a, b)`` for ``a, b > 0`` and ``0 <= x <= 1``."""
    if a <= 0 or b <= 0:
        raise InvalidArgumentError("betainc_reg needs a, b > 0")
    if not 0.0 <= x <= 1.0:
        raise InvalidArgumentError("betainc_reg needs 0 <= x <= 1")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(log_front)
    # the continued fraction converges fast only on this side of the mode
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _beta_cf(a, b, x) / a
    return 1.0 - front * _beta_cf(b, a, 1.0 - x) / b


def student_t_sf2(t: float, df: float) -> float:
    """Two-sided tail probability ``P(|T| >= |t|)`` for Student's t with ``df`` degrees of freedom."""
    if math.isinf(t):
        return 0.0
    return betainc_reg(df / 2.0, 0.5, df / (df + t * t))


@dataclass
class WelchResult:
    t: float
    p: float
    df: float
    mean1: float
    mean2: float
    std1: float
    std2: float
    n1: int
    n2: int
    zero_variance: bool = False


def welch_ttest(x1, x2) -> WelchResult:
    """Two-sided Welch test of equal means; ``t`` is positive when ``mean(x1) > mean(x2)``."""
    a = np.asarray(x1, dtype=np.float64).ravel()
    b = np.asarray(x2, dtype=np.float64).ravel()
    n1, n2 = a.size, b.size
    if n1 < 2 or n2 < 2:
        raise DegenerateInputError(f"Welch test needs at least 2 values per group, got {n1} and {n2}")
    m1, m2 = float(a.mean()), float(b.mean())
    v1, v2 = float(a.var(ddof=1)), float(b.var(ddof=1))
    se1, se2 = v1 / n1, v2 / n2
    se = se1 + se2
    if se == 0.0:
        if m1 == m2:
            return WelchResult(0.0, 1.0, float(n1 + n2 - 2), m1, m2, 0.0, 0.0, n1, n2, zero_variance=True)
        t = math.copysign(math.inf, m1 - m2)
        return WelchResult(t, 0.0, float(n1 + n2 - 2), m1, m2, 0.0, 0.0, n1, n2, zero_variance=True)
    t = (m1 - m2) / math.sqrt(se)
    df = se * se / (se1 * se1 / (n1 - 1) + se2 * se2 / (n2 - 1))
    return WelchResult(t, student_t_sf2(t, df), df, m1, m2, math.sqrt(v1), math.sqrt(v2), n1, n2)
