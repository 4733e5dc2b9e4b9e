"""Correlation metrics and the Williams test for dependent correlations.

Spearman uses average (fractional) ranks for ties, so integer-valued
predictions are scored consistently. :func:`williams_test` compares two
metrics' correlations with the same human scores, using the form common in MT
evaluation (``t`` with ``n - 3`` degrees of freedom).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np
from scipy.special import betainc
from scipy.stats import rankdata

from layerqe.errors import ConfigError, UndefinedCorrelationError

Vector = Union[Sequence[float], np.ndarray]


def _as_pair(preds: Vector, refs: Vector) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(preds, dtype=np.float64).reshape(-1)
    b = np.asarray(refs, dtype=np.float64).reshape(-1)
    if a.size != b.size:
        raise ConfigError(f"predictions ({a.size}) and references ({b.size}) differ in length")
    if a.size < 2:
        raise UndefinedCorrelationError(f"correlation needs at least two points, got {a.size}")
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise UndefinedCorrelationError("correlation inputs contain NaN or infinite values")
    return a, b


def pearson(preds: Vector, refs: Vector) -> float:
    """Product-moment correlation, two-pass and accumulated in float64."""
    a, b = _as_pair(preds, refs)
    a = a - a.mean()
    b = b - b.mean()
    saa, sbb = float(np.dot(a, a)), float(np.dot(b, b))
    if saa == 0.0 or sbb == 0.0:
        raise UndefinedCorrelationError("correlation is undefined for a constant vector")
    r = float(np.dot(a, b)) / math.sqrt(saa * sbb)
    return min(1.0, max(-1.0, r))


def spearman(preds: Vector, refs: Vector) -> float:
    """Spearman's rho: Pearson correlation of the average-rank vectors."""
    a, b = _as_pair(preds, refs)
    return pearson(rankdata(a, method="average"), rankdata(b, method="average"))


def student_t_cdf(t: float, df: float) -> float:
    """``P(T <= t)`` for Student's t with ``df`` degrees of freedom.

    Uses ``I_x(df/2, 1/2)`` with ``x = df / (df + t^2)``; exact 0.5 at ``t = 0``
    and symmetric, ``cdf(t) + cdf(-t) == 1``.
    """
    if df <= 0:
        raise ConfigError(f"degrees of freedom must be positive, got {df}")
    if t == 0:
        return 0.5
    tail = 0.5 * float(betainc(df / 2.0, 0.5, df / (df + t * t)))
    return 1.0 - tail if t > 0 else tail


@dataclass(frozen=True)
class WilliamsInput:
    """Correlations of two metrics with human scores (``r12``, ``r13``) and with each other (``r23``)."""

    r12: float
    r13: float
    r23: float
    n: int

    def __post_init__(self) -> None:
        for name in ("r12", "r13", "r23"):
            value = getattr(self, name)
            if not -1.0 <= value <= 1.0:
                raise ConfigError(f"{name} must lie in [-1, 1], got {value}")
        if self.n <= 3:
            raise ConfigError(f"the Williams test needs n > 3 samples, got {self.n}")


@dataclass(frozen=True)
class WilliamsResult:
    t: float
    p_value: float
    df: int

    def significant(self, alpha: float = 0.05) -> bool:
        return self.p_value < alpha


def williams_test(w: WilliamsInput, *, two_sided: bool = False) -> WilliamsResult:
    """Is metric 1's correlation with humans higher than metric 2's?

    One-sided by default (``p = P(T >= t)``); ``two_sided`` doubles the smaller tail.
    """
    r12, r13, r23, n = w.r12, w.r13, w.r23, w.n
    df = n - 3
    if r12 == r13:
        return WilliamsResult(0.0, 1.0 if two_sided else 0.5, df)
    k = 1.0 - r12 * r12 - r13 * r13 - r23 * r23 + 2.0 * r12 * r13 * r23
    if k <= 0.0:
        raise UndefinedCorrelationError(f"degenerate correlation matrix (K = {k:.3g} <= 0)")
    numerator = (r12 - r13) * math.sqrt((n - 1) * (1.0 + r23))
    denominator = math.sqrt(2.0 * k * (n - 1) / (n - 3) + ((r12 + r13) ** 2 / 4.0) * (1.0 - r23) ** 3)
    t = numerator / denominator
    upper = 1.0 - student_t_cdf(t, df)
    if two_sided:
        p = min(1.0, 2.0 * min(upper, 1.0 - upper))
    else:
        p = upper
    return WilliamsResult(t, p, df)


def compare_predictions(
    preds_a: Vector, preds_b: Vector, refs: Vector, *, two_sided: bool = False
) -> tuple[float, float, WilliamsResult]:
    """Spearman of each system against ``refs`` and the Williams test of ``a`` over ``b``."""
    r12 = spearman(preds_a, refs)
    r13 = spearman(preds_b, refs)
    a = np.asarray(preds_a, dtype=np.float64)
    b = np.asarray(preds_b, dtype=np.float64)
    if np.array_equal(a, b):
        r23 = 1.0
    else:
        r23 = spearman(a, b)
    return r12, r13, williams_test(WilliamsInput(r12, r13, r23, int(a.size)), two_sided=two_sided)
