"""Higher-order Epanechnikov kernels, bandwidth rules, and Nadaraya-Watson regression.

A kernel of even order m has the form K(u) = B(u) * (3/4)(1 - u^2) on
[-1, 1] and 0 outside, where B is an even polynomial chosen so that K
integrates to 1 and its moments of order 1..m-1 vanish.  Multivariate
smoothing uses the product of univariate kernels with one bandwidth per
covariate column.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import (
    AllDenominatorsDegenerate,
    DegenerateColumn,
    DimensionMismatch,
    OddOrder,
    OrderOutOfRange,
)

__all__ = [
    "HigherOrderKernel",
    "BandwidthRule",
    "NwFit",
    "make_epanechnikov",
    "kernel_eval",
    "bandwidths",
    "nw_predict",
]

MAX_ORDER = 12

# Relative floor under which a Nadaraya-Watson denominator is flagged as
# degenerate (higher-order kernels can produce near-zero or negative sums).
DENOMINATOR_FLOOR = 1e-10

# Evaluation points are processed in blocks to bound the size of the
# (block x n) weight matrix.
_CHUNK = 512


@dataclass(frozen=True)
class HigherOrderKernel:
    """Even-order Epanechnikov-based kernel.

    ``coeffs[j]`` is the coefficient of u^(2j) in the multiplier B(u);
    ``coeffs_exact`` carries the same coefficients as exact rationals.
    """

    order: int
    coeffs: np.ndarray
    coeffs_exact: tuple[Fraction, ...]


def _base_moment(j: int) -> Fraction:
    """Exact even moment of the order-2 Epanechnikov kernel: int u^(2j) k(u) du."""
    return Fraction(3, (2 * j + 1) * (2 * j + 3))


def make_epanechnikov(order: int) -> HigherOrderKernel:
    """Construct the multiplicative Epanechnikov kernel of the given even order.

    The multiplier coefficients solve the (order/2) x (order/2) linear
    system forcing a unit integral and vanishing moments of order
    2, 4, ..., order-2 (odd moments vanish by symmetry).  The system is
    solved in exact rational arithmetic.
    """
    if order % 2 != 0:
        raise OddOrder(f"kernel order must be even, got {order}")
    if not 2 <= order <= MAX_ORDER:
        raise OrderOutOfRange(f"kernel order must be in [2, {MAX_ORDER}], got {order}")
    m = order // 2
    # A[l][j] = int u^(2(l+j)) k(u) du ; rhs = (1, 0, ..., 0)
    A = [[_base_moment(l + j) for j in range(m)] for l in range(m)]
    b = [Fraction(1)] + [Fraction(0)] * (m - 1)
    coeffs = _solve_exact(A, b)
    return HigherOrderKernel(
        order=order,
        coeffs=np.array([float(c) for c in coeffs]),
        coeffs_exact=tuple(coeffs),
    )


def _solve_exact(A: list[list[Fraction]], b: list[Fraction]) -> list[Fraction]:
    """Gaussian elimination with exact rationals (tiny systems only)."""
    m = len(b)
    M = [row[:] + [b[i]] for i, row in enumerate(A)]
    for col in range(m):
        pivot = next(r for r in range(col, m) if M[r][col] != 0)
        M[col], M[pivot] = M[pivot], M[col]
        inv = Fraction(1) / M[col][col]
        M[col] = [v * inv for v in M[col]]
        for r in range(m):
            if r != col and M[r][col] != 0:
                factor = M[r][col]
                M[r] = [v - factor * w for v, w in zip(M[r], M[col])]
    return [M[r][m] for r in range(m)]


def kernel_eval(kernel: HigherOrderKernel, u) -> np.ndarray:
    """Evaluate K(u); zero outside the support [-1, 1]."""
    u = np.asarray(u, dtype=np.float64)
    u2 = u * u
    B = np.zeros_like(u2)
    for c in kernel.coeffs[::-1]:
        B = B * u2 + c
    out = B * 0.75 * (1.0 - u2)
    return np.where(np.abs(u) < 1.0, out, 0.0)


@dataclass(frozen=True)
class BandwidthRule:
    """Per-column bandwidth h_j = scale * sigma_j * n^exponent.

    ``scale=None`` uses 1.1 + 0.725 d and ``exponent=None`` uses
    -1/(2d+1), matching the simulation defaults; both are exposed because
    the scaling constant is a case-by-case choice.  ``per_column=False``
    drops the sample-standard-deviation factor.
    """

    scale: float | None = None
    exponent: float | None = None
    per_column: bool = True

    def resolve(self, d: int) -> tuple[float, float]:
        scale = (1.1 + 0.725 * d) if self.scale is None else float(self.scale)
        exponent = (-1.0 / (2 * d + 1)) if self.exponent is None else float(self.exponent)
        return scale, exponent


def bandwidths(C: np.ndarray, rule: BandwidthRule | None = None) -> np.ndarray:
    """Bandwidth vector for a covariate matrix under a :class:`BandwidthRule`."""
    C = np.asarray(C, dtype=np.float64)
    n, d = C.shape
    if n < 2:
        raise DegenerateColumn("bandwidth rule needs at least 2 rows")
    rule = rule or BandwidthRule()
    scale, exponent = rule.resolve(d)
    sigma = C.std(axis=0, ddof=1) if rule.per_column else np.ones(d)
    zero = np.flatnonzero(sigma == 0.0)
    if zero.size:
        raise DegenerateColumn(
            f"covariate column(s) {zero.tolist()} have zero sample standard deviation",
            columns=zero.tolist(),
        )
    h = scale * sigma * n**exponent
    if not (np.isfinite(h).all() and (h > 0).all()):
        raise DegenerateColumn("bandwidth rule produced non-positive bandwidths", h=h.tolist())
    return h


@dataclass(frozen=True)
class NwFit:
    """Frozen inputs of a Nadaraya-Watson regression.

    ``values`` are the training responses (the instrument for the first
    step, residuals when estimating E[eps|c] for the corrected variances).
    """

    C: np.ndarray
    values: np.ndarray
    kernel: HigherOrderKernel
    h: np.ndarray
    denominator_floor: float = DENOMINATOR_FLOOR

    def __post_init__(self):
        h = np.asarray(self.h, dtype=np.float64).reshape(-1)
        if h.shape[0] != self.C.shape[1]:
            raise DimensionMismatch(
                f"{h.shape[0]} bandwidths for {self.C.shape[1]} covariate columns"
            )
        if not (h > 0).all():
            raise DegenerateColumn("bandwidths must be strictly positive")
        object.__setattr__(self, "h", h)


def nw_predict(fit: NwFit, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nadaraya-Watson prediction at the given points.

    Returns ``(values, degenerate)`` where ``degenerate[i]`` is True when
    the weight denominator at point i is within the relative floor of
    zero; flagged values are NaN and must not be used.  Predictions are
    not clipped to [0, 1]: higher-order kernels legitimately produce
    values outside the unit interval.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 1:
        points = points.reshape(-1, 1)
    m, d = points.shape
    if d != fit.C.shape[1]:
        raise DimensionMismatch(f"points have {d} columns, training data has {fit.C.shape[1]}")
    if m == 0:
        return np.empty(0), np.empty(0, dtype=bool)
    num = np.empty(m)
    den = np.empty(m)
    train = fit.C.T  # d x n, contiguous per-dimension rows
    for start in range(0, m, _CHUNK):
        stop = min(start + _CHUNK, m)
        block = points[start:stop]
        W = kernel_eval(fit.kernel, (block[:, 0, None] - train[0][None, :]) / fit.h[0])
        for j in range(1, d):
            W *= kernel_eval(fit.kernel, (block[:, j, None] - train[j][None, :]) / fit.h[j])
        num[start:stop] = W @ fit.values
        den[start:stop] = W.sum(axis=1)
    floor = fit.denominator_floor * np.max(np.abs(den), initial=0.0)
    degenerate = np.abs(den) <= floor
    if degenerate.all():
        raise AllDenominatorsDegenerate(
            "every evaluation point has a degenerate kernel denominator"
        )
    values = np.where(degenerate, np.nan, num / np.where(degenerate, 1.0, den))
    return values, degenerate
