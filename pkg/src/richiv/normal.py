"""Standard-normal CDF, density, and quantile helpers.

All simulation draws and the probit likelihood go through these functions
so the distribution code is pinned in one place.  The CDF is computed via
the complementary error function, ``Phi(x) = erfc(-x / sqrt(2)) / 2``,
using scipy's rational approximations; accuracy against a high-precision
series oracle is asserted in the test suite.
"""

from __future__ import annotations

import numpy as np
from scipy import special

__all__ = ["norm_cdf", "norm_pdf", "norm_logcdf", "norm_ppf"]

_SQRT2 = np.sqrt(2.0)
_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


def norm_cdf(x):
    """Phi(x) via the complementary error function."""
    return 0.5 * special.erfc(-np.asarray(x, dtype=np.float64) / _SQRT2)


def norm_pdf(x):
    x = np.asarray(x, dtype=np.float64)
    return np.exp(-0.5 * x * x - _LOG_SQRT_2PI)


def norm_logcdf(x):
    """log Phi(x), stable deep in the lower tail."""
    return special.log_ndtr(np.asarray(x, dtype=np.float64))


def norm_ppf(p):
    """Phi^{-1}(p)."""
    return special.ndtri(np.asarray(p, dtype=np.float64))
