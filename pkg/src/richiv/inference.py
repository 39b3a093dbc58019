"""Variance estimators for the IV assemblies.

Two corrected sandwiches account for the estimated first step (one for
the instrument-residual form, one for the control-function form), and a
naive HC0 / cluster-robust sandwich covers plain IV.  The correction
enters through a regression of the IV residuals on the covariates: the
score of observation i gains the term phi_i built from
m_eps(c_i) ~ E[eps | c_i], estimated by Nadaraya-Watson with the same
kernel and bandwidths as the first step (or the default kernel policy
when the first step has none, e.g. an oracle).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .errors import DegenerateDenominator, DimensionMismatch, SingleCluster, SingularG
from .firststep import auto_kernel_order
from .kernels import BandwidthRule, HigherOrderKernel, NwFit, bandwidths, make_epanechnikov, nw_predict

__all__ = [
    "VarianceEstimate",
    "ir_variance",
    "cf_variance",
    "naive_iv_variance",
]

RCOND_TOL = 1e-12


@dataclass(frozen=True)
class VarianceEstimate:
    """Covariance matrix and standard errors for an IV estimate.

    For the corrected methods ``cov`` estimates the asymptotic variance of
    sqrt(n) (beta_hat - beta0) and ``se = sqrt(diag(cov) / n)``; for the
    naive methods ``cov`` is the finite-sample sandwich and
    ``se = sqrt(diag(cov))``.  ``residual_mean`` carries the fitted
    m_eps(c_i) when a correction was computed.
    """

    cov: np.ndarray
    se: np.ndarray
    method: str
    residual_mean: np.ndarray | None = None


def _symmetrize(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + M.T)


def _g_inverse(Q: np.ndarray, X: np.ndarray, n: int) -> np.ndarray:
    G = Q.T @ X / n
    s = np.linalg.svd(G, compute_uv=False)
    if s[0] == 0 or s[-1] / s[0] < RCOND_TOL:
        raise SingularG("the Jacobian Q'X/n of the moment condition is numerically singular")
    return np.linalg.solve(G, np.eye(G.shape[0]))


def _residual_mean(
    ds: Dataset,
    residuals: np.ndarray,
    est,
    kernel: HigherOrderKernel | None,
    h,
) -> np.ndarray:
    """Nadaraya-Watson regression of the residuals on the covariates."""
    if kernel is None or h is None:
        nw_ctx = est.first_step.nw if est.first_step is not None else None
        if kernel is None:
            kernel = nw_ctx.kernel if nw_ctx is not None else make_epanechnikov(auto_kernel_order(ds.d))
        if h is None:
            h = nw_ctx.h if nw_ctx is not None else bandwidths(ds.C, BandwidthRule())
    fit = NwFit(C=ds.C, values=residuals, kernel=kernel, h=np.asarray(h, dtype=np.float64))
    values, degenerate = nw_predict(fit, ds.C)
    if degenerate.any():
        rows = np.flatnonzero(degenerate).tolist()
        raise DegenerateDenominator(
            f"residual-mean regression degenerate at {len(rows)} row(s)", rows=rows
        )
    return values


def _warn_if_clustered(ds: Dataset, method: str) -> None:
    if ds.cluster is not None:
        warnings.warn(
            f"{method} assumes random sampling; the dataset's cluster column is ignored",
            stacklevel=3,
        )


def ir_variance(
    est,
    ds: Dataset,
    kernel: HigherOrderKernel | None = None,
    h=None,
    zero_residual_mean: bool = False,
) -> VarianceEstimate:
    """Corrected sandwich for the instrument-residual estimator.

    ``zero_residual_mean=True`` is a diagnostic switch that forces
    m_eps = 0, collapsing the result to the naive score variance.
    """
    if est.method not in ("ir", "psr", "dml"):
        raise ValueError(f"ir_variance needs an instrument-residual estimate, got {est.method!r}")
    if est.instruments is None:
        raise ValueError("cross-fit aggregates carry no moment system to build a variance from")
    _warn_if_clustered(ds, "the corrected IR variance")
    Q, X, eps = est.instruments, est.regressors, est.residuals
    n, p = Q.shape
    Ginv = _g_inverse(Q, X, n)
    if zero_residual_mean:
        m_eps = np.zeros(n)
    else:
        m_eps = _residual_mean(ds, eps, est, kernel, h)
    # tau_i = q_i eps_i + phi_i with phi_i = (-(z_i - zeta_i) m_eps(c_i), 0')'
    tau = Q * eps[:, None]
    tau[:, 0] -= Q[:, 0] * m_eps
    omega = tau.T @ tau / n
    cov = _symmetrize(Ginv @ omega @ Ginv.T)
    return VarianceEstimate(
        cov=cov,
        se=np.sqrt(np.diag(cov) / n),
        method="corrected-ir",
        residual_mean=m_eps,
    )


def cf_variance(
    est,
    ds: Dataset,
    kernel: HigherOrderKernel | None = None,
    h=None,
    zero_residual_mean: bool = False,
) -> VarianceEstimate:
    """Corrected sandwich for the control-function estimator."""
    if est.method != "cf":
        raise ValueError(f"cf_variance needs a control-function estimate, got {est.method!r}")
    _warn_if_clustered(ds, "the corrected CF variance")
    Q, X, eps = est.instruments, est.regressors, est.residuals
    n, p = Q.shape
    zeta = est.zeta
    zstar = Q[:, 0] - zeta  # the instrument is z itself in the CF assembly
    phi_hat = est.phi
    r = X[:, 1 : p - 1]
    Ginv = _g_inverse(Q, X, n)
    if zero_residual_mean:
        m_eps = np.zeros(n)
    else:
        m_eps = _residual_mean(ds, eps, est, kernel, h)
    phi_mat = np.empty((n, p))
    phi_mat[:, 0] = zstar * (-phi_hat * zeta)
    phi_mat[:, 1 : p - 1] = zstar[:, None] * (-phi_hat * r)
    phi_mat[:, p - 1] = zstar * (m_eps - phi_hat * zeta)
    tau = Q * eps[:, None] + phi_mat
    omega = tau.T @ tau / n
    cov = _symmetrize(Ginv @ omega @ Ginv.T)
    return VarianceEstimate(
        cov=cov,
        se=np.sqrt(np.diag(cov) / n),
        method="corrected-cf",
        residual_mean=m_eps,
    )


def naive_iv_variance(est, cluster: np.ndarray | None = None) -> VarianceEstimate:
    """HC0 or cluster-robust sandwich for plain IV, ignoring the first step.

    The cluster version sums scores within cluster before the outer
    product (CR0).
    """
    if est.instruments is None:
        raise ValueError("cross-fit aggregates carry no moment system to build a variance from")
    Q, X, eps = est.instruments, est.regressors, est.residuals
    n, p = Q.shape
    scores = Q * eps[:, None]
    if cluster is None:
        meat = scores.T @ scores
        method = "hc0"
    else:
        cluster = np.asarray(cluster).reshape(-1)
        if cluster.shape[0] != n:
            raise DimensionMismatch(
                f"cluster vector has length {cluster.shape[0]}, expected {n}"
            )
        _, ids = np.unique(cluster, return_inverse=True)
        n_groups = int(ids.max()) + 1
        if n_groups == 1:
            raise SingleCluster("cluster-robust variance needs at least 2 clusters")
        sums = np.zeros((n_groups, p))
        for j in range(p):
            sums[:, j] = np.bincount(ids, weights=scores[:, j], minlength=n_groups)
        meat = sums.T @ sums
        method = "cluster"
    A = Q.T @ X
    s = np.linalg.svd(A, compute_uv=False)
    if s[0] == 0 or s[-1] / s[0] < RCOND_TOL:
        raise SingularG("Q'X is numerically singular")
    Ainv = np.linalg.solve(A, np.eye(p))
    cov = _symmetrize(Ainv @ meat @ Ainv.T)
    return VarianceEstimate(cov=cov, se=np.sqrt(np.diag(cov)), method=method)
