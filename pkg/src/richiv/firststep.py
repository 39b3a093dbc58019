"""Interchangeable estimators of the instrument propensity E[z|c].

Five first steps are provided: Nadaraya-Watson kernel regression, probit
maximum likelihood, saturated cell means, a single-hidden-layer ReLU
network trained with Adam, and a user-supplied oracle.  Each returns a
:class:`FirstStepFit` with the fitted values at the sample points and,
where possible, a predictor for new points.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import Dataset, RegressorSpec, design_matrix
from .errors import (
    DegenerateDenominator,
    LengthMismatch,
    NonFinite,
    NonFiniteLoss,
    NotConverged,
    PredictUnseenCell,
    Separation,
)
from .kernels import BandwidthRule, NwFit, bandwidths, make_epanechnikov, nw_predict
from .normal import norm_cdf, norm_logcdf

__all__ = [
    "FirstStepFit",
    "ProbitFit",
    "MlpConfig",
    "MlpParams",
    "fit_nw",
    "fit_probit",
    "fit_cell_means",
    "fit_mlp",
    "train_mlp",
    "oracle",
    "auto_kernel_order",
]


@dataclass(frozen=True)
class FirstStepFit:
    """Fitted instrument propensity.

    ``fitted`` holds zeta-hat at the n sample points (always finite).
    ``predict`` maps a new covariate matrix to predictions, or is None
    when out-of-sample prediction is unavailable (oracle).  ``nw`` keeps
    the kernel context when the fit is a Nadaraya-Watson regression so
    the corrected variance estimators can reuse it.
    """

    method: str
    fitted: np.ndarray
    predict: Callable[[np.ndarray], np.ndarray] | None
    diagnostics: dict = field(default_factory=dict)
    nw: NwFit | None = None

    def __post_init__(self):
        fitted = np.asarray(self.fitted, dtype=np.float64).reshape(-1)
        if not np.isfinite(fitted).all():
            raise NonFinite(f"{self.method} first step produced non-finite fitted values")
        object.__setattr__(self, "fitted", fitted)


def auto_kernel_order(d: int) -> int:
    """Smallest even kernel order >= d + 1 (symmetry kills odd moments)."""
    return d + 1 if (d + 1) % 2 == 0 else d + 2


def fit_nw(
    ds: Dataset,
    order: int | None = None,
    rule: BandwidthRule | None = None,
    h: Sequence[float] | None = None,
) -> FirstStepFit:
    """Nadaraya-Watson regression of z on c, evaluated leave-in at the sample points.

    ``order=None`` picks the smallest even order >= d + 1; ``h`` overrides
    the bandwidth rule with explicit per-column bandwidths.
    """
    if ds.d < 1:
        raise DegenerateDenominator("kernel first step requires at least one covariate")
    kernel = make_epanechnikov(auto_kernel_order(ds.d) if order is None else order)
    hv = np.asarray(h, dtype=np.float64) if h is not None else bandwidths(ds.C, rule)
    fit = NwFit(C=ds.C, values=ds.z, kernel=kernel, h=hv)
    values, degenerate = nw_predict(fit, ds.C)
    if degenerate.any():
        rows = np.flatnonzero(degenerate).tolist()
        raise DegenerateDenominator(
            f"kernel denominator degenerate at {len(rows)} training row(s): {rows[:10]}",
            rows=rows,
        )

    def predict(C_new: np.ndarray) -> np.ndarray:
        vals, bad = nw_predict(fit, C_new)
        if bad.any():
            rows = np.flatnonzero(bad).tolist()
            raise DegenerateDenominator(
                f"kernel denominator degenerate at {len(rows)} prediction row(s)",
                rows=rows,
            )
        return vals

    return FirstStepFit(
        method="nw",
        fitted=values,
        predict=predict,
        diagnostics={"order": kernel.order, "h": hv.tolist()},
        nw=fit,
    )


# --- probit ---------------------------------------------------------------


@dataclass(frozen=True)
class ProbitFit:
    """Probit MLE coefficients on (intercept, covariates)."""

    coef: np.ndarray
    converged: bool
    iterations: int
    loglik: float


MAX_PROBIT_ITER = 100
GRAD_TOL = 1e-8
SEPARATION_INDEX = 15.0
MAX_HALVINGS = 30


def _probit_loglik(z: np.ndarray, eta: np.ndarray) -> float:
    return float(np.sum(np.where(z == 1.0, norm_logcdf(eta), norm_logcdf(-eta))))


def fit_probit(ds: Dataset, spec: RegressorSpec | None = None) -> tuple[ProbitFit, FirstStepFit]:
    """Probit MLE of z on the spec's design, by Newton-Raphson with step halving.

    Convergence requires the score max-norm below 1e-8.  Divergence of the
    linear index past +/-15 while the likelihood is still improving is
    reported as :class:`Separation` (the boundary MLE does not exist).
    """
    spec = spec or RegressorSpec()
    X = design_matrix(ds.C, spec)
    z = ds.z
    p = X.shape[1]
    b = np.zeros(p)
    ll = _probit_loglik(z, X @ b)
    ll_path = [ll]
    iterations = 0
    converged = False
    for _ in range(MAX_PROBIT_ITER):
        eta = X @ b
        logpdf = -0.5 * eta * eta - 0.5 * np.log(2 * np.pi)
        # score per observation wrt eta; stable in both tails
        g = np.where(
            z == 1.0,
            np.exp(logpdf - norm_logcdf(eta)),
            -np.exp(logpdf - norm_logcdf(-eta)),
        )
        grad = X.T @ g
        if np.max(np.abs(grad)) < GRAD_TOL:
            converged = True
            break
        w = g * (g + eta)  # -d2/deta2 of the log-likelihood; positive by log-concavity
        H = X.T @ (w[:, None] * X)
        delta = np.linalg.solve(H, grad)
        step = 1.0
        accepted = False
        for _ in range(MAX_HALVINGS + 1):
            b_try = b + step * delta
            ll_try = _probit_loglik(z, X @ b_try)
            if ll_try >= ll:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        improving = ll_try > ll
        b, ll = b_try, ll_try
        ll_path.append(ll)
        iterations += 1
        if improving and np.max(np.abs(X @ b)) > SEPARATION_INDEX:
            raise Separation(
                "probit index exceeded +/-15 with the likelihood still increasing; "
                "the MLE lies on the boundary (perfect or quasi-complete separation)"
            )
    if not converged:
        raise NotConverged(
            f"probit Newton-Raphson did not converge in {MAX_PROBIT_ITER} iterations"
        )
    eta = X @ b
    # a converged point where every observation sits strictly on its own side
    # of the index exhibits a separating hyperplane: the true MLE is at
    # infinity and the stop only reflects the gradient tolerance
    if np.all((2.0 * z - 1.0) * eta > 0.0):
        raise Separation(
            "the design perfectly separates the instrument; the probit MLE does not exist"
        )
    fitted = norm_cdf(eta)
    probit = ProbitFit(coef=b, converged=True, iterations=iterations, loglik=ll)

    def predict(C_new: np.ndarray) -> np.ndarray:
        return norm_cdf(design_matrix(np.asarray(C_new, dtype=np.float64), spec, check_rank=False) @ b)

    fs = FirstStepFit(
        method="probit",
        fitted=fitted,
        predict=predict,
        diagnostics={"iterations": iterations, "loglik_path": ll_path},
    )
    return probit, fs


# --- saturated cell means ---------------------------------------------------


def fit_cell_means(ds: Dataset, key: Sequence[int] | None = None) -> FirstStepFit:
    """Within-cell means of z, cells keyed by the given (discrete) covariate columns.

    Numerically identical to a saturated linear probability model.  The
    keyed columns must take finitely many exact values; every observation
    defines or joins a cell, so fitting never fails, but predicting a cell
    unseen in training raises :class:`PredictUnseenCell`.
    """
    cols = tuple(range(ds.d)) if key is None else tuple(key)
    keyed = ds.C[:, cols]
    cells, inverse = np.unique(keyed, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    counts = np.bincount(inverse)
    means = np.bincount(inverse, weights=ds.z) / counts
    fitted = means[inverse]
    lookup = {tuple(cells[i].tolist()): float(means[i]) for i in range(cells.shape[0])}

    def predict(C_new: np.ndarray) -> np.ndarray:
        C_new = np.asarray(C_new, dtype=np.float64)
        rows = C_new[:, cols]
        out = np.empty(rows.shape[0])
        for i in range(rows.shape[0]):
            cell = tuple(rows[i].tolist())
            if cell not in lookup:
                raise PredictUnseenCell(
                    f"covariate cell {cell} was not observed in training", cell=cell
                )
            out[i] = lookup[cell]
        return out

    return FirstStepFit(
        method="cells",
        fitted=fitted,
        predict=predict,
        diagnostics={"n_cells": int(cells.shape[0]), "key": list(cols)},
    )


# --- single-hidden-layer ReLU network ---------------------------------------


@dataclass(frozen=True)
class MlpConfig:
    """Hyperparameters of the shallow ReLU regression network.

    The network is a regressor (identity output, mean-squared-error loss),
    mirroring a regression fit of E[z|c]; outputs are not clipped to
    [0, 1].  The L2 penalty is ``l2_alpha / n`` times the sum of squared
    weights (biases unpenalized).
    """

    hidden_units: int = 100
    l2_alpha: float = 1e-4
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int | None = None  # None -> min(200, n)
    max_epochs: int = 200

    def __post_init__(self):
        if self.hidden_units < 1:
            raise ValueError("hidden_units must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.l2_alpha < 0:
            raise ValueError("l2_alpha must be non-negative")


@dataclass
class MlpParams:
    """Network weights: output = relu(C @ w1 + b1) @ w2 + b2."""

    w1: np.ndarray  # (d, hidden)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (hidden,)
    b2: float

    def arrays(self) -> list[np.ndarray]:
        return [self.w1, self.b1, self.w2]


def init_mlp_params(d: int, hidden: int, rng: np.random.Generator) -> MlpParams:
    """Uniform init on +/-sqrt(6/(fan_in+fan_out)); biases zero."""
    lim1 = np.sqrt(6.0 / (d + hidden))
    lim2 = np.sqrt(6.0 / (hidden + 1))
    return MlpParams(
        w1=rng.uniform(-lim1, lim1, size=(d, hidden)),
        b1=np.zeros(hidden),
        w2=rng.uniform(-lim2, lim2, size=hidden),
        b2=0.0,
    )


def mlp_forward(params: MlpParams, C: np.ndarray) -> np.ndarray:
    hidden = np.maximum(C @ params.w1 + params.b1, 0.0)
    return hidden @ params.w2 + params.b2


def mlp_loss_and_grad(
    params: MlpParams, C: np.ndarray, target: np.ndarray, l2_over_n: float
) -> tuple[float, MlpParams]:
    """Regularized MSE and its exact gradient for one batch."""
    pre = C @ params.w1 + params.b1
    hidden = np.maximum(pre, 0.0)
    pred = hidden @ params.w2 + params.b2
    resid = pred - target
    batch = target.shape[0]
    loss = float(resid @ resid) / batch + l2_over_n * (
        float(np.sum(params.w1 * params.w1)) + float(params.w2 @ params.w2)
    )
    gpred = 2.0 * resid / batch
    gw2 = hidden.T @ gpred + 2.0 * l2_over_n * params.w2
    gb2 = float(gpred.sum())
    ghidden = np.outer(gpred, params.w2)
    gpre = ghidden * (pre > 0.0)
    gw1 = C.T @ gpre + 2.0 * l2_over_n * params.w1
    gb1 = gpre.sum(axis=0)
    return loss, MlpParams(w1=gw1, b1=gb1, w2=gw2, b2=gb2)


def train_mlp(
    C: np.ndarray, target: np.ndarray, cfg: MlpConfig | None = None, seed: int = 0
) -> tuple[MlpParams, dict]:
    """Train the shallow ReLU network on an arbitrary target by mini-batch Adam.

    Fully deterministic given (cfg, seed): weights are initialized from
    one stream and the per-epoch shuffles come from a second stream, both
    derived from the seed.  A non-finite batch loss aborts with
    :class:`NonFiniteLoss`.
    """
    cfg = cfg or MlpConfig()
    C = np.asarray(C, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64).reshape(-1)
    n, d = C.shape
    if n < 2:
        raise LengthMismatch("network training requires at least 2 observations")
    init_rng = np.random.default_rng(np.random.SeedSequence((seed, 0)))
    shuffle_rng = np.random.default_rng(np.random.SeedSequence((seed, 1)))
    params = init_mlp_params(d, cfg.hidden_units, init_rng)
    l2_over_n = cfg.l2_alpha / n
    batch_size = min(200, n) if cfg.batch_size is None else min(cfg.batch_size, n)

    moments = {
        name: (np.zeros_like(arr), np.zeros_like(arr))
        for name, arr in (("w1", params.w1), ("b1", params.b1), ("w2", params.w2))
    }
    m_b2 = v_b2 = 0.0
    step = 0
    for epoch in range(cfg.max_epochs):
        perm = shuffle_rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = perm[start : start + batch_size]
            loss, grad = mlp_loss_and_grad(params, C[idx], target[idx], l2_over_n)
            if not np.isfinite(loss):
                raise NonFiniteLoss(
                    f"training diverged at epoch {epoch}, step {step} (loss={loss})",
                    epoch=epoch,
                    step=step,
                )
            step += 1
            for name, g in (("w1", grad.w1), ("b1", grad.b1), ("w2", grad.w2)):
                m, v = moments[name]
                m *= cfg.adam_beta1
                m += (1 - cfg.adam_beta1) * g
                v *= cfg.adam_beta2
                v += (1 - cfg.adam_beta2) * g * g
                m_hat = m / (1 - cfg.adam_beta1**step)
                v_hat = v / (1 - cfg.adam_beta2**step)
                arr = getattr(params, name)
                arr -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
            m_b2 = cfg.adam_beta1 * m_b2 + (1 - cfg.adam_beta1) * grad.b2
            v_b2 = cfg.adam_beta2 * v_b2 + (1 - cfg.adam_beta2) * grad.b2**2
            params.b2 -= (
                cfg.learning_rate
                * (m_b2 / (1 - cfg.adam_beta1**step))
                / (np.sqrt(v_b2 / (1 - cfg.adam_beta2**step)) + cfg.adam_eps)
            )

    final_loss, _ = mlp_loss_and_grad(params, C, target, l2_over_n)
    if not np.isfinite(final_loss):
        raise NonFiniteLoss(f"training diverged (final loss={final_loss})")
    return params, {"epochs": cfg.max_epochs, "steps": step, "final_loss": final_loss}


def fit_mlp(ds: Dataset, cfg: MlpConfig | None = None, seed: int = 0) -> FirstStepFit:
    """First step via the shallow ReLU network regressed on z; see :func:`train_mlp`."""
    params, diagnostics = train_mlp(ds.C, ds.z, cfg, seed)

    def predict(C_new: np.ndarray) -> np.ndarray:
        return mlp_forward(params, np.asarray(C_new, dtype=np.float64))

    return FirstStepFit(
        method="mlp",
        fitted=mlp_forward(params, ds.C),
        predict=predict,
        diagnostics=diagnostics,
    )


# --- oracle ------------------------------------------------------------------


def oracle(ds: Dataset, values: Sequence[float]) -> FirstStepFit:
    """Pass-through first step with known conditional expectations.

    No predictor is available for new points.
    """
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if values.shape[0] != ds.n:
        raise LengthMismatch(
            f"oracle values have length {values.shape[0]}, dataset has {ds.n} rows"
        )
    return FirstStepFit(method="oracle", fitted=values, predict=None)
