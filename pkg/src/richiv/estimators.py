"""Second-step linear IV solver and the five estimator assemblies.

All estimators reduce to one just-identified linear solve of
Q'X beta = Q'y through :func:`live_solve`; they differ only in how the
instrument matrix Q and regressor matrix X are assembled from the data
and the first-step fit:

=====================  ==========================  ==========================
assembly               regressors X                instruments Q
=====================  ==========================  ==========================
naive LIVE             (t, r)                      (z, r)
instrument residual    (t, r)                      (z - zeta_hat, r)
control function       (t, r, zeta_hat)            (z, r, zeta_hat)
PSR                    (t, 1)                      (z - zeta_probit, 1)
DML style              (t, 1, m_y, m_t)            (z - m_z, 1, m_y, m_t)
=====================  ==========================  ==========================
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .data import Column, Dataset, RegressorSpec, build_regressors
from .errors import (
    CollinearControlFunction,
    DegenerateDenominator,
    DimensionMismatch,
    FoldTooSmall,
    LengthMismatch,
    PredictUnseenCell,
    SingularMoment,
)
from .firststep import (
    FirstStepFit,
    MlpConfig,
    auto_kernel_order,
    fit_probit,
    mlp_forward,
    oracle,
    train_mlp,
)
from .kernels import BandwidthRule, NwFit, bandwidths, make_epanechnikov, nw_predict

__all__ = [
    "IVEstimate",
    "CrossFitPlan",
    "live_solve",
    "live_estimate",
    "ir_estimate",
    "cf_estimate",
    "psr_estimate",
    "dml_estimate",
    "nuisance_learner",
    "nw_learner",
    "mlp_learner",
    "cells_learner",
]

# Reciprocal condition number of Q'X below which the moment system is
# treated as singular (weak or invalid instrument configuration).
RCOND_TOL = 1e-12

# Relative residual norm below which zeta-hat counts as lying in the span
# of the included regressors.
COLLINEAR_TOL = 1e-10


@dataclass(frozen=True)
class IVEstimate:
    """Solved IV moment condition with role-labelled coefficients.

    ``labels`` aligns with ``beta`` and the columns of ``regressors``;
    the coefficient on the treatment is labelled ``alpha`` and, for the
    control-function assembly, the coefficient on zeta-hat is ``phi``.
    Cross-fit aggregates carry only ``beta``/``labels`` (matrix fields are
    None) because no single moment system produced them.
    """

    beta: np.ndarray
    labels: tuple[str, ...]
    method: str
    residuals: np.ndarray | None
    instruments: np.ndarray | None
    regressors: np.ndarray | None
    zeta: np.ndarray | None
    rcond: float
    first_step: FirstStepFit | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def alpha(self) -> float:
        return float(self.beta[self.labels.index("alpha")])

    @property
    def phi(self) -> float:
        return float(self.beta[self.labels.index("phi")])

    def coef(self, label: str) -> float:
        return float(self.beta[self.labels.index(label)])


def live_solve(
    Q: np.ndarray,
    X: np.ndarray,
    y: np.ndarray,
    labels: Sequence[str] | None = None,
    method: str = "live",
) -> IVEstimate:
    """Solve the just-identified sample moment condition Q'(y - X beta) = 0.

    The solve goes through a rank-revealing SVD of Q'X; a reciprocal
    condition number below 1e-12 raises :class:`SingularMoment`.
    """
    Q = np.asarray(Q, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if Q.shape != X.shape:
        raise DimensionMismatch(
            f"instruments {Q.shape} and regressors {X.shape} must have identical shape "
            "(just-identified model)"
        )
    n, p = X.shape
    if p > n:
        raise DimensionMismatch(f"more parameters ({p}) than observations ({n})")
    A = Q.T @ X
    b = Q.T @ y
    U, s, Vt = np.linalg.svd(A)
    rcond = float(s[-1] / s[0]) if s[0] > 0 else 0.0
    if rcond < RCOND_TOL:
        raise SingularMoment(
            f"Q'X is numerically singular (rcond={rcond:.3e}); "
            "check instrument relevance and regressor collinearity",
            rcond=rcond,
        )
    beta = Vt.T @ ((U.T @ b) / s)
    residuals = y - X @ beta
    gap = float(np.max(np.abs(Q.T @ residuals)))
    if labels is None:
        labels = tuple(f"b{j}" for j in range(p))
    return IVEstimate(
        beta=beta,
        labels=tuple(labels),
        method=method,
        residuals=residuals,
        instruments=Q,
        regressors=X,
        zeta=None,
        rcond=rcond,
        diagnostics={"moment_gap": gap, "moment_scale": 1.0 + float(np.max(np.abs(b)))},
    )


def _check_first_step(ds: Dataset, fs: FirstStepFit) -> None:
    if fs.fitted.shape[0] != ds.n:
        raise LengthMismatch(
            f"first-step fitted values have length {fs.fitted.shape[0]}, dataset has {ds.n}"
        )
    rows = fs.diagnostics.get("degenerate_rows")
    if rows:
        raise DegenerateDenominator(
            f"first step flagged {len(rows)} observation(s) as degenerate: {rows[:10]}; "
            "silently dropping them would change the estimand",
            rows=rows,
        )


def live_estimate(ds: Dataset, spec: RegressorSpec | None = None) -> IVEstimate:
    """Naive LIVE: instrument the treatment with z itself."""
    spec = spec or RegressorSpec()
    r = build_regressors(ds, spec)
    labels = ("alpha",) + spec.labels(ds.d)
    X = np.column_stack([ds.t, r])
    Q = np.column_stack([ds.z, r])
    return live_solve(Q, X, ds.y, labels, method="live")


def ir_estimate(ds: Dataset, fs: FirstStepFit, spec: RegressorSpec | None = None) -> IVEstimate:
    """Instrument-residual estimator: instrument the treatment with z - zeta_hat."""
    _check_first_step(ds, fs)
    spec = spec or RegressorSpec()
    r = build_regressors(ds, spec)
    labels = ("alpha",) + spec.labels(ds.d)
    X = np.column_stack([ds.t, r])
    Q = np.column_stack([ds.z - fs.fitted, r])
    est = live_solve(Q, X, ds.y, labels, method="ir")
    return dataclasses.replace(est, zeta=fs.fitted, first_step=fs)


def cf_estimate(ds: Dataset, fs: FirstStepFit, spec: RegressorSpec | None = None) -> IVEstimate:
    """Control-function estimator: add zeta_hat to the regressors and instrument with z."""
    _check_first_step(ds, fs)
    spec = spec or RegressorSpec()
    r = build_regressors(ds, spec)
    zeta = fs.fitted
    # zeta_hat inside the span of r makes the extended equation unidentified;
    # report it distinctly from a generic singular moment matrix.
    if r.shape[1] > 0:
        coef, *_ = np.linalg.lstsq(r, zeta, rcond=None)
        resid_norm = float(np.linalg.norm(zeta - r @ coef))
    else:
        resid_norm = float(np.linalg.norm(zeta))
    if resid_norm <= COLLINEAR_TOL * float(np.linalg.norm(zeta)):
        raise CollinearControlFunction(
            "zeta_hat lies in the span of the included regressors "
            f"(relative residual {resid_norm:.3e}); drop it or change the regressor spec"
        )
    labels = ("alpha",) + spec.labels(ds.d) + ("phi",)
    X = np.column_stack([ds.t, r, zeta])
    Q = np.column_stack([ds.z, r, zeta])
    est = live_solve(Q, X, ds.y, labels, method="cf")
    return dataclasses.replace(est, zeta=zeta, first_step=fs)


def psr_estimate(ds: Dataset) -> IVEstimate:
    """Probit-score-residual estimator: probit first step, no covariates in the equation."""
    _, fs = fit_probit(ds)
    est = ir_estimate(ds, fs, RegressorSpec(columns=()))
    return dataclasses.replace(est, method="psr")


# --- DML-style estimator -----------------------------------------------------

# A nuisance learner maps training data (C, target) to a predictor for new
# covariate matrices.
NuisanceLearner = Callable[[np.ndarray, np.ndarray], Callable[[np.ndarray], np.ndarray]]


def nuisance_learner(fn: Callable[[np.ndarray], np.ndarray]) -> NuisanceLearner:
    """Wrap a fixed function of the covariates as a (training-free) learner."""

    def learner(C_train: np.ndarray, target: np.ndarray) -> Callable[[np.ndarray], np.ndarray]:
        return lambda C_new: np.asarray(fn(np.asarray(C_new, dtype=np.float64)), dtype=np.float64)

    return learner


def nw_learner(order: int | None = None, rule: BandwidthRule | None = None) -> NuisanceLearner:
    """Nadaraya-Watson nuisance learner (auto kernel order unless given)."""

    def learner(C_train: np.ndarray, target: np.ndarray) -> Callable[[np.ndarray], np.ndarray]:
        C_train = np.asarray(C_train, dtype=np.float64)
        kernel = make_epanechnikov(order or auto_kernel_order(C_train.shape[1]))
        fit = NwFit(C=C_train, values=np.asarray(target, dtype=np.float64),
                    kernel=kernel, h=bandwidths(C_train, rule))

        def predict(C_new: np.ndarray) -> np.ndarray:
            vals, bad = nw_predict(fit, C_new)
            if bad.any():
                raise DegenerateDenominator(
                    f"kernel denominator degenerate at {int(bad.sum())} prediction row(s)",
                    rows=np.flatnonzero(bad).tolist(),
                )
            return vals

        return predict

    return learner


def mlp_learner(cfg: MlpConfig | None = None, seed: int = 0) -> NuisanceLearner:
    """Shallow ReLU network nuisance learner."""

    def learner(C_train: np.ndarray, target: np.ndarray) -> Callable[[np.ndarray], np.ndarray]:
        params, _ = train_mlp(C_train, target, cfg, seed)
        return lambda C_new: mlp_forward(params, np.asarray(C_new, dtype=np.float64))

    return learner


def cells_learner(key: Sequence[int] | None = None) -> NuisanceLearner:
    """Cell-means nuisance learner on discrete covariate columns.

    Predicting a cell unseen in the training fold raises
    :class:`PredictUnseenCell` rather than imputing, deliberately
    surfacing the sparse-dummy failure mode of cross-fitting.
    """

    def learner(C_train: np.ndarray, target: np.ndarray) -> Callable[[np.ndarray], np.ndarray]:
        C_train = np.asarray(C_train, dtype=np.float64)
        cols = tuple(range(C_train.shape[1])) if key is None else tuple(key)
        cells, inverse = np.unique(C_train[:, cols], axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        means = np.bincount(inverse, weights=np.asarray(target, dtype=np.float64))
        means = means / np.bincount(inverse)
        lookup = {tuple(cells[i].tolist()): float(means[i]) for i in range(cells.shape[0])}

        def predict(C_new: np.ndarray) -> np.ndarray:
            rows = np.asarray(C_new, dtype=np.float64)[:, cols]
            out = np.empty(rows.shape[0])
            for i in range(rows.shape[0]):
                cell = tuple(rows[i].tolist())
                if cell not in lookup:
                    raise PredictUnseenCell(
                        f"covariate cell {cell} was not observed in the training fold",
                        cell=cell,
                    )
                out[i] = lookup[cell]
            return out

        return predict

    return learner


@dataclass(frozen=True)
class CrossFitPlan:
    """Cross-fitting layout: folds per split, number of splits, seed.

    Folds are formed by cluster id when the dataset has clusters (whole
    clusters stay together) and by observation otherwise.  Per-split
    estimates are aggregated by the median over splits.
    """

    folds: int = 5
    splits: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.folds < 2:
            raise ValueError("need at least 2 folds")
        if self.splits < 1:
            raise ValueError("need at least 1 split")


def assign_folds(ds: Dataset, folds: int, rng: np.random.Generator) -> np.ndarray:
    """Random fold id per observation; whole clusters stay in one fold when present."""
    if ds.cluster is not None:
        n_groups = ds.n_clusters
        group_fold = np.empty(n_groups, dtype=np.int64)
        for f, piece in enumerate(np.array_split(rng.permutation(n_groups), folds)):
            group_fold[piece] = f
        return group_fold[ds.cluster]
    fold_of = np.empty(ds.n, dtype=np.int64)
    for f, piece in enumerate(np.array_split(rng.permutation(ds.n), folds)):
        fold_of[piece] = f
    return fold_of


_DML_LABELS = ("alpha", "const", "m_y", "m_t")


def _normalize_learners(
    learner: NuisanceLearner | Mapping[str, NuisanceLearner],
) -> dict[str, NuisanceLearner]:
    if isinstance(learner, Mapping):
        missing = {"z", "y", "t"} - set(learner)
        if missing:
            raise LengthMismatch(f"learner mapping is missing nuisances: {sorted(missing)}")
        return dict(learner)
    return {"z": learner, "y": learner, "t": learner}


def dml_estimate(
    ds: Dataset,
    learner: NuisanceLearner | Mapping[str, NuisanceLearner],
    plan: CrossFitPlan | None = None,
) -> IVEstimate:
    """DML-style estimator of the partially linear IV model.

    Without a plan this is, definitionally, the instrument-residual
    estimator with generated regressors: each nuisance (E[z|c], E[y|c],
    E[t|c]) is fit once on the full sample and the fitted means of y and t
    are the only non-intercept regressors.  With a plan, out-of-fold
    nuisance predictions feed the same score in every split and the
    per-split coefficients are aggregated by their median.
    """
    learners = _normalize_learners(learner)
    if plan is None:
        predict_z = learners["z"](ds.C, ds.z)
        predict_y = learners["y"](ds.C, ds.y)
        predict_t = learners["t"](ds.C, ds.t)
        fs = FirstStepFit(
            method="dml-nuisance", fitted=predict_z(ds.C), predict=predict_z
        )
        spec = RegressorSpec(
            columns=(Column("m_y", predict_y), Column("m_t", predict_t))
        )
        est = ir_estimate(ds, fs, spec)
        return dataclasses.replace(est, method="dml")

    p = len(_DML_LABELS)
    betas = []
    for split in range(plan.splits):
        rng = np.random.default_rng(np.random.SeedSequence((plan.seed, split)))
        fold_of = assign_folds(ds, plan.folds, rng)
        sizes = np.bincount(fold_of, minlength=plan.folds)
        if (sizes < p).any():
            raise FoldTooSmall(
                f"split {split}: fold sizes {sizes.tolist()} fall below {p} observations",
                sizes=sizes.tolist(),
            )
        m_z = np.empty(ds.n)
        m_y = np.empty(ds.n)
        m_t = np.empty(ds.n)
        for f in range(plan.folds):
            held = fold_of == f
            train = ~held
            C_tr, C_te = ds.C[train], ds.C[held]
            m_z[held] = learners["z"](C_tr, ds.z[train])(C_te)
            m_y[held] = learners["y"](C_tr, ds.y[train])(C_te)
            m_t[held] = learners["t"](C_tr, ds.t[train])(C_te)
        ones = np.ones(ds.n)
        X = np.column_stack([ds.t, ones, m_y, m_t])
        Q = np.column_stack([ds.z - m_z, ones, m_y, m_t])
        est = live_solve(Q, X, ds.y, _DML_LABELS, method="dml")
        betas.append(est.beta)
    stacked = np.vstack(betas)  # splits are already ordered by index
    return IVEstimate(
        beta=np.median(stacked, axis=0),
        labels=_DML_LABELS,
        method="dml-crossfit",
        residuals=None,
        instruments=None,
        regressors=None,
        zeta=None,
        rcond=float("nan"),
        diagnostics={
            "split_alphas": stacked[:, 0].tolist(),
            "splits": plan.splits,
            "folds": plan.folds,
        },
    )
