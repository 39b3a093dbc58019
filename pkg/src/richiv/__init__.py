"""Semiparametric linear IV estimation with a nonparametric first step.

The package estimates the causal effect of a binary treatment using a
binary instrument whose conditional expectation given the covariates is
estimated nonparametrically, so the included controls do not need to
make that expectation linear.  Two second steps are provided (instrument
residual and control function) together with corrected standard errors,
comparison estimators (naive LIVE, PSR, DML style), and a Monte Carlo
harness.
"""

from .data import (
    Column,
    ComplierType,
    Dataset,
    RegressorSpec,
    build_regressors,
    read_csv,
    to_table,
    validate,
    write_csv,
)
from .errors import RichIVError
from .estimators import (
    CrossFitPlan,
    IVEstimate,
    cells_learner,
    cf_estimate,
    dml_estimate,
    ir_estimate,
    live_estimate,
    live_solve,
    mlp_learner,
    nuisance_learner,
    nw_learner,
    psr_estimate,
)
from .firststep import (
    FirstStepFit,
    MlpConfig,
    ProbitFit,
    fit_cell_means,
    fit_mlp,
    fit_nw,
    fit_probit,
    oracle,
)
from .inference import VarianceEstimate, cf_variance, ir_variance, naive_iv_variance
from .kernels import (
    BandwidthRule,
    HigherOrderKernel,
    NwFit,
    bandwidths,
    kernel_eval,
    make_epanechnikov,
    nw_predict,
)
from .simulation import (
    ESTIMATORS,
    RepResult,
    SimConfig,
    SimDraw,
    SummaryRow,
    gen_dataset,
    run_monte_carlo,
    summarize,
)

__version__ = "0.1.0"

__all__ = [
    "BandwidthRule",
    "Column",
    "ComplierType",
    "CrossFitPlan",
    "Dataset",
    "ESTIMATORS",
    "FirstStepFit",
    "HigherOrderKernel",
    "IVEstimate",
    "MlpConfig",
    "NwFit",
    "ProbitFit",
    "RegressorSpec",
    "RepResult",
    "RichIVError",
    "SimConfig",
    "SimDraw",
    "SummaryRow",
    "VarianceEstimate",
    "bandwidths",
    "build_regressors",
    "cells_learner",
    "cf_estimate",
    "cf_variance",
    "dml_estimate",
    "fit_cell_means",
    "fit_mlp",
    "fit_nw",
    "fit_probit",
    "gen_dataset",
    "ir_estimate",
    "ir_variance",
    "kernel_eval",
    "live_estimate",
    "live_solve",
    "make_epanechnikov",
    "mlp_learner",
    "naive_iv_variance",
    "nuisance_learner",
    "nw_learner",
    "nw_predict",
    "oracle",
    "psr_estimate",
    "read_csv",
    "run_monte_carlo",
    "summarize",
    "to_table",
    "validate",
    "write_csv",
]
