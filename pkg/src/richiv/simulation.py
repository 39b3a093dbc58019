"""Data-generating process, Monte Carlo runner, and summary tables.

The design draws d standard-normal controls whose scaled sum
ct = sum_q c_q / sqrt(d) is itself standard normal, so the joint
distribution of (z, t, y) does not change with d.  The instrument is
Bernoulli with propensity Phi((1-psi) ct + psi ct^2 - psi), potential
treatments are thresholds of a common latent index (no defiers by
construction), and the outcome is exp(1 + a_i t + ct - 0.2 ct^2) plus
standard-normal noise, with a_i depending on the complier type.

Reproducibility: every replication owns the generator seeded by
``SeedSequence((master_seed, rep))``; normals are produced by applying
the inverse CDF to that generator's uniforms (stream-stable under roster
changes), and estimators never consume randomness directly (network
seeds derive from the replication's substream).
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import Dataset, RegressorSpec, make_dataset
from .errors import AllFailed, InvalidConfig, RichIVError
from .estimators import (
    cf_estimate,
    dml_estimate,
    ir_estimate,
    live_estimate,
    mlp_learner,
    nuisance_learner,
    psr_estimate,
)
from .firststep import fit_mlp, fit_nw, oracle
from .inference import cf_variance, ir_variance
from .normal import norm_cdf, norm_ppf

__all__ = [
    "SimConfig",
    "SimDraw",
    "RepResult",
    "SummaryRow",
    "gen_dataset",
    "run_monte_carlo",
    "summarize",
    "true_propensity",
    "true_treatment_mean",
    "true_outcome_mean",
    "ESTIMATORS",
    "DEFAULT_ROSTER",
]

_SQRT2 = np.sqrt(2.0)
# uniform draws of exactly 0.0 would map to -inf under the inverse CDF
_U_FLOOR = np.finfo(np.float64).tiny


@dataclass(frozen=True)
class SimConfig:
    """Simulation design parameters and the master seed."""

    d: int = 1
    n: int = 500
    psi: float = 1.0
    kappa_at: float = 0.25
    kappa_nt: float = 0.25
    alpha_nt: float = -1.0
    alpha_c: float = 0.0
    alpha_at: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.d < 1:
            raise InvalidConfig(f"d must be >= 1, got {self.d}")
        if self.n < 1:
            raise InvalidConfig(f"n must be >= 1, got {self.n}")
        for name, v in (("kappa_at", self.kappa_at), ("kappa_nt", self.kappa_nt)):
            if not 0.0 < v < 1.0:
                raise InvalidConfig(f"{name} must lie in (0, 1), got {v}")
        if self.kappa_at + self.kappa_nt > 1.0:
            raise InvalidConfig(
                f"kappa_at + kappa_nt must be <= 1, got {self.kappa_at + self.kappa_nt}"
            )


@dataclass(frozen=True)
class SimDraw:
    """One generated replication plus the hidden quantities behind it.

    ``complier`` codes each row 0/1/2 for never taker / complier / always
    taker; ``propensity`` is the true E[z|c]; ``cache`` lets estimators
    that share a first step within one replication reuse it.
    """

    dataset: Dataset
    ctilde: np.ndarray
    propensity: np.ndarray
    t0: np.ndarray
    t1: np.ndarray
    complier: np.ndarray
    rep: int
    cfg: SimConfig
    substream_seed: int
    cache: dict = field(default_factory=dict, repr=False, compare=False)


def ctilde_of(C: np.ndarray) -> np.ndarray:
    """The scaled control sum entering the DGP: sum_q c_q / sqrt(d)."""
    C = np.asarray(C, dtype=np.float64)
    return C.sum(axis=1) / np.sqrt(C.shape[1])


def true_propensity(cfg: SimConfig, ctilde: np.ndarray) -> np.ndarray:
    """E[z | c] under the design: Phi((1-psi) ct + psi ct^2 - psi)."""
    ct = np.asarray(ctilde, dtype=np.float64)
    return norm_cdf((1.0 - cfg.psi) * ct + cfg.psi * ct * ct - cfg.psi)


def _p_always(cfg: SimConfig, ct: np.ndarray) -> np.ndarray:
    return norm_cdf(_SQRT2 * norm_ppf(cfg.kappa_at) - ct)


def _p_treated_when_encouraged(cfg: SimConfig, ct: np.ndarray) -> np.ndarray:
    return norm_cdf(_SQRT2 * norm_ppf(1.0 - cfg.kappa_nt) - ct)


def true_treatment_mean(cfg: SimConfig, ctilde: np.ndarray) -> np.ndarray:
    """E[t | c]: mixture of the potential-treatment probabilities over z."""
    ct = np.asarray(ctilde, dtype=np.float64)
    zeta = true_propensity(cfg, ct)
    return (1.0 - zeta) * _p_always(cfg, ct) + zeta * _p_treated_when_encouraged(cfg, ct)


def true_outcome_mean(cfg: SimConfig, ctilde: np.ndarray) -> np.ndarray:
    """E[y | c], integrating the treatment-effect mixture analytically."""
    ct = np.asarray(ctilde, dtype=np.float64)
    zeta = true_propensity(cfg, ct)
    p_at = _p_always(cfg, ct)
    p_nt = 1.0 - _p_treated_when_encouraged(cfg, ct)
    p_c = 1.0 - p_at - p_nt
    effect = (
        p_nt
        + p_at * np.exp(cfg.alpha_at)
        + p_c * ((1.0 - zeta) + zeta * np.exp(cfg.alpha_c))
    )
    return np.exp(1.0 + ct - 0.2 * ct * ct) * effect


def _inverse_cdf_normal(rng: np.random.Generator, size) -> np.ndarray:
    return norm_ppf(np.maximum(rng.random(size), _U_FLOOR))


def gen_dataset(cfg: SimConfig, rep: int) -> SimDraw:
    """Generate replication ``rep`` of the design, deterministic in (seed, rep).

    Draw order is fixed: the n x d uniform block behind the controls, the
    instrument uniforms, the latent treatment shock, then the outcome
    noise.
    """
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, rep)))
    n, d = cfg.n, cfg.d
    C = norm_ppf(np.maximum(rng.random((n, d)), _U_FLOOR))
    u_z = rng.random(n)
    u = _inverse_cdf_normal(rng, n)
    eta = _inverse_cdf_normal(rng, n)

    ct = ctilde_of(C)
    propensity = true_propensity(cfg, ct)
    z = (u_z < propensity).astype(np.float64)
    s = norm_cdf((ct + u) / _SQRT2)
    t0 = (s < cfg.kappa_at).astype(np.float64)
    t1 = (s < 1.0 - cfg.kappa_nt).astype(np.float64)
    t = (1.0 - z) * t0 + z * t1
    complier = (t0 + t1).astype(np.int64)  # 0 NT, 1 complier, 2 AT
    alpha_i = np.choose(complier, [cfg.alpha_nt, cfg.alpha_c, cfg.alpha_at])
    y = np.exp(1.0 + alpha_i * t + ct - 0.2 * ct * ct) + eta

    substream_seed = int(np.random.SeedSequence((cfg.seed, rep, 1)).generate_state(1)[0])
    return SimDraw(
        dataset=make_dataset(y, t, z, C),
        ctilde=ct,
        propensity=propensity,
        t0=t0,
        t1=t1,
        complier=complier,
        rep=rep,
        cfg=cfg,
        substream_seed=substream_seed,
    )


# --- estimator registry -------------------------------------------------------

# Registry entries map a SimDraw to alpha-hat, or to (alpha-hat, se) for
# the *-ci variants that also compute the corrected standard error.

_Z_CRIT_95 = 1.959963984540054


def _cached_nw(draw: SimDraw):
    fs = draw.cache.get("nw")
    if fs is None:
        fs = fit_nw(draw.dataset)
        draw.cache["nw"] = fs
    return fs


def _cached_mlp(draw: SimDraw):
    fs = draw.cache.get("mlp")
    if fs is None:
        fs = fit_mlp(draw.dataset, seed=draw.substream_seed)
        draw.cache["mlp"] = fs
    return fs


def _oracle_fs(draw: SimDraw):
    return oracle(draw.dataset, draw.propensity)


def _oracle_learners(cfg: SimConfig) -> dict:
    def from_truth(fn):
        return nuisance_learner(lambda C, fn=fn: fn(cfg, ctilde_of(C)))

    return {
        "z": from_truth(true_propensity),
        "y": from_truth(true_outcome_mean),
        "t": from_truth(true_treatment_mean),
    }


def _oracle_ir_ci(draw: SimDraw):
    est = ir_estimate(draw.dataset, _oracle_fs(draw))
    return est.alpha, float(ir_variance(est, draw.dataset).se[0])


def _oracle_cf_ci(draw: SimDraw):
    est = cf_estimate(draw.dataset, _oracle_fs(draw))
    return est.alpha, float(cf_variance(est, draw.dataset).se[0])


ESTIMATORS: dict[str, Callable[[SimDraw], float | tuple[float, float]]] = {
    "live": lambda draw: live_estimate(draw.dataset).alpha,
    "psr": lambda draw: psr_estimate(draw.dataset).alpha,
    "oracle-ir": lambda draw: ir_estimate(draw.dataset, _oracle_fs(draw)).alpha,
    "oracle-cf": lambda draw: cf_estimate(draw.dataset, _oracle_fs(draw)).alpha,
    "oracle-ir-nocov": lambda draw: ir_estimate(
        draw.dataset, _oracle_fs(draw), RegressorSpec(columns=())
    ).alpha,
    "nw-ir": lambda draw: ir_estimate(draw.dataset, _cached_nw(draw)).alpha,
    "nw-cf": lambda draw: cf_estimate(draw.dataset, _cached_nw(draw)).alpha,
    "nn-ir": lambda draw: ir_estimate(draw.dataset, _cached_mlp(draw)).alpha,
    "nn-cf": lambda draw: cf_estimate(draw.dataset, _cached_mlp(draw)).alpha,
    "dml-oracle": lambda draw: dml_estimate(
        draw.dataset, _oracle_learners(draw.cfg)
    ).alpha,
    "dml-nn": lambda draw: dml_estimate(
        draw.dataset, mlp_learner(seed=draw.substream_seed)
    ).alpha,
    "oracle-ir-ci": _oracle_ir_ci,
    "oracle-cf-ci": _oracle_cf_ci,
}

DEFAULT_ROSTER = ("live", "psr", "oracle-ir", "oracle-cf", "nw-ir", "nw-cf")


@dataclass(frozen=True)
class RepResult:
    """Outcome of one estimator on one replication."""

    rep: int
    estimator: str
    alpha: float
    status: str  # "ok" or an error code
    se: float | None = None


@dataclass(frozen=True)
class SummaryRow:
    """Median and interquartile range of alpha-hat over the ok replications."""

    estimator: str
    median: float
    iqr: float
    errors: int
    reps: int


RosterEntry = str | tuple[str, Callable[[SimDraw], float]]


def _resolve_roster(roster: Sequence[RosterEntry]) -> list[tuple[str, Callable]]:
    if not roster:
        raise InvalidConfig("estimator roster is empty")
    resolved = []
    for entry in roster:
        if isinstance(entry, str):
            if entry not in ESTIMATORS:
                raise InvalidConfig(
                    f"unknown estimator {entry!r}; known: {sorted(ESTIMATORS)}"
                )
            resolved.append((entry, ESTIMATORS[entry]))
        else:
            tag, fn = entry
            resolved.append((str(tag), fn))
    return resolved


def _run_one(draw: SimDraw, tag: str, fn: Callable) -> RepResult:
    try:
        out = fn(draw)
    except RichIVError as exc:
        return RepResult(rep=draw.rep, estimator=tag, alpha=float("nan"), status=exc.code)
    except np.linalg.LinAlgError:
        return RepResult(rep=draw.rep, estimator=tag, alpha=float("nan"), status="linalg-error")
    if isinstance(out, tuple):
        alpha, se = out
        return RepResult(rep=draw.rep, estimator=tag, alpha=float(alpha), status="ok", se=float(se))
    return RepResult(rep=draw.rep, estimator=tag, alpha=float(out), status="ok")


def _run_rep_block(args) -> list[RepResult]:
    cfg, reps, names = args
    roster = _resolve_roster(names)
    out: list[RepResult] = []
    for rep in reps:
        draw = gen_dataset(cfg, rep)
        for tag, fn in roster:
            out.append(_run_one(draw, tag, fn))
    return out


def run_monte_carlo(
    cfg: SimConfig,
    roster: Sequence[RosterEntry],
    reps: int,
    jobs: int = 1,
) -> list[RepResult]:
    """Run the roster over independent replications.

    Estimator failures are recorded as error rows and never abort the
    run.  Results are deterministic given (cfg, roster, reps) regardless
    of ``jobs``; rows are ordered by replication then roster position.
    """
    resolved = _resolve_roster(roster)
    if jobs > 1 and all(isinstance(entry, str) for entry in roster):
        names = list(roster)
        blocks = [b.tolist() for b in np.array_split(np.arange(reps), jobs * 4) if b.size]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            chunks = list(pool.map(_run_rep_block, [(cfg, b, names) for b in blocks]))
        results = [r for chunk in chunks for r in chunk]
        order = {tag: i for i, (tag, _) in enumerate(resolved)}
        results.sort(key=lambda r: (r.rep, order[r.estimator]))
        return results
    out: list[RepResult] = []
    for rep in range(reps):
        draw = gen_dataset(cfg, rep)
        for tag, fn in resolved:
            out.append(_run_one(draw, tag, fn))
    return out


def summarize(results: Sequence[RepResult]) -> list[SummaryRow]:
    """Median and IQR (type-7 quantiles) per estimator over the ok rows."""
    by_tag: dict[str, list[RepResult]] = {}
    for r in results:
        by_tag.setdefault(r.estimator, []).append(r)
    rows = []
    for tag, rs in by_tag.items():
        ok = np.array([r.alpha for r in rs if r.status == "ok"])
        if ok.size == 0:
            raise AllFailed(f"every replication failed for estimator {tag!r}", estimator=tag)
        q1, med, q3 = np.quantile(ok, [0.25, 0.5, 0.75])  # linear interpolation (type 7)
        rows.append(
            SummaryRow(
                estimator=tag,
                median=float(med),
                iqr=float(q3 - q1),
                errors=len(rs) - ok.size,
                reps=len(rs),
            )
        )
    return rows


def resolve_jobs(requested: int | None) -> int:
    """Worker count: the request (or CPU count), capped by RICHIV_THREADS."""
    jobs = requested if requested and requested > 0 else (os.cpu_count() or 1)
    cap = os.environ.get("RICHIV_THREADS")
    if cap:
        try:
            jobs = min(jobs, max(1, int(cap)))
        except ValueError:
            raise InvalidConfig(f"RICHIV_THREADS must be an integer, got {cap!r}") from None
    return max(1, jobs)
