import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from richiv.data import Column, RegressorSpec, make_dataset
from richiv.errors import (
    CollinearControlFunction,
    DimensionMismatch,
    FoldTooSmall,
    PredictUnseenCell,
    Separation,
    SingularMoment,
)
from richiv.estimators import (
    CrossFitPlan,
    assign_folds,
    cells_learner,
    cf_estimate,
    dml_estimate,
    ir_estimate,
    live_estimate,
    live_solve,
    nuisance_learner,
)
from richiv.firststep import fit_cell_means, oracle
from richiv.simulation import SimConfig, gen_dataset


def test_live_solve_with_own_regressors_is_ols():
    rng = np.random.default_rng(0)
    X = np.column_stack([np.ones(200), rng.normal(size=(200, 2))])
    y = X @ np.array([1.0, -2.0, 0.5]) + rng.normal(size=200)
    est = live_solve(X, X, y)
    ols, *_ = np.linalg.lstsq(X, y, rcond=None)
    assert_allclose(est.beta, ols, rtol=1e-10)


def test_live_solve_scalar_case():
    est = live_solve(
        np.array([[1.0], [2.0]]), np.array([[1.0], [1.0]]), np.array([2.0, 3.0])
    )
    assert est.beta[0] == pytest.approx(8 / 3, rel=1e-14)


def test_live_solve_singular_moment():
    q = np.array([[1.0], [-1.0]])
    x = np.array([[1.0], [1.0]])  # q'x = 0
    with pytest.raises(SingularMoment):
        live_solve(q, x, np.array([0.5, 1.5]))


def test_live_solve_rejects_overidentification():
    rng = np.random.default_rng(1)
    with pytest.raises(DimensionMismatch):
        live_solve(rng.normal(size=(50, 3)), rng.normal(size=(50, 2)), rng.normal(size=50))


def test_moment_condition_solved():
    for seed in range(5):
        draw = gen_dataset(SimConfig(d=2, n=400, psi=1.0, seed=seed), 0)
        est = ir_estimate(draw.dataset, oracle(draw.dataset, draw.propensity))
        gap = np.max(np.abs(est.instruments.T @ est.residuals))
        assert gap < 1e-8 * est.diagnostics["moment_scale"]


def test_outcome_scaling():
    draw = gen_dataset(SimConfig(d=1, n=300, psi=1.0, seed=4), 0)
    ds = draw.dataset
    fs = oracle(ds, draw.propensity)
    base = cf_estimate(ds, fs)
    scaled_ds = make_dataset(3.0 * ds.y, ds.t, ds.z, ds.C)
    scaled = cf_estimate(scaled_ds, fs)
    assert_allclose(scaled.beta, 3.0 * base.beta, rtol=1e-10)


def test_constant_zeta_equals_naive_live():
    draw = gen_dataset(SimConfig(d=2, n=500, psi=1.0, seed=5), 0)
    ds = draw.dataset
    fs = oracle(ds, np.full(ds.n, ds.z.mean()))
    assert ir_estimate(ds, fs).alpha == pytest.approx(live_estimate(ds).alpha, abs=1e-10)


# --- saturated equivalence -----------------------------------------------------


def _discrete_dataset(seed, n=2000, levels=4):
    rng = np.random.default_rng(seed)
    lvl = rng.integers(0, levels, n).astype(float)
    pz = np.array([0.3, 0.5, 0.6, 0.8])[lvl.astype(int)]
    z = (rng.random(n) < pz).astype(float)
    t = np.where(z == 1.0, rng.random(n) < 0.75, rng.random(n) < 0.25).astype(float)
    y = 0.8 * t + 0.5 * lvl - 0.1 * lvl**2 + rng.normal(size=n)
    return make_dataset(y, t, z, lvl.reshape(-1, 1))


def _saturated_two_sls(ds, levels=4):
    dummies = np.column_stack(
        [np.ones(ds.n)] + [(ds.C[:, 0] == k).astype(float) for k in range(1, levels)]
    )
    X = np.column_stack([ds.t, dummies])
    Q = np.column_stack([ds.z, dummies])
    return live_solve(Q, X, ds.y, labels=("alpha",) + tuple(f"d{k}" for k in range(levels)))


def test_saturated_equivalence_ir_cf_2sls():
    ds = _discrete_dataset(6)
    fs = fit_cell_means(ds)
    sat = _saturated_two_sls(ds).alpha
    a_ir = ir_estimate(ds, fs).alpha
    a_cf = cf_estimate(ds, fs).alpha
    assert a_ir == pytest.approx(sat, abs=1e-8)
    assert a_cf == pytest.approx(sat, abs=1e-8)
    assert a_ir == pytest.approx(a_cf, abs=1e-8)


def test_ir_with_saturated_dummies_equals_2sls():
    ds = _discrete_dataset(7)
    fs = fit_cell_means(ds)
    dummies = RegressorSpec(
        columns=tuple(
            Column(f"d{k}", (lambda C, k=k: (C[:, 0] == k).astype(float)))
            for k in (1, 2, 3)
        )
    )
    est = ir_estimate(ds, fs, dummies)
    assert est.alpha == pytest.approx(_saturated_two_sls(ds).alpha, abs=1e-8)


def test_residual_orthogonal_to_cell_functions():
    ds = _discrete_dataset(8)
    fs = fit_cell_means(ds)
    r = np.column_stack([np.ones(ds.n), ds.C[:, 0]])
    zstar = ds.z - fs.fitted
    assert np.max(np.abs(zstar @ r)) < 1e-10 * ds.n


def test_collinear_control_function():
    draw = gen_dataset(SimConfig(d=1, n=200, psi=1.0, seed=9), 0)
    ds = draw.dataset
    fs = oracle(ds, 0.2 + 0.1 * ds.C[:, 0])  # exactly linear in (1, c1)
    with pytest.raises(CollinearControlFunction):
        cf_estimate(ds, fs)


def test_psr_separation_when_instrument_constant():
    rng = np.random.default_rng(10)
    n = 60
    ds = make_dataset(rng.normal(size=n), rng.integers(0, 2, n), np.ones(n), rng.normal(size=(n, 1)))
    from richiv.estimators import psr_estimate

    with pytest.raises(Separation):
        psr_estimate(ds)


# --- DML ---------------------------------------------------------------------------


def test_dml_no_plan_is_ir_with_generated_regressors():
    draw = gen_dataset(SimConfig(d=2, n=600, psi=1.0, seed=11), 0)
    ds = draw.dataset
    # fixed, deterministic "learners"
    f_z = lambda C: 0.3 + 0.05 * C[:, 0]
    f_y = lambda C: 1.0 + C.sum(axis=1)
    f_t = lambda C: 0.5 + 0.1 * C[:, 1]
    learners = {
        "z": nuisance_learner(f_z),
        "y": nuisance_learner(f_y),
        "t": nuisance_learner(f_t),
    }
    est = dml_estimate(ds, learners)
    fs = oracle(ds, f_z(ds.C))
    spec = RegressorSpec(columns=(Column("m_y", f_y), Column("m_t", f_t)))
    direct = ir_estimate(ds, fs, spec)
    assert_array_equal(est.beta, direct.beta)


def test_fold_assignment_respects_clusters():
    rng = np.random.default_rng(12)
    for seed in range(5):
        n = 200
        cluster = rng.integers(0, 23, n)
        ds = make_dataset(
            rng.normal(size=n),
            rng.integers(0, 2, n),
            rng.integers(0, 2, n),
            rng.normal(size=(n, 2)),
            cluster=cluster,
        )
        fold_of = assign_folds(ds, 5, np.random.default_rng(seed))
        for g in range(ds.n_clusters):
            members = fold_of[ds.cluster == g]
            assert len(set(members.tolist())) == 1


def test_fold_too_small():
    rng = np.random.default_rng(13)
    n = 8
    ds = make_dataset(
        rng.normal(size=n), rng.integers(0, 2, n), rng.integers(0, 2, n), rng.normal(size=(n, 1))
    )
    with pytest.raises(FoldTooSmall):
        dml_estimate(ds, nuisance_learner(lambda C: np.zeros(C.shape[0])), CrossFitPlan(folds=5, splits=1))


def test_crossfit_median_aggregation_deterministic():
    draw = gen_dataset(SimConfig(d=1, n=300, psi=1.0, seed=14), 0)
    learners = {
        "z": nuisance_learner(lambda C: np.full(C.shape[0], 0.4)),
        "y": nuisance_learner(lambda C: C[:, 0]),
        "t": nuisance_learner(lambda C: 0.5 + 0.1 * C[:, 0] ** 2),
    }
    plan = CrossFitPlan(folds=5, splits=7, seed=3)
    a = dml_estimate(draw.dataset, learners, plan)
    b = dml_estimate(draw.dataset, learners, plan)
    assert_array_equal(a.beta, b.beta)
    alphas = a.diagnostics["split_alphas"]
    assert len(alphas) == 7
    assert a.alpha == pytest.approx(float(np.median(alphas)))


def test_crossfit_surfaces_unseen_cells():
    # one rare cell value confined to a single cluster: any split that holds
    # that cluster out cannot learn the cell, and the failure must surface
    rng = np.random.default_rng(15)
    n = 120
    cluster = np.repeat(np.arange(10), 12)
    lvl = rng.integers(0, 3, n).astype(float)
    lvl[cluster == 0] = 99.0
    ds = make_dataset(
        rng.normal(size=n),
        rng.integers(0, 2, n),
        rng.integers(0, 2, n),
        lvl.reshape(-1, 1),
        cluster=cluster,
    )
    with pytest.raises(PredictUnseenCell):
        dml_estimate(ds, cells_learner(), CrossFitPlan(folds=5, splits=3, seed=0))
