import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from richiv.data import make_dataset
from richiv.errors import SingleCluster
from richiv.estimators import cf_estimate, ir_estimate, live_estimate
from richiv.firststep import fit_nw, oracle
from richiv.inference import cf_variance, ir_variance, naive_iv_variance
from richiv.normal import norm_cdf
from richiv.simulation import SimConfig, gen_dataset


def _exogenous_dataset(seed, n, slope=1.5):
    """z ~ Bern(Phi(c)), perfect compliance, linear homogeneous outcome."""
    rng = np.random.default_rng(seed)
    c = rng.normal(size=n)
    z = (rng.random(n) < norm_cdf(c)).astype(float)
    t = z
    y = 2.0 + slope * t + 0.8 * c + rng.normal(size=n)
    return make_dataset(y, t, z, c.reshape(-1, 1))


def test_footnote_identity_for_ir_scores():
    draw = gen_dataset(SimConfig(d=1, n=800, psi=1.0, seed=0), 0)
    ds = draw.dataset
    est = ir_estimate(ds, fit_nw(ds))
    v = ir_variance(est, ds)
    Q, eps, m = est.instruments, est.residuals, v.residual_mean
    zstar = Q[:, 0]
    phi_form = Q * eps[:, None]
    phi_form[:, 0] -= zstar * m
    footnote_form = np.column_stack([zstar * (eps - m), Q[:, 1:] * eps[:, None]])
    assert np.max(np.abs(phi_form - footnote_form)) < 1e-12
    # and the returned covariance is the sandwich of exactly these scores
    n = ds.n
    G = Q.T @ est.regressors / n
    Ginv = np.linalg.solve(G, np.eye(G.shape[0]))
    cov = Ginv @ (phi_form.T @ phi_form / n) @ Ginv.T
    assert_allclose(v.cov, 0.5 * (cov + cov.T), rtol=1e-12)


def test_zero_residual_mean_switch_reduces_to_naive():
    draw = gen_dataset(SimConfig(d=1, n=500, psi=1.0, seed=1), 0)
    ds = draw.dataset
    est = ir_estimate(ds, oracle(ds, draw.propensity))
    corrected = ir_variance(est, ds, zero_residual_mean=True)
    naive = naive_iv_variance(est)
    assert_allclose(corrected.cov / ds.n, naive.cov, rtol=1e-10)
    assert_allclose(corrected.se, naive.se, rtol=1e-10)


def test_corrected_matches_naive_when_residual_mean_is_zero():
    # E[eps|c] = 0 by construction, so the correction vanishes asymptotically
    ds = _exogenous_dataset(2, 8000)
    est = ir_estimate(ds, fit_nw(ds))
    corrected = ir_variance(est, ds)
    naive = naive_iv_variance(est)
    assert corrected.se[0] == pytest.approx(naive.se[0], rel=0.10)


def test_cf_corrected_matches_naive_when_phi_is_zero():
    ds = _exogenous_dataset(3, 8000)
    est = cf_estimate(ds, fit_nw(ds))
    assert abs(est.phi) < 0.25  # pseudo-true phi is 0 here
    corrected = cf_variance(est, ds)
    naive = naive_iv_variance(est)
    assert corrected.se[0] == pytest.approx(naive.se[0], rel=0.10)


def test_duplication_scales_corrected_se():
    draw = gen_dataset(SimConfig(d=1, n=1500, psi=1.0, seed=4), 0)
    ds = draw.dataset
    est = ir_estimate(ds, oracle(ds, draw.propensity))
    se1 = ir_variance(est, ds).se

    idx = np.repeat(np.arange(ds.n), 2)
    ds2 = make_dataset(ds.y[idx], ds.t[idx], ds.z[idx], ds.C[idx])
    est2 = ir_estimate(ds2, oracle(ds2, draw.propensity[idx]))
    assert_allclose(est2.beta, est.beta, rtol=1e-10)
    se2 = ir_variance(est2, ds2).se
    assert_allclose(se2 / se1, 1 / np.sqrt(2), rtol=0.05)


def test_cf_covariance_symmetric_psd_over_replications():
    for rep in range(100):
        draw = gen_dataset(SimConfig(d=1, n=400, psi=1.0, seed=100), rep)
        ds = draw.dataset
        est = cf_estimate(ds, oracle(ds, draw.propensity))
        cov = cf_variance(est, ds).cov
        assert_array_equal(cov, cov.T)
        eig = np.linalg.eigvalsh(cov)
        assert eig[0] >= -1e-8 * eig[-1]


def test_hc0_close_to_classical_ols_se():
    ds = _exogenous_dataset(5, 8000)
    ds = make_dataset(ds.y, ds.t, ds.t, ds.C)  # instrument the treatment with itself
    est = live_estimate(ds)
    hc0 = naive_iv_variance(est)
    X = est.regressors
    resid = est.residuals
    sigma2 = resid @ resid / (ds.n - X.shape[1])
    classical = np.sqrt(np.diag(sigma2 * np.linalg.inv(X.T @ X)))
    assert_allclose(hc0.se, classical, rtol=0.10)


def test_singleton_clusters_equal_hc0():
    draw = gen_dataset(SimConfig(d=2, n=300, psi=1.0, seed=6), 0)
    est = live_estimate(draw.dataset)
    hc0 = naive_iv_variance(est)
    cr0 = naive_iv_variance(est, cluster=np.arange(300))
    assert_array_equal(cr0.cov, hc0.cov)


def test_single_cluster_rejected():
    draw = gen_dataset(SimConfig(d=1, n=100, psi=1.0, seed=7), 0)
    est = live_estimate(draw.dataset)
    with pytest.raises(SingleCluster):
        naive_iv_variance(est, cluster=np.zeros(100, dtype=int))


def test_cluster_robust_variance_differs_under_real_clustering():
    rng = np.random.default_rng(8)
    n, G = 600, 30
    cluster = np.repeat(np.arange(G), n // G)
    shock = rng.normal(size=G)[cluster]
    c = rng.normal(size=n)
    z = (rng.random(n) < 0.5).astype(float)
    t = np.where(z == 1.0, rng.random(n) < 0.8, rng.random(n) < 0.2).astype(float)
    y = 1.0 + 0.5 * t + c + 2.0 * shock + rng.normal(size=n)
    ds = make_dataset(y, t, z, c.reshape(-1, 1), cluster=cluster)
    est = live_estimate(ds)
    cr0 = naive_iv_variance(est, cluster=ds.cluster)
    hc0 = naive_iv_variance(est)
    assert cr0.se[0] > hc0.se[0]  # positive intra-cluster correlation inflates SEs


def test_corrected_variance_warns_on_clustered_data():
    rng = np.random.default_rng(9)
    n = 200
    ds = make_dataset(
        rng.normal(size=n),
        rng.integers(0, 2, n),
        rng.integers(0, 2, n),
        rng.normal(size=(n, 1)),
        cluster=rng.integers(0, 5, n),
    )
    est = ir_estimate(ds, oracle(ds, np.full(n, 0.5)))
    with pytest.warns(UserWarning):
        ir_variance(est, ds, zero_residual_mean=True)


def test_corrected_se_uses_asymptotic_scaling():
    draw = gen_dataset(SimConfig(d=1, n=700, psi=1.0, seed=10), 0)
    ds = draw.dataset
    est = ir_estimate(ds, oracle(ds, draw.propensity))
    v = ir_variance(est, ds)
    assert_allclose(v.se, np.sqrt(np.diag(v.cov) / ds.n), rtol=1e-14)
