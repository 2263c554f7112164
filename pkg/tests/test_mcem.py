import numpy as np
import pytest

from mcem_ssm import kernels
from mcem_ssm.dgp import DGPConfig, simulate_dgp
from mcem_ssm.errors import ConfigError, DataError
from mcem_ssm.mcem import (
    GibbsState,
    MCEMConfig,
    MomentAccumulator,
    credible_intervals,
    e_step,
    m_step,
    q_function,
    run_mcem,
    _obs1_lag_slots,
)
from mcem_ssm.model import ModelSpec, Theta, TimeSeriesDataset, build_design
from mcem_ssm.ssm import complete_data_loglik

from oracles import JointGaussian, full_conditional_missing, m_step_oracle, ols


def small_state(seed=0, T=14, missing=(3, 6, 7, 11), roles=None):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal(T)
    y = 1.0 + np.cumsum(rng.standard_normal(T)) * 0.3 + 0.5 * a
    y[list(missing)] = np.nan
    ds = TimeSeriesDataset(y, exposures={"a": a})
    spec = ModelSpec(q=1, p=1, exposures=("a",), roles=roles or {"intercept": "random-walk"})
    return GibbsState.initial(ds, spec), rng


def random_theta(state, rng):
    d = state.design.d
    free = state.design.free
    return Theta(rng.standard_normal(d), np.eye(d) * 2.0, np.diag(np.where(free, 0.2, 0.0)), 0.3)


def manual_draws(state, theta, rng, M=25):
    """Gibbs-like draws: a random path, then missing outcomes drawn given it."""
    X = state.design.X
    n, d = X.shape
    free = state.design.free
    acc = MomentAccumulator(n, d, state.obs1_rows, _obs1_lag_slots(state))
    paths, designs = [], []
    for _ in range(M):
        path = np.empty((n + 1, d))
        path[0] = rng.standard_normal(d)
        for i in range(1, n + 1):
            path[i] = path[i - 1] + np.where(free, rng.standard_normal(d) * 0.3, 0.0)
        kernels.draw_missing(X, state.y, path, theta.R, state.mis_rows, state.design.lag_cols, state.spec.q,
                             rng.standard_normal(state.mis_rows.size), True)
        acc.add(path, X)
        paths.append(path)
        designs.append(X.copy())
    return acc, paths, designs


def test_config_defaults_are_the_documented_schedule():
    cfg = MCEMConfig()
    assert (cfg.m_initial, cfg.m_growth_factor, cfg.m_max, cfg.burn_in) == (50, 1.3, 2000, 20)
    assert (cfg.tol_loglik, cfg.tol_params, cfg.consecutive_passes) == (1e-4, 1e-3, 3)
    assert cfg.draws(0) == 50 and cfg.draws(1) == 65 and cfg.draws(100) == 2000


@pytest.mark.parametrize("kw", [dict(m_initial=5), dict(m_growth_factor=0.9), dict(tol_loglik=0.0),
                                dict(m_max=10, m_initial=20), dict(sampler="other"), dict(level=1.0)])
def test_config_rejects_invalid_values(kw):
    with pytest.raises(ConfigError):
        MCEMConfig(**kw)


def test_partition_drives_exactness():
    state, _ = small_state()
    assert not state.exact
    # missing at t = 4, 7, 8, 12; observed t = 5, 9, 13 use them as lags; row = t - 2
    assert set(state.obs1_rows.tolist()) == {3, 7, 11}
    tail, _ = small_state(missing=(12, 13))
    assert tail.exact


@pytest.mark.parametrize("seed", range(5))
def test_m_step_matches_per_draw_average(seed):
    state, rng = small_state(seed)
    theta = random_theta(state, rng)
    acc, paths, designs = manual_draws(state, theta, rng)
    got = m_step(acc, state)
    mu0, sigma0, Q, R = m_step_oracle(paths, designs, state.y_rows, state.observed, state.design.free)
    np.testing.assert_allclose(got.mu0, mu0, atol=1e-10)
    np.testing.assert_allclose(got.sigma0, sigma0, atol=1e-10)
    np.testing.assert_allclose(got.Q, Q, atol=1e-10)
    assert got.R == pytest.approx(R, rel=1e-10)


@pytest.mark.parametrize("seed", range(5))
def test_q_function_is_mean_complete_loglik(seed):
    state, rng = small_state(seed)
    theta = random_theta(state, rng)
    acc, paths, designs = manual_draws(state, theta, rng)
    ref = np.mean([complete_data_loglik(theta, p, X, state.y_rows, state.observed) for p, X in zip(paths, designs)])
    assert q_function(theta, acc, state) == pytest.approx(ref, rel=1e-10, abs=1e-8)


def test_m_step_maximizes_q_function():
    state, rng = small_state(1)
    theta = random_theta(state, rng)
    acc, _, _ = manual_draws(state, theta, rng, M=40)
    best = m_step(acc, state)
    q_best = q_function(best, acc, state)
    for _ in range(20):
        eps = rng.standard_normal(best.d) * 0.05
        alt = Theta(best.mu0 + eps, best.sigma0, best.Q * np.exp(rng.normal(0, 0.1)), best.R * np.exp(rng.normal(0, 0.1)))
        assert q_function(alt, acc, state) <= q_best + 1e-9


def test_exact_e_step_matches_joint_conditioning():
    state, rng = small_state(2, missing=(11, 12, 13))
    assert state.exact
    theta = random_theta(state, rng)
    res = e_step(theta, state, 10, rng)
    jg = JointGaussian(state.design.X, theta.mu0, theta.sigma0, theta.Q, theta.R)
    mean, cov = jg.smoothed(state.y_rows, state.observed)
    for i in range(state.n + 1):
        s = jg.state(i)
        np.testing.assert_allclose(res.acc.theta_tilde[i], mean[s], atol=1e-8)
        np.testing.assert_allclose(res.acc.P_tilde[i], cov[np.ix_(s, s)], atol=1e-8)
    for i in range(1, state.n + 1):
        np.testing.assert_allclose(res.acc.P_lag_tilde[i], cov[np.ix_(jg.state(i), jg.state(i - 1))], atol=1e-8)


def test_draw_missing_full_conditional_moments():
    state, rng = small_state(4, missing=(5,))
    theta = random_theta(state, rng)
    X = state.design.X
    n, d = X.shape
    path = np.cumsum(rng.standard_normal((n + 1, d)) * 0.2, axis=0) + 1.0
    row = int(state.mis_rows[0])
    y = state.y
    mean, var = full_conditional_missing(path, X, y[1:], row, {1: int(state.design.lag_cols[0])}, 1, theta.R)
    N = 5000
    draws = np.empty(N)
    z = rng.standard_normal((N, 1))
    for m in range(N):
        kernels.draw_missing(X, y, path, theta.R, state.mis_rows, state.design.lag_cols, 1, z[m], True)
        draws[m] = y[1 + row]
        assert X[row + 1, state.design.lag_cols[0]] == draws[m]
    assert abs(draws.mean() - mean) < 4 * np.sqrt(var / N)
    assert abs(draws.var() - var) < 4 * var * np.sqrt(2.0 / N)


def test_credible_intervals_contain_point_estimates():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((500, 3)) + np.array([1.0, -2.0, 0.0])
    lo, hi = credible_intervals(x)
    assert np.all(lo < x.mean(axis=0)) and np.all(x.mean(axis=0) < hi)


def test_all_missing_outcome_is_data_error():
    ds = TimeSeriesDataset(np.full(10, np.nan))
    with pytest.raises(DataError):
        run_mcem(ds, ModelSpec(q=1))


def complete_stationary(T=400, seed=0):
    ds, _ = simulate_dgp(DGPConfig(T=T), np.random.default_rng(seed))
    return ds, DGPConfig().model_spec()


def test_complete_data_fixed_point_is_ols():
    ds, spec = complete_stationary()
    res = run_mcem(ds, spec, MCEMConfig(seed=1))
    design = build_design(ds, spec)
    beta, _, sigma2 = ols(design.X, ds.y[design.times - 1])
    est = np.array([res.estimates[nm] for nm in design.names])
    np.testing.assert_allclose(est, beta, atol=1e-3)
    assert res.theta.R == pytest.approx(sigma2, rel=0.05)
    assert res.extra["exact"]
    assert len(res.trace) <= MCEMConfig().max_outer_iterations
    for nm, (lo, hi) in res.intervals.items():
        assert lo <= res.estimates[nm] <= hi


def test_same_seed_same_result():
    ds, spec = complete_stationary(T=200, seed=3)
    y = ds.y.copy()
    y[np.random.default_rng(0).random(200) < 0.3] = np.nan
    ds = ds.with_outcome(y)
    cfg = MCEMConfig(seed=11, max_outer_iterations=4)
    a, b = run_mcem(ds, spec, cfg), run_mcem(ds, spec, cfg)
    assert a.estimates == b.estimates
    assert a.theta.R == b.theta.R
    assert a.trace == b.trace


def test_missing_data_fit_recovers_lag_exposure_coefficient():
    ds, spec = complete_stationary(T=600, seed=5)
    y = ds.y.copy()
    y[np.random.default_rng(1).random(600) < 0.4] = np.nan
    res = run_mcem(ds.with_outcome(y), spec, MCEMConfig(seed=2))
    assert not res.extra["exact"]
    assert abs(res.estimates["a_lag1"] + 0.5) < 0.1
    lo, hi = res.intervals["a_lag1"]
    assert lo < res.estimates["a_lag1"] < hi
    assert np.all(np.isfinite(res.y_imputed))
    np.testing.assert_array_equal(res.y_imputed[~np.isnan(y)], y[~np.isnan(y)])
