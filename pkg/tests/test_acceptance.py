"""Acceptance criteria at full scale. Each test records one PASS/FAIL line.

Slow: the stationary and nonstationary grids take most of an hour on one CPU.
"""

import os
import time
from pathlib import Path

import numpy as np
import pytest
import yaml

from mcem_ssm import kernels
from mcem_ssm.cli import _make, resolve_config, run, strategy_config
from mcem_ssm.dgp import DGPConfig, simulate_dgp
from mcem_ssm.mcem import MCEMConfig, run_mcem
from mcem_ssm.missingness import MechanismConfig, generate_mask
from mcem_ssm.model import Theta, build_design
from mcem_ssm.simulator import run_scenario
from mcem_ssm.ssm import kalman_filter, kalman_smoother

from oracles import JointGaussian, ols, random_instance

pytestmark = pytest.mark.acceptance

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
SINGLE = ("mean", "locf", "linear", "spline", "arima")
RECOVERING = ("mcem-ssm", "cc", "mp")
STATIC_SLOPES = ("a", "a_lag1", "c")


def cpu_seconds():
    t = os.times()
    return t.user + t.system + t.children_user + t.children_system


class Timed:
    def __enter__(self):
        self.wall, self.cpu = time.perf_counter(), cpu_seconds()
        return self

    def __exit__(self, *exc):
        self.wall = time.perf_counter() - self.wall
        self.cpu = cpu_seconds() - self.cpu


def benchmark_setup(name):
    cfg = resolve_config("benchmark", yaml.safe_load((CONFIGS / name).read_text()), {})
    dgp = _make(DGPConfig, "dgp", cfg["dgp"])
    return cfg, dgp, strategy_config(cfg, dgp)


# 1 -------------------------------------------------------------------------------------


def z_ok(diff, se, k=4.0):
    return np.all(np.abs(diff) <= k * se + 1e-12)


def test_1_oracle_equivalence(criterion):
    rng = np.random.default_rng(20240501)
    N = 5000
    worst, sampled_fail, failures = 0.0, 0, []
    with Timed() as tm:
        for k in range(200):
            inst = random_instance(rng)
            X, obs, R = inst["X"], inst["obs"], inst["R"]
            n, d = X.shape
            th = Theta(inst["mu0"], inst["sigma0"], inst["Q"], R)
            y = np.where(obs, inst["y"], np.nan)
            fr = kalman_filter(th, X, y)
            sm = kalman_smoother(fr)
            jg = JointGaussian(X, inst["mu0"], inst["sigma0"], inst["Q"], R)
            mean, cov = jg.smoothed(inst["y"], obs)
            errs = [abs(fr.loglik - jg.loglik(inst["y"], obs))]
            for i in range(1, n + 1):
                m_f, P_f = jg.filtered(inst["y"], obs, i)
                errs += [np.abs(fr.m_filt[i] - m_f).max(), np.abs(fr.P_filt[i] - P_f).max()]
            for i in range(n + 1):
                s = jg.state(i)
                errs += [np.abs(sm.means[i] - mean[s]).max(), np.abs(sm.covs[i] - cov[np.ix_(s, s)]).max()]
                if i:
                    errs.append(np.abs(sm.lag_covs[i] - cov[np.ix_(s, jg.state(i - 1))]).max())
            mis = np.flatnonzero(~obs)
            for r in mis:
                o = jg.outcome(r + 1)
                errs += [abs(X[r] @ sm.means[r + 1] - mean[o]),
                         abs(X[r] @ sm.covs[r + 1] @ X[r] + R - cov[o, o])]
            worst = max(worst, max(errs))

            # sampled moments
            paths = np.empty((N, n + 1, d))
            z = rng.standard_normal((N, n + 1, d))
            for m in range(N):
                paths[m] = kernels.ffbs_backward(fr.m_filt, fr.P_filt, fr.Q, z[m])
            ok = True
            for i in range(n + 1):
                s = jg.state(i)
                var = np.diag(cov[np.ix_(s, s)])
                ok &= z_ok(paths[:, i].mean(0) - mean[s], np.sqrt(var / N))
                ok &= z_ok(paths[:, i].var(0) - var, var * np.sqrt(2.0 / N))
                if i:
                    v0 = np.diag(cov[np.ix_(jg.state(i - 1), jg.state(i - 1))])
                    c = np.diag(cov[np.ix_(s, jg.state(i - 1))])
                    emp = ((paths[:, i] - paths[:, i].mean(0)) * (paths[:, i - 1] - paths[:, i - 1].mean(0))).mean(0)
                    ok &= z_ok(emp - c, np.sqrt((var * v0 + c**2) / N))
            for r in mis:
                o = jg.outcome(r + 1)
                draws = paths[:, r + 1] @ X[r] + np.sqrt(R) * rng.standard_normal(N)
                ok &= z_ok(draws.mean() - mean[o], np.sqrt(cov[o, o] / N))
            if not ok:
                sampled_fail += 1
                failures.append(k)
    passed = worst <= 1e-8 and sampled_fail == 0 and tm.wall < 120
    criterion("1 oracle equivalence", passed,
              f"200 instances, max moment error {worst:.1e} (tol 1e-8), sampled-moment failures {sampled_fail} "
              f"{failures[:5]} at 4 MC SE with 5000 draws, {tm.wall:.1f}s (limit 120s)")
    assert passed


# 2 -------------------------------------------------------------------------------------


def test_2_complete_data_fixed_point(criterion):
    dgp = DGPConfig(T=1000)
    ds, _ = simulate_dgp(dgp, np.random.default_rng(np.random.SeedSequence(2024)))
    spec = dgp.model_spec()
    with Timed() as tm:
        res = run_mcem(ds, spec, MCEMConfig(seed=1))
    design = build_design(ds, spec)
    beta, _, sigma2 = ols(design.X, ds.y[design.times - 1])
    est = np.array([res.estimates[nm] for nm in design.names])
    coef_err = float(np.abs(est - beta).max())
    r_err = abs(res.theta.R / sigma2 - 1)
    passed = coef_err <= 1e-3 and r_err <= 0.05 and tm.wall < 30
    criterion("2 complete-data fixed point", passed,
              f"max |coef - OLS| {coef_err:.1e} (tol 1e-3), R rel. error {r_err:.2%} (tol 5%), {tm.wall:.1f}s (limit 30s)")
    assert passed


# 3 -------------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def stationary_grid():
    cfg, dgp, scfg = benchmark_setup("benchmark_stationary.yaml")
    out = {}
    with Timed() as tm:
        for mech in ("MCAR", "MAR"):
            out[mech] = run_scenario(dgp, mech, 0.5, cfg["strategies"], 100, cfg["seed"], scfg, cfg["workers"])
    return out, tm


def test_3a_stationary_recovery(criterion, stationary_grid):
    grid, _ = stationary_grid
    bad, worst_bias, cov_range = [], 0.0, [1.0, 0.0]
    for mech, res in grid.items():
        for s in RECOVERING:
            for c in STATIC_SLOPES:
                b, cv = res.metric(s, c, "bias"), res.metric(s, c, "coverage")
                worst_bias = max(worst_bias, abs(b))
                cov_range = [min(cov_range[0], cv), max(cov_range[1], cv)]
                if not (abs(b) < 0.05 and 0.88 <= cv <= 0.99):
                    bad.append(f"{mech}/{s}/{c} bias={b:+.3f} cov={cv:.2f}")
        failures = {s: n for s, n in res.failures.items() if n}
        if failures:
            bad.append(f"{mech} failures {failures}")
    criterion("3a stationary recovery (mcem-ssm, cc, mp)", not bad,
              f"max |bias| {worst_bias:.3f} (<0.05), coverage {cov_range[0]:.2f}-{cov_range[1]:.2f} ([0.88, 0.99])"
              + (f"; violations: {'; '.join(bad)}" if bad else ""))
    assert not bad


def test_3b_single_imputation_undercoverage(criterion, stationary_grid):
    grid, _ = stationary_grid
    cov = {f"{m}/{s}": grid[m].metric(s, "a_lag1", "coverage") for m in grid for s in SINGLE}
    bad = {k: v for k, v in cov.items() if not v < 0.5}
    detail = ", ".join(f"{k}={v:.2f}" for k, v in cov.items())
    criterion("3b single imputers a_lag1 coverage < 0.5", not bad, detail)
    assert not bad


def test_3c_stationary_runtime(criterion, stationary_grid):
    _, tm = stationary_grid
    cpus = os.cpu_count() or 1
    # perfect scaling over 8 workers when fewer CPUs are present
    eq = tm.wall if cpus >= 8 else tm.cpu / 8
    passed = eq < 30 * 60
    criterion("3 runtime", passed,
              f"wall {tm.wall / 60:.1f} min on {cpus} CPU(s), CPU {tm.cpu / 60:.1f} min, 8-worker equivalent "
              f"{eq / 60:.1f} min (limit 30)")
    assert passed


# 4 -------------------------------------------------------------------------------------


def test_4_nonstationary_recovery(criterion):
    cfg, dgp, scfg = benchmark_setup("benchmark_nonstationary.yaml")
    with Timed() as tm:
        res = run_scenario(dgp, "MCAR", 0.5, cfg["strategies"], 50, cfg["seed"], scfg, cfg["workers"])
    b, cv = res.metric("mcem-ssm", "a_lag1", "bias"), res.metric("mcem-ssm", "a_lag1", "coverage")
    ok_mcem = abs(b) < 0.07 and 0.85 <= cv <= 1.0
    others = {}
    for s in ("cc", "mp"):
        others[s] = {c: res.metric(s, c, "bias") for c in ("y_lag1", "a_lag1")}
    ok_others = all(max(abs(v) for v in d.values()) > 0.1 for d in others.values())
    passed = ok_mcem and ok_others and tm.wall < 45 * 60
    detail = (f"mcem-ssm a_lag1 bias {b:+.3f} (<0.07) cov {cv:.2f} ([0.85, 1]); "
              + "; ".join(f"ssm-{s} bias rho {d['y_lag1']:+.3f} a_lag1 {d['a_lag1']:+.3f}" for s, d in others.items())
              + f" (one > 0.1); failures {res.failures}; {tm.wall / 60:.1f} min (limit 45)")
    criterion("4 nonstationary recovery", passed, detail)
    assert passed


# 5 -------------------------------------------------------------------------------------


def test_5_change_points(criterion):
    cfg, dgp, scfg = benchmark_setup("benchmark_nonstationary.yaml")
    truth = np.array(dgp.periodic_breaks)
    with Timed() as tm:
        # change points are planned on complete outcomes
        res = run_scenario(dgp, "MCAR", 0.0, ["mcem-ssm"], 100, cfg["seed"] + 1, scfg, cfg["workers"])
    hits, misses = 0, []
    for rec in res.replicates:
        cps = rec.change_points.get("mcem-ssm", {}).get("a", ())
        ok = len(cps) == truth.size and np.all(np.abs(np.array(cps) - truth) <= 20)
        hits += ok
        if not ok:
            misses.append(cps)
    passed = hits >= 90 and tm.wall < 20 * 60
    criterion("5 change points", passed,
              f"{hits}/100 runs with both points within 20 of (400, 700) (need 90); misses {misses[:5]}; "
              f"{tm.wall / 60:.1f} min (limit 20)")
    assert passed


# 6 -------------------------------------------------------------------------------------


def test_6_missingness_calibration(criterion):
    ds, _ = simulate_dgp(DGPConfig(T=10_000), np.random.default_rng(6))
    exp, cov = list(ds.exposures.values()), list(ds.covariates.values())
    rates, bad = {}, []
    for kind in ("MCAR", "MAR", "MNAR"):
        for target in (0.25, 0.5, 0.75):
            mask = generate_mask(MechanismConfig(kind, target), np.random.default_rng([kind == "MAR", int(target * 100)]),
                                 ds.y, exp, cov)
            rates[f"{kind}{target:g}"] = mask.mean()
            if abs(mask.mean() - target) > 0.02:
                bad.append(f"{kind}@{target}")
    gaps = {}
    for slope in (1.0, -1.0):
        mask = generate_mask(MechanismConfig("MNAR", 0.5, slopes=(slope,)), np.random.default_rng(9), ds.y, exp, cov)
        gaps[slope] = ds.y[mask].mean() - ds.y[~mask].mean()
        if np.sign(gaps[slope]) != np.sign(slope):
            bad.append(f"MNAR gap sign for slope {slope}")
    detail = ("rates " + ", ".join(f"{k}={v:.3f}" for k, v in rates.items())
              + f"; MNAR missing-minus-observed mean gap {gaps[1.0]:+.2f} (slope +1), {gaps[-1.0]:+.2f} (slope -1)")
    criterion("6 missingness calibration", not bad, detail + (f"; violations {bad}" if bad else ""))
    assert not bad


# 7 -------------------------------------------------------------------------------------


def test_7_determinism(criterion, tmp_path):
    body = {"dgp": {"T": 300}, "mechanisms": ["MAR"], "rates": [0.5], "n_reps": 2,
            "strategies": ["cc", "mean", "locf", "linear", "spline", "mp", "arima", "mcem-ssm"],
            "mice": {"m": 5, "iterations": 3},
            "mcem": {"m_initial": 20, "m_max": 100, "m_final": 200, "burn_in": 10, "max_outer_iterations": 8}}
    cfg = tmp_path / "cell.yaml"
    cfg.write_text(yaml.safe_dump(body))
    codes = [run(["benchmark", "--config", str(cfg), "--seed", "77", "--out", str(tmp_path / k)]) for k in "ab"]
    files = sorted(p.name for p in (tmp_path / "a").glob("*.csv"))
    same = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files)
    passed = codes == [0, 0] and same and "cell_MAR_0.5.csv" in files
    criterion("7 determinism", passed, f"8-strategy MAR cell rerun with seed 77: {len(files)} CSVs "
              f"{'byte-identical' if same else 'DIFFER'}")
    assert passed


# 8 -------------------------------------------------------------------------------------


def test_8_property_suites(criterion):
    import test_baselines as tb
    import test_changepoint as tc
    import test_missingness as tmis
    import test_ssm as ts

    suites = {
        "imputer identity on complete data": tb.test_complete_series_is_identity,
        "observed entries immutable": tb.test_observed_entries_never_change,
        "Rubin pooled mean = mean of estimates": tb.test_pooled_mean_is_mean_of_estimates,
        "penalty monotonicity": tc.test_more_penalty_never_adds_change_points,
        "PELT = exhaustive search": tc.test_pelt_matches_exhaustive_search,
        "PSD variance ordering": ts.test_variance_ordering_smoothed_filtered_predicted,
        "symmetric PSD covariances": ts.test_covariances_symmetric_psd,
        "partition exactness": tmis.test_partition_is_exact,
    }
    failed = []
    for name, fn in suites.items():
        try:
            fn()
        except Exception as exc:  # noqa: BLE001 - report every suite
            failed.append(f"{name} ({type(exc).__name__})")
    criterion("8 property suites", not failed,
              f"{len(suites) - len(failed)}/{len(suites)} hypothesis suites hold" + (f"; failed: {failed}" if failed else ""))
    assert not failed
