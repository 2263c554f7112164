"""Simulation scenarios: generate, mask, fit every strategy, score against the truth."""

from __future__ import annotations

import csv
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .baselines import STRATEGIES, FitSummary, StrategyConfig, fit_strategy
from .dgp import DGPConfig, outcome_scale, simulate_dgp
from .errors import ConfigError, MCEMError
from .missingness import MechanismConfig, generate_mask

__all__ = [
    "DGPConfig",
    "ReplicateRecord",
    "ScenarioResult",
    "compute_metrics",
    "outcome_scale",
    "run_replicate",
    "run_scenario",
    "simulate_dgp",
]

log = logging.getLogger(__name__)

METRICS = ("mean_estimate", "bias", "empirical_se", "mean_se", "coverage", "rmse", "n")


def compute_metrics(estimates, truths, cis):
    """Bias, empirical SE and coverage of aligned replicate results.

    ``cis`` is an ``(n, 2)`` array of interval bounds.
    """
    est = np.asarray(estimates, dtype=float)
    truth = np.broadcast_to(np.asarray(truths, dtype=float), est.shape)
    ci = np.asarray(cis, dtype=float).reshape(-1, 2)
    if ci.shape[0] != est.shape[0]:
        raise ConfigError("estimates and intervals must be aligned")
    if est.size == 0:
        return np.nan, np.nan, np.nan
    bias = float(np.mean(est - truth))
    emp_se = float(np.std(est, ddof=1)) if est.size > 1 else 0.0
    coverage = float(np.mean((ci[:, 0] <= truth) & (truth <= ci[:, 1])))
    return bias, emp_se, coverage


# --------------------------------------------------------------------------
# One replicate


@dataclass
class ReplicateRecord:
    """Scores of every strategy on one replicate.

    ``scores[strategy][coefficient]`` holds ``(estimate, se, lower, upper, truth)``;
    ``rmse[strategy][name]`` holds trajectory RMSEs of random-walk coefficients.
    """

    index: int
    missing_rate: float
    scores: dict[str, dict[str, tuple[float, float, float, float, float]]] = field(default_factory=dict)
    rmse: dict[str, dict[str, float]] = field(default_factory=dict)
    change_points: dict[str, dict[str, tuple[int, ...]]] = field(default_factory=dict)
    failures: dict[str, str] = field(default_factory=dict)


def scoring_truth(dgp: DGPConfig) -> tuple[dict[str, float], dict[str, tuple[int, ...]]]:
    """Constant truths keyed by reported name, and the reference segments."""
    truth = {"y_lag1": dgp.rho, "a_lag1": dgp.beta2, "c": dgp.betac}
    segments = {}
    if dgp.regime == "stationary":
        truth.update(intercept=dgp.beta0, a=dgp.beta1)
    else:
        segments["a"] = tuple(dgp.periodic_breaks)
        for k, v in enumerate(dgp.periodic_values, start=1):
            truth[f"a[{k}]"] = v
    return truth, segments


def _score(fit: FitSummary, truth: dict[str, float], paths: dict[str, np.ndarray]):
    scores = {}
    for nm, v in truth.items():
        if nm in fit.names:
            est, se, lo, hi = fit.get(nm)
            scores[nm] = (est, se, lo, hi, float(v))
    rmse = {}
    for nm, (times, values) in fit.trajectories.items():
        if nm in paths:
            ref = paths[nm][np.asarray(times) - 1]
            rmse[nm] = float(np.sqrt(np.mean((np.asarray(values) - ref) ** 2)))
    return scores, rmse


def _strategy_seed(ss: np.random.SeedSequence, strategy: str) -> np.random.SeedSequence:
    # keyed by the strategy's fixed position so subsets reuse the same streams
    return np.random.SeedSequence(ss.entropy, spawn_key=(*ss.spawn_key, 2, STRATEGIES.index(strategy)))


def run_replicate(dgp: DGPConfig, mechanism: MechanismConfig, strategies, root_seed: int, index: int,
                  scfg: StrategyConfig) -> ReplicateRecord:
    """Simulate, mask and fit every strategy; deterministic in ``(root_seed, index)``."""
    ss = np.random.SeedSequence([int(root_seed), int(index)])
    data_ss, mask_ss = ss.spawn(2)
    ds, truth_paths = simulate_dgp(dgp, np.random.default_rng(data_ss))
    mask = generate_mask(
        mechanism, np.random.default_rng(mask_ss), ds.y, list(ds.exposures.values()), list(ds.covariates.values())
    )
    y = ds.y.copy()
    y[mask] = np.nan
    masked = ds.with_outcome(y)
    truth, segments = scoring_truth(dgp)
    spec = dgp.model_spec()
    rec = ReplicateRecord(index, float(mask.mean()))
    paths = {k: v for k, v in truth_paths.items() if isinstance(v, np.ndarray)}
    for s in strategies:
        rng = np.random.default_rng(_strategy_seed(ss, s))
        try:
            fit = fit_strategy(s, masked, spec, scfg, rng=rng, reference_segments=segments)
        except (MCEMError, ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
            rec.failures[s] = f"{type(exc).__name__}: {exc}"
            log.warning("replicate %d strategy %s failed: %s", index, s, exc)
            continue
        rec.scores[s], rec.rmse[s] = _score(fit, truth, paths)
        if "change_points" in fit.extra:
            rec.change_points[s] = {k: tuple(v) for k, v in fit.extra["change_points"].items()}
    return rec


def _run_one(args):
    return run_replicate(*args)


# --------------------------------------------------------------------------
# Scenario


@dataclass
class ScenarioResult:
    """Aggregated metrics per (mechanism, rate, strategy, coefficient)."""

    regime: str
    mechanism: str
    rate: float
    strategies: tuple[str, ...]
    n_reps: int
    replicates: list[ReplicateRecord]
    metrics: dict[tuple[str, str], dict[str, float]]
    failures: dict[str, int]

    def metric(self, strategy: str, coefficient: str, name: str) -> float:
        return self.metrics[(strategy, coefficient)][name]

    def rows(self):
        """Tidy rows: regime, mechanism, rate, strategy, coefficient, metric, value."""
        out = []
        for (s, c), vals in self.metrics.items():
            for m in METRICS:
                if m in vals:
                    out.append((self.regime, self.mechanism, self.rate, s, c, m, vals[m]))
        for s in self.strategies:
            out.append((self.regime, self.mechanism, self.rate, s, "*", "failures", self.failures.get(s, 0)))
        return out

    def replicate_rows(self):
        """Per-replicate rows: rep, strategy, coefficient, estimate, se, lower, upper, truth, covered."""
        out = []
        for rec in self.replicates:
            for s in self.strategies:
                for c, (e, se, lo, hi, t) in rec.scores.get(s, {}).items():
                    out.append((rec.index, s, c, e, se, lo, hi, t, int(lo <= t <= hi)))
        return out

    def to_csv(self, path, header: bool = True, mode: str = "w"):
        write_rows(path, ("regime", "mechanism", "rate", "strategy", "coefficient", "metric", "value"), self.rows(),
                   header, mode)


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_rows(path, columns, rows, header: bool = True, mode: str = "w"):
    """CSV writer with round-trip float formatting (bitwise reproducible)."""
    with open(path, mode, newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if header:
            w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _aggregate(records: list[ReplicateRecord], strategies) -> tuple[dict, dict]:
    metrics: dict[tuple[str, str], dict[str, float]] = {}
    failures = {s: sum(s in r.failures for r in records) for s in strategies}
    for s in strategies:
        coefs = []
        for r in records:
            for c in r.scores.get(s, {}):
                if c not in coefs:
                    coefs.append(c)
        for c in coefs:
            rows = np.array([r.scores[s][c] for r in records if c in r.scores.get(s, {})], dtype=float)
            est, se, lo, hi, truth = rows.T
            bias, emp, cov = compute_metrics(est, truth, np.column_stack([lo, hi]))
            metrics[(s, c)] = {
                "mean_estimate": float(est.mean()),
                "bias": bias,
                "empirical_se": emp,
                "mean_se": float(np.nanmean(se)) if np.isfinite(se).any() else float("nan"),
                "coverage": cov,
                "n": int(rows.shape[0]),
            }
        names = []
        for r in records:
            for nm in r.rmse.get(s, {}):
                if nm not in names:
                    names.append(nm)
        for nm in names:
            vals = np.array([r.rmse[s][nm] for r in records if nm in r.rmse.get(s, {})])
            metrics[(s, nm)] = {"rmse": float(vals.mean()), "n": int(vals.size)}
    return metrics, failures


def run_scenario(dgp: DGPConfig, mechanism: MechanismConfig | str, rate: float | None, strategies, n_reps: int,
                 root_seed: int, scfg: StrategyConfig | None = None, workers: int = 1) -> ScenarioResult:
    """Run ``n_reps`` replicates of one (mechanism, rate) cell.

    Replicates fan out over ``workers`` processes; results are aggregated
    in replicate order, so the output does not depend on scheduling.
    Strategy failures are counted and excluded from the metrics.
    """
    if n_reps < 2:
        raise ConfigError("n_reps must be at least 2")
    strategies = tuple(strategies)
    if not strategies:
        raise ConfigError("strategy list is empty")
    unknown = [s for s in strategies if s not in STRATEGIES]
    if unknown:
        raise ConfigError(f"unknown strategies {unknown}; choose from {STRATEGIES}")
    if isinstance(mechanism, str):
        mechanism = MechanismConfig(mechanism, rate if rate is not None else 0.5)
    elif rate is not None:
        mechanism = replace(mechanism, target_rate=rate)
    if scfg is None:
        scfg = StrategyConfig(analysis="ols" if dgp.regime == "stationary" else "ssm")
    jobs = [(dgp, mechanism, strategies, root_seed, i, scfg) for i in range(n_reps)]
    workers = max(1, min(int(workers), n_reps, os.cpu_count() or 1))
    if workers == 1:
        records = [_run_one(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_run_one, jobs))
    metrics, failures = _aggregate(records, strategies)
    return ScenarioResult(
        dgp.regime, mechanism.kind, float(mechanism.target_rate), strategies, n_reps, records, metrics, failures
    )
