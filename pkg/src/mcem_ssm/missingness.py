"""Missing-time-point bookkeeping and missingness mechanisms."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import ConfigError, NumericalError

MECHANISMS = ("MCAR", "MAR", "MNAR")


@dataclass(frozen=True)
class MissingPattern:
    """Partition of the modelled times ``q+1..T``.

    ``lag_missing[i, k-1]`` is True when row ``t = q+1+i`` references a
    missing outcome at lag ``k``.
    """

    T: int
    q: int
    t_mis: np.ndarray
    t_obs0: np.ndarray
    t_obs1: np.ndarray
    lag_missing: np.ndarray

    @property
    def n_mis(self) -> int:
        return int(self.t_mis.size)

    @property
    def n_obs(self) -> int:
        return int(self.t_obs0.size + self.t_obs1.size)

    @property
    def rows(self) -> np.ndarray:
        return np.arange(self.q + 1, self.T + 1)

    def row_index(self, times) -> np.ndarray:
        """Design-row index of 1-based times."""
        return np.asarray(times) - self.q - 1


def partition_timepoints(mask, q: int) -> MissingPattern:
    """Split ``q+1..T`` into missing, fully observed and partially observed rows.

    A missing outcome at ``s`` marks ``s`` as missing and each observed row in
    ``s+1..s+q`` as partially observed.
    """
    mask = np.asarray(mask, dtype=bool)
    T = mask.shape[0]
    times = np.arange(q + 1, T + 1)
    own = mask[times - 1]
    lags = np.column_stack([mask[times - k - 1] for k in range(1, q + 1)]) if times.size else np.zeros((0, q), bool)
    any_lag = lags.any(axis=1) if times.size else np.zeros(0, bool)
    return MissingPattern(
        T=T,
        q=q,
        t_mis=times[own],
        t_obs0=times[~own & ~any_lag],
        t_obs1=times[~own & any_lag],
        lag_missing=lags,
    )


@dataclass
class MechanismConfig:
    """Logistic missingness model ``P(M_t=1) = expit(b0 + sum(slope * z))``.

    Predictors are standardized: ``A_t`` and ``C_t`` for MAR, ``Y_t`` for MNAR.
    ``slopes`` default to 1 per predictor; MCAR has none. ``intercept`` is
    filled in by calibration when left as None.
    """

    kind: str = "MCAR"
    target_rate: float = 0.5
    slopes: tuple[float, ...] | None = None
    intercept: float | None = None
    rates: tuple[float, ...] = field(default=(0.0, 0.25, 0.5, 0.75), repr=False)

    def __post_init__(self):
        self.kind = self.kind.upper()
        if self.kind not in MECHANISMS:
            raise ConfigError(f"unknown missingness mechanism {self.kind!r}")
        if not 0.0 <= self.target_rate < 1.0:
            raise ConfigError("target_rate must lie in [0, 1)")
        if self.kind == "MCAR":
            if self.slopes and any(s != 0 for s in self.slopes):
                raise ConfigError("MCAR mechanism cannot have nonzero slopes")
            self.slopes = ()


def _standardize(x):
    x = np.asarray(x, dtype=float)
    sd = x.std()
    return (x - x.mean()) / sd if sd > 0 else x - x.mean()


def mechanism_predictors(cfg: MechanismConfig, y, exposures=(), covariates=()) -> np.ndarray:
    """Standardized predictor matrix (T x k) used by the mechanism."""
    if cfg.kind == "MCAR":
        return np.zeros((len(y), 0))
    if cfg.kind == "MAR":
        cols = [_standardize(s) for s in (*exposures, *covariates)]
    else:
        y = np.asarray(y, dtype=float)
        if np.isnan(y).any():
            raise ConfigError("MNAR masks need the complete outcome series")
        cols = [_standardize(y)]
    if not cols:
        raise ConfigError(f"{cfg.kind} mechanism needs at least one predictor series")
    return np.column_stack(cols)


def _slopes(cfg, k):
    if cfg.kind == "MCAR":
        return np.zeros(0)
    s = np.ones(k) if cfg.slopes is None else np.asarray(cfg.slopes, dtype=float)
    if s.shape != (k,):
        raise ConfigError(f"{cfg.kind} expects {k} slopes, got {s.size}")
    return s


def calibrate_intercept(cfg: MechanismConfig, predictors, tol=1e-4, max_iter=200) -> float:
    """Bisection on the intercept so the mean missingness probability hits the target."""
    Z = np.asarray(predictors, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None]
    if Z.shape[0] == 0:
        raise ConfigError("predictor sample is empty")
    rate = cfg.target_rate
    if rate == 0.0:
        return -np.inf
    lin = Z @ _slopes(cfg, Z.shape[1])
    lo, hi = -50.0, 50.0
    mid = 0.0
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        gap = expit(mid + lin).mean() - rate
        # keep halving past tol so the intercept itself is well resolved
        if abs(gap) <= tol and hi - lo < 1e-9:
            return mid
        if gap > 0:
            hi = mid
        else:
            lo = mid
    if abs(expit(mid + lin).mean() - rate) <= tol:
        return mid
    raise NumericalError(f"intercept calibration failed to reach rate {rate} within {tol}")


def missing_probabilities(cfg: MechanismConfig, predictors) -> np.ndarray:
    Z = np.asarray(predictors, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None]
    b0 = cfg.intercept if cfg.intercept is not None else calibrate_intercept(cfg, Z)
    if b0 == -np.inf:
        return np.zeros(Z.shape[0])
    return expit(b0 + Z @ _slopes(cfg, Z.shape[1]))


def generate_mask(cfg: MechanismConfig, rng: np.random.Generator, y, exposures=(), covariates=()) -> np.ndarray:
    """Draw ``M_t ~ Bernoulli(p_t)`` independently over t; True = missing."""
    Z = mechanism_predictors(cfg, y, exposures, covariates)
    if cfg.kind == "MCAR":
        Z = np.zeros((len(y), 0))
    p = missing_probabilities(cfg, Z)
    return rng.random(p.shape[0]) < p
