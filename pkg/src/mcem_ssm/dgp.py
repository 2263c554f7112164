"""Data-generating processes for the simulation study."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_discrete_lyapunov

from .errors import ConfigError
from .model import ModelSpec, TimeSeriesDataset

REGIMES = ("stationary", "nonstationary")
COEFFICIENTS = ("intercept", "y_lag1", "a", "a_lag1", "c")


@dataclass
class DGPConfig:
    """Outcome regression with one exposure ``a`` and one covariate ``c``::

        Y_t = b0_t + rho Y_{t-1} + b1_t A_t + b2 A_{t-1} + bc C_t + v_t

    Exposure and covariate follow a feedback VAR(1)::

        A_t = a_ar A_{t-1} + y_feedback z_{t-1} + cross C_{t-1} + a_sd eps_t
        C_t = c_ar C_{t-1} + cross A_{t-1} + y_feedback z_{t-1} + c_sd eta_t

    where ``z`` is the outcome standardized by its stationary mean and sd.
    In the nonstationary regime ``b0_t = b0_{t-1} + rw_sd w_t`` starting at
    ``beta0`` and ``b1_t`` is piecewise constant with values
    ``periodic_values`` split after the times in ``periodic_breaks``.
    """

    regime: str = "stationary"
    T: int = 1000
    beta0: float = 40.0
    rho: float = 0.5
    beta1: float = -1.5
    beta2: float = -0.5
    betac: float = -1.0
    R: float = 0.1
    rw_sd: float = 1.0
    periodic_values: tuple[float, ...] = (-1.0, -2.0, -1.0)
    periodic_breaks: tuple[int, ...] = (400, 700)
    a_ar: float = 0.3
    c_ar: float = 0.3
    cross: float = 0.1
    y_feedback: float = 0.1
    a_sd: float = 1.0
    c_sd: float = 1.0
    burn_in: int = 200

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ConfigError(f"regime must be one of {REGIMES}")
        if self.T < 3:
            raise ConfigError("T must be at least 3")
        if self.R < 0 or self.rw_sd < 0 or self.a_sd < 0 or self.c_sd < 0:
            raise ConfigError("variances and noise scales must be nonnegative")
        if abs(self.rho) >= 1:
            raise ConfigError("|rho| must be < 1")
        if len(self.periodic_values) != len(self.periodic_breaks) + 1:
            raise ConfigError("periodic_values needs one more entry than periodic_breaks")
        self.periodic_breaks = tuple(int(b) for b in self.periodic_breaks)
        self.periodic_values = tuple(float(v) for v in self.periodic_values)

    @property
    def beta1_start(self) -> float:
        return self.periodic_values[0] if self.regime == "nonstationary" else self.beta1

    def beta1_path(self) -> np.ndarray:
        t = np.arange(1, self.T + 1)
        if self.regime == "stationary":
            return np.full(self.T, self.beta1)
        seg = np.searchsorted(np.asarray(self.periodic_breaks), t, side="left")
        return np.asarray(self.periodic_values)[seg]

    def model_spec(self) -> ModelSpec:
        """The correctly specified analysis model."""
        roles = {}
        if self.regime == "nonstationary":
            roles = {"intercept": "random-walk", "a": "periodic-stable"}
        return ModelSpec(q=1, p=1, o=0, exposures=("a",), covariates=("c",), roles=roles)


def outcome_scale(cfg: DGPConfig, iterations: int = 50) -> float:
    """Stationary sd of the outcome implied by the joint VAR (fixed point in the sd)."""
    b1, b2, bc, rho = cfg.beta1_start, cfg.beta2, cfg.betac, cfg.rho
    if cfg.a_sd == 0 and cfg.c_sd == 0 and cfg.R == 0:
        # deterministic recursion: the standardized outcome is identically zero
        return 1.0
    B =np.array([[cfg.a_sd, 0.0, 0.0], [0.0, cfg.c_sd, 0.0], [0.0, 0.0, np.sqrt(cfg.R)]])
    s = 1.0
    for _ in range(iterations):
        g = cfg.y_feedback / s
        # state (A, C, Y) deviations
        rowA = np.array([cfg.a_ar, cfg.cross, g])
        rowC = np.array([cfg.cross, cfg.c_ar, g])
        rowY = b1 * rowA + bc * rowC + np.array([b2, 0.0, rho])
        Phi = np.vstack([rowA, rowC, rowY])
        if np.max(np.abs(np.linalg.eigvals(Phi))) >= 1:
            raise ConfigError("exposure/outcome system is not stable")
        noise = B.copy()
        noise[2] = b1 * B[0] + bc * B[1] + B[2]
        S = solve_discrete_lyapunov(Phi, noise @ noise.T)
        s_new = float(np.sqrt(max(S[2, 2], 1e-300)))
        if abs(s_new - s) < 1e-12 * max(1.0, s):
            s = s_new
            break
        s = s_new
    return s if s > 0 else 1.0


def simulate_dgp(cfg: DGPConfig, rng: np.random.Generator):
    """Simulate one complete series.

    Returns
    -------
    dataset : TimeSeriesDataset
        Complete outcome with exposure ``a`` and covariate ``c``.
    truth : dict
        Coefficient paths (length T) keyed by coefficient name, plus ``R``.
    """
    T, B = cfg.T, cfg.burn_in
    s_y = outcome_scale(cfg)
    b1 = cfg.beta1_path()
    total = B + T
    eps = rng.standard_normal(total) * cfg.a_sd
    eta = rng.standard_normal(total) * cfg.c_sd
    v = rng.standard_normal(total) * np.sqrt(cfg.R)
    w = rng.standard_normal(T) * cfg.rw_sd if cfg.regime == "nonstationary" else np.zeros(T)

    b0 = np.full(total, cfg.beta0)
    if cfg.regime == "nonstationary":
        b0[B:] = cfg.beta0 + np.cumsum(w)
    b1_full = np.concatenate([np.full(B, b1[0]), b1])
    A = np.zeros(total)
    C = np.zeros(total)
    Y = np.zeros(total)
    y_prev = cfg.beta0 / (1.0 - cfg.rho)
    a_prev = c_prev = 0.0
    level_prev = y_prev
    for i in range(total):
        z = (y_prev - level_prev) / s_y
        A[i] = cfg.a_ar * a_prev + cfg.y_feedback * z + cfg.cross * c_prev + eps[i]
        C[i] = cfg.c_ar * c_prev + cfg.cross * a_prev + cfg.y_feedback * z + eta[i]
        Y[i] = b0[i] + cfg.rho * y_prev + b1_full[i] * A[i] + cfg.beta2 * a_prev + cfg.betac * C[i] + v[i]
        level_prev = b0[i] / (1.0 - cfg.rho)
        y_prev, a_prev, c_prev = Y[i], A[i], C[i]

    ds = TimeSeriesDataset(Y[B:], exposures={"a": A[B:]}, covariates={"c": C[B:]})
    truth = {
        "intercept": b0[B:].copy(),
        "y_lag1": np.full(T, cfg.rho),
        "a": b1.astype(float),
        "a_lag1": np.full(T, cfg.beta2),
        "c": np.full(T, cfg.betac),
        "R": cfg.R,
    }
    return ds, truth
