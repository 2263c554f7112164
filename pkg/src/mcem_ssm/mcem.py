"""Monte Carlo EM for state space regressions with missing (lagged) outcomes.

Each E-step runs a Gibbs sampler that alternates a forward-filtering
backward-sampling draw of the coefficient path with draws of the missing
outcomes, and accumulates Monte Carlo moments. The M-step updates
``(mu0, sigma0, Q, R)`` in closed form. Periodic-stable coefficients are
re-segmented after every outer iteration.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .changepoint import Segmentation, detect_changepoints
from .errors import ConfigError, DataError, NumericalError
from .missingness import MissingPattern, partition_timepoints
from .model import Design, ModelSpec, Theta, TimeSeriesDataset, build_design
from .ssm import _gauss_term, kalman_filter, kalman_smoother

log = logging.getLogger(__name__)

SAMPLERS = ("full", "predictive")
EXACT_CHAIN_DRAWS = 200
R_FLOOR = 1e-8


@dataclass
class MCEMConfig:
    """Monte Carlo schedule, stopping rule and sampler options.

    Parameters
    ----------
    m_initial, m_growth_factor, m_max
        Draws kept at outer iteration ``j`` are
        ``min(m_max, round(m_initial * m_growth_factor**j))``.
    burn_in
        Gibbs sweeps discarded at the start of every E-step.
    tol_loglik, tol_params, consecutive_passes
        Convergence needs the relative change of the Q-function below
        ``tol_loglik`` and the largest absolute change of the tracked
        parameters below ``tol_params`` on ``consecutive_passes`` successive
        iterations.
    sampler
        ``"full"`` draws each missing outcome from its full conditional,
        including the rows that use it as a lag. ``"predictive"`` draws it
        from ``N(F_t theta_t, R)`` and filters only observed rows.
    hold_sigma0
        Keep ``sigma0`` at its initial value instead of the M-step value,
        which shrinks towards zero for a single series.
    exact_when_possible
        Use exact smoother moments when no observed row depends on a missing
        outcome.
    mc_error_aware
        Also count a change as a pass when it is within two Monte Carlo
        standard errors (batch means over the chain).
    m_final
        If set, the reported chain comes from one more E-step of this many
        draws at the final parameters.
    """

    m_initial: int = 50
    m_growth_factor: float = 1.3
    m_max: int = 2000
    burn_in: int = 20
    max_outer_iterations: int = 30
    tol_loglik: float = 1e-4
    tol_params: float = 1e-3
    consecutive_passes: int = 3
    level: float = 0.95
    seed: int = 0
    sampler: str = "full"
    q_init: float = 1e-2
    sigma0_init: float = 10.0
    hold_sigma0: bool = True
    exact_when_possible: bool = True
    min_segment_length: int = 30
    penalty_scale: float = 1.0
    mc_error_aware: bool = False
    m_final: int | None = None
    theta_init: Theta | None = None

    def __post_init__(self):
        if self.m_initial < 10:
            raise ConfigError("m_initial must be >= 10")
        if self.m_growth_factor < 1:
            raise ConfigError("m_growth_factor must be >= 1")
        if self.m_max < self.m_initial:
            raise ConfigError("m_max must be >= m_initial")
        if self.burn_in < 0 or self.max_outer_iterations < 1 or self.consecutive_passes < 1:
            raise ConfigError("burn_in >= 0, max_outer_iterations >= 1 and consecutive_passes >= 1 required")
        if not (self.tol_loglik > 0 and self.tol_params > 0):
            raise ConfigError("tolerances must be positive")
        if not 0 < self.level < 1:
            raise ConfigError("level must lie in (0, 1)")
        if self.sampler not in SAMPLERS:
            raise ConfigError(f"sampler must be one of {SAMPLERS}")
        if self.q_init <= 0 or self.sigma0_init <= 0:
            raise ConfigError("q_init and sigma0_init must be positive")
        if self.m_final is not None and self.m_final < 20:
            raise ConfigError("m_final must be >= 20")

    def draws(self, j: int) -> int:
        return int(min(self.m_max, round(self.m_initial * self.m_growth_factor**j)))


# --------------------------------------------------------------------------
# Gibbs state


def interpolate_outcome(y) -> np.ndarray:
    """Linear interpolation of NaN gaps with nearest-value edges."""
    y = np.asarray(y, dtype=float)
    obs = ~np.isnan(y)
    if not obs.any():
        raise DataError("outcome series has no observed values")
    idx = np.arange(y.shape[0])
    return np.interp(idx, idx[obs], y[obs])


def _take_rows(design: Design, rows) -> Design:
    return Design(
        times=design.times[rows],
        X=np.ascontiguousarray(design.X[rows]),
        lag_missing=design.lag_missing[rows],
        names=design.names,
        roles=design.roles,
        lag_cols=design.lag_cols,
        origin=design.origin,
    )


@dataclass
class GibbsState:
    """Current design (lag slots filled) and filled outcome series.

    ``y`` is the full length-T series; design row ``i`` is series index
    ``q + i``. ``mis_rows`` are the row indices whose outcome is missing.

    With ``rows`` set, only those design rows are kept and treated as
    consecutive (a compressed series); they must be fully observed.
    """

    dataset: TimeSeriesDataset
    spec: ModelSpec
    design: Design
    y: np.ndarray
    pattern: MissingPattern
    mis_rows: np.ndarray
    observed: np.ndarray
    rows: np.ndarray | None = None

    @classmethod
    def initial(cls, dataset: TimeSeriesDataset, spec: ModelSpec, y_fill=None, rows=None) -> "GibbsState":
        y = interpolate_outcome(dataset.y) if y_fill is None else np.array(y_fill, dtype=float)
        y[~dataset.missing] = dataset.y[~dataset.missing]
        pattern = partition_timepoints(dataset.missing, spec.q)
        design = build_design(dataset, spec, lag_fill=y)
        observed = ~dataset.missing[spec.q :]
        if rows is not None:
            rows = np.asarray(rows, dtype=np.int64)
            if rows.size == 0:
                raise DataError("no rows selected")
            if not observed[rows].all() or design.lag_missing[rows].any():
                raise DataError("selected rows must have observed outcomes and lags")
            design = _take_rows(design, rows)
            observed = np.ones(rows.size, bool)
        if not observed.any():
            raise DataError(f"no observed outcome after the first {spec.q} time points")
        mis_rows = np.flatnonzero(~observed).astype(np.int64)
        return cls(dataset, spec, design, y, pattern, mis_rows, observed, rows)

    def with_spec(self, spec: ModelSpec) -> "GibbsState":
        """Rebuild the expanded design for new segments, keeping the fills."""
        design = build_design(self.dataset, spec, lag_fill=self.y)
        if self.rows is not None:
            design = _take_rows(design, self.rows)
        return replace(self, spec=spec, design=design)

    @property
    def n(self) -> int:
        return len(self.design)

    @property
    def y_rows(self) -> np.ndarray:
        y = self.y[self.spec.q :]
        return y if self.rows is None else y[self.rows]

    @property
    def complete_rows(self) -> np.ndarray:
        """Rows whose outcome and lagged outcomes are all observed."""
        if self.rows is not None:
            return np.arange(self.n)
        return self.pattern.row_index(self.pattern.t_obs0)

    @property
    def obs1_rows(self) -> np.ndarray:
        if self.rows is not None:
            return np.zeros(0, np.int64)
        return self.pattern.row_index(self.pattern.t_obs1)

    @property
    def exact(self) -> bool:
        """True when no observed row uses a missing outcome as a regressor."""
        return self.obs1_rows.size == 0


# --------------------------------------------------------------------------
# Moment accumulation


class MomentAccumulator:
    """Running sums over retained draws of the state path and lag terms.

    For every state index ``i`` (0 = prior state) the sums of ``theta_i``,
    ``theta_i theta_i'`` and ``theta_i theta_{i-1}'`` are kept. For rows with
    an observed outcome and some missing lag, with ``a = F0 theta`` the part
    from observed regressors and ``b`` the part from the filled lag slots,
    the sums of ``b``, ``b^2`` and ``a b`` are kept.
    """

    def __init__(self, n: int, d: int, obs1_rows, lag_slots):
        self.n, self.d = n, d
        self.count = 0
        self._s_theta = np.zeros((n + 1, d))
        self._s_outer = np.zeros((n + 1, d, d))
        self._s_cross = np.zeros((n + 1, d, d))
        # sums for paths that are constant in time (all-static models)
        self._c_theta = np.zeros(d)
        self._c_outer = np.zeros((d, d))
        self.obs1_rows = np.asarray(obs1_rows, dtype=np.int64)
        # (len(obs1), d) boolean: design slots of each such row filled with a draw
        self.lag_slots = np.asarray(lag_slots, dtype=bool)
        k = self.obs1_rows.size
        self.s_b = np.zeros(k)
        self.s_b2 = np.zeros(k)
        self.s_ab = np.zeros(k)
        self.s_ymis = None

    @property
    def s_theta(self):
        return self._s_theta + self._c_theta

    @property
    def s_outer(self):
        return self._s_outer + self._c_outer

    @property
    def s_cross(self):
        out = self._s_cross + self._c_outer
        out[0] = 0.0
        return out

    def add(self, path, X, y_mis=None, constant=False):
        """Add one path draw; ``constant=True`` asserts ``path[i]`` is the same for all i."""
        self.count += 1
        if constant:
            th0 = path[0]
            self._c_theta += th0
            self._c_outer += np.outer(th0, th0)
        else:
            self._s_theta += path
            self._s_outer += np.einsum("ti,tj->tij", path, path)
            self._s_cross[1:] += np.einsum("ti,tj->tij", path[1:], path[:-1])
        if self.obs1_rows.size:
            Xr = X[self.obs1_rows]
            th = path[self.obs1_rows + 1]
            prod = Xr * th
            b = np.where(self.lag_slots, prod, 0.0).sum(axis=1)
            a = prod.sum(axis=1) - b
            self.s_b += b
            self.s_b2 += b * b
            self.s_ab += a * b
        if y_mis is not None:
            self.s_ymis = y_mis.copy() if self.s_ymis is None else self.s_ymis + y_mis

    def add_exact(self, means, covs, lag_covs):
        """Load exact smoothed moments as a single unit-weight entry."""
        if self.obs1_rows.size:
            raise ValueError("exact moments only apply when no observed row has a missing lag")
        self.count = 1
        self._s_theta = means.copy()
        self._s_outer = covs + np.einsum("ti,tj->tij", means, means)
        self._s_cross = np.zeros_like(covs)
        self._s_cross[1:] = lag_covs[1:] + np.einsum("ti,tj->tij", means[1:], means[:-1])

    # Monte Carlo estimators
    @property
    def theta_tilde(self) -> np.ndarray:
        return self.s_theta / self.count

    @property
    def P_tilde(self) -> np.ndarray:
        m = self.theta_tilde
        P = self.s_outer / self.count - np.einsum("ti,tj->tij", m, m)
        return 0.5 * (P + P.transpose(0, 2, 1))

    @property
    def P_lag_tilde(self) -> np.ndarray:
        """``P_lag_tilde[i]`` estimates ``Cov(theta_i, theta_{i-1})``; entry 0 unused."""
        m = self.theta_tilde
        out = np.zeros_like(self.s_cross)
        out[1:] = self.s_cross[1:] / self.count - np.einsum("ti,tj->tij", m[1:], m[:-1])
        return out

    @property
    def Eb(self) -> np.ndarray:
        return self.s_b / self.count

    @property
    def var_b(self) -> np.ndarray:
        return np.maximum(self.s_b2 / self.count - self.Eb**2, 0.0)

    def cov_ab(self, F0) -> np.ndarray:
        """Covariance of ``a = F0 theta`` and ``b`` on the partially observed rows."""
        Ea = np.einsum("ij,ij->i", F0, self.theta_tilde[self.obs1_rows + 1])
        return self.s_ab / self.count - Ea * self.Eb

    @property
    def y_mis_mean(self):
        return None if self.s_ymis is None else self.s_ymis / self.count


@dataclass
class Chain:
    """Retained draws of the last E-step.

    ``theta0`` holds the prior-state draws of every coordinate (static
    coordinates are constant along the path). ``paths`` holds full paths of
    the random-walk coordinates only, indexed by ``free_idx``.
    """

    theta0: np.ndarray
    paths: np.ndarray
    free_idx: np.ndarray
    y_mis: np.ndarray
    ssr: np.ndarray | None = None  # per-draw residual sum of squares over observed rows
    incr2: np.ndarray | None = None  # per-draw sum over t of squared increments, free coordinates

    def __len__(self):
        return self.theta0.shape[0]


@dataclass
class EStepResult:
    acc: MomentAccumulator
    chain: Chain | None
    state: GibbsState


def _obs1_lag_slots(state: GibbsState) -> np.ndarray:
    rows = state.obs1_rows
    return state.design.lag_missing[rows] if rows.size else np.zeros((0, state.design.d), bool)


def _static_draw(theta: Theta, X, y, use, prec0, b0, z):
    Xo, yo = X[use], y[use]
    A = prec0 + (Xo.T @ Xo) / theta.R
    rhs = b0 + (Xo.T @ yo) / theta.R
    L = np.linalg.cholesky(A)
    mean = np.linalg.solve(L.T, np.linalg.solve(L, rhs))
    return mean + np.linalg.solve(L.T, z)


def e_step(theta: Theta, state: GibbsState, M: int, rng: np.random.Generator, burn_in: int = 20,
           sampler: str = "full", keep_chain: bool = True, exact: bool | None = None) -> EStepResult:
    """Run ``burn_in + M`` Gibbs sweeps from ``state`` and accumulate moments.

    Each sweep fills the lag slots with the current missing-outcome draws,
    draws a coefficient path by FFBS, then draws every missing outcome in
    increasing time order. ``state`` is updated in place and carries the
    last imputations into the next call.
    """
    X = state.design.X
    n, d = X.shape
    free = state.design.free
    free_idx = np.flatnonzero(free)
    acc = MomentAccumulator(n, d, state.obs1_rows, _obs1_lag_slots(state))
    if exact is None:
        exact = state.exact
    lag_cols = state.design.lag_cols
    q = state.spec.q
    mis_rows = state.mis_rows
    n_mis = mis_rows.size
    full = sampler == "full"

    theta0 = np.empty((M, d)) if keep_chain else None
    paths = np.empty((M, n + 1, free_idx.size), dtype=np.float32) if keep_chain else None
    ymis = np.empty((M, n_mis)) if keep_chain else None
    ssr = np.empty(M) if keep_chain else None
    incr2 = np.empty((M, free_idx.size)) if keep_chain else None
    obs_idx = np.flatnonzero(state.observed)

    def record(m, path):
        theta0[m] = path[0]
        paths[m] = path[:, free_idx]
        r = state.y_rows[obs_idx] - np.einsum("ij,ij->i", X[obs_idx], path[obs_idx + 1])
        ssr[m] = r @ r
        if free_idx.size:
            inc = np.diff(path[:, free_idx], axis=0)
            incr2[m] = np.einsum("ij,ij->j", inc, inc)

    if exact:
        fr = kalman_filter(theta, X, state.y_rows, state.observed)
        sm = kalman_smoother(fr)
        acc.add_exact(sm.means, sm.covs, sm.lag_covs)
        if keep_chain:
            sd = np.sqrt(theta.R)
            for m in range(M):
                path = kernels.ffbs_backward(fr.m_filt, fr.P_filt, fr.Q, rng.standard_normal((n + 1, d)))
                record(m, path)
                ymis[m] = np.einsum("ij,ij->i", X[mis_rows], path[mis_rows + 1]) + sd * rng.standard_normal(n_mis)
        chain = Chain(theta0, paths, free_idx, ymis, ssr, incr2) if keep_chain else None
        return EStepResult(acc, chain, state)

    static = free_idx.size == 0 and np.all(np.linalg.eigvalsh(theta.sigma0) > 0)
    if static:
        prec0 = np.linalg.inv(theta.sigma0)
        b0 = prec0 @ theta.mu0
    use = np.ones(n, bool) if full else state.observed
    y = state.y
    obs_u8 = use.astype(np.uint8)
    path = np.empty((n + 1, d))
    for sweep in range(burn_in + M):
        y_rows = y[q:]
        try:
            if static:
                path[:] = _static_draw(theta, X, y_rows, use, prec0, b0, rng.standard_normal(d))
            else:
                m_f, P_f, _ = kernels.kalman_filter(
                    X, np.where(use, y_rows, 0.0), obs_u8, theta.mu0, theta.sigma0, theta.Q, theta.R
                )
                path = kernels.ffbs_backward(m_f, P_f, theta.Q, rng.standard_normal((n + 1, d)))
        except (NumericalError, np.linalg.LinAlgError) as exc:
            raise NumericalError(f"E-step sweep {sweep}: {exc}") from exc
        if n_mis:
            kernels.draw_missing(X, y, path, theta.R, mis_rows, lag_cols, q, rng.standard_normal(n_mis), full)
        if sweep >= burn_in:
            m = sweep - burn_in
            acc.add(path, X, y[q + mis_rows] if n_mis else None, constant=static)
            if keep_chain:
                record(m, path)
                ymis[m] = y[q + mis_rows]
    chain = Chain(theta0, paths, free_idx, ymis, ssr, incr2) if keep_chain else None
    return EStepResult(acc, chain, state)


# --------------------------------------------------------------------------
# M-step and Q-function


def _observed_terms(acc: MomentAccumulator, state: GibbsState):
    """Per-row expected squared residuals over rows with an observed outcome."""
    X = state.design.X
    y_rows = state.y_rows
    m = acc.theta_tilde
    P = acc.P_tilde
    obs = state.observed.copy()
    obs1 = acc.obs1_rows
    obs0 = np.flatnonzero(obs & ~np.isin(np.arange(len(obs)), obs1))
    th0 = m[obs0 + 1]
    F = X[obs0]
    resid0 = y_rows[obs0] - np.einsum("ij,ij->i", F, th0)
    quad0 = np.einsum("ij,ijk,ik->i", F, P[obs0 + 1], F)
    total = float(resid0 @ resid0 + quad0.sum())
    if obs1.size:
        F0 = np.where(acc.lag_slots, 0.0, X[obs1])
        th1 = m[obs1 + 1]
        quad1 = np.einsum("ij,ijk,ik->i", F0, P[obs1 + 1], F0)
        resid1 = y_rows[obs1] - np.einsum("ij,ij->i", F0, th1) - acc.Eb
        total += float(quad1.sum() + resid1 @ resid1 + 2.0 * acc.cov_ab(F0).sum() + acc.var_b.sum())
    return total, int(obs.sum())


def m_step(acc: MomentAccumulator, state: GibbsState) -> Theta:
    """Closed-form updates of ``(mu0, sigma0, Q, R)`` with identity transition.

    ``Q`` is projected onto a diagonal with zeros on static coordinates.
    """
    m = acc.theta_tilde
    P = acc.P_tilde
    mu0 = m[0].copy()
    dev = m[0] - mu0
    sigma0 = P[0] + np.outer(dev, dev)
    sigma0 = 0.5 * (sigma0 + sigma0.T)

    n = acc.n
    S11 = acc.s_outer[1:] / acc.count
    S10 = acc.s_cross[1:] / acc.count
    S00 = acc.s_outer[:-1] / acc.count
    Qfull = (S11 - S10 - S10.transpose(0, 2, 1) + S00).sum(axis=0) / n
    free = state.design.free
    Q = np.diag(np.where(free, np.maximum(np.diag(Qfull), 0.0), 0.0))

    total, n_obs = _observed_terms(acc, state)
    R = total / n_obs
    if not np.isfinite(R) or R < -1e-10:
        raise NumericalError(f"M-step produced invalid observation variance {R!r}")
    if R <= R_FLOOR:
        warnings.warn(f"observation variance {R:.3g} at the boundary; floored at {R_FLOOR}", RuntimeWarning)
        R = R_FLOOR
    return Theta(mu0, sigma0, Q, R)


def q_function(theta: Theta, acc: MomentAccumulator, state: GibbsState) -> float:
    """Monte Carlo estimate of the expected complete-data log-likelihood.

    Constants are dropped and singular ``sigma0``/``Q`` are handled by
    pseudo-determinant on their support, as in ``complete_data_loglik``.
    """
    m = acc.theta_tilde
    S00 = acc.s_outer[0] / acc.count
    E0 = S00 - np.outer(m[0], theta.mu0) - np.outer(theta.mu0, m[0]) + np.outer(theta.mu0, theta.mu0)
    val = _expected_gauss(E0, theta.sigma0, 1)
    S11 = acc.s_outer[1:] / acc.count
    S10 = acc.s_cross[1:] / acc.count
    S00t = acc.s_outer[:-1] / acc.count
    D = (S11 - S10 - S10.transpose(0, 2, 1) + S00t).sum(axis=0)
    val += _expected_gauss(D, theta.Q, acc.n)
    total, n_obs = _observed_terms(acc, state)
    val += -0.5 * n_obs * np.log(theta.R) - 0.5 * total / theta.R
    return float(val)


def _expected_gauss(E, M, count):
    """``-count/2 log|M|_+ - tr(M^+ E)/2`` on the support of ``M``."""
    # reuse the pseudo-determinant logic with a zero deviation, then add the trace
    base = _gauss_term(np.zeros((1, M.shape[0])), M, count=count)
    diag = np.diag(M)
    idx = np.flatnonzero(diag > 1e-12 * max(1.0, diag.max() if diag.size else 0.0))
    if idx.size == 0:
        return base
    inv = np.linalg.inv(M[np.ix_(idx, idx)])
    return base - 0.5 * float(np.sum(inv * E[np.ix_(idx, idx)]))


# --------------------------------------------------------------------------
# Credible intervals


def credible_intervals(chain, level: float = 0.95):
    """Equal-tailed empirical intervals along the first (draw) axis.

    Returns ``(lower, upper)`` with the shape of one draw.
    """
    chain = np.asarray(chain, dtype=float)
    if chain.ndim == 0 or chain.shape[0] < 20:
        raise ConfigError("credible intervals need at least 20 draws")
    if not 0 < level < 1:
        raise ConfigError("level must lie in (0, 1)")
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(chain, [alpha, 1.0 - alpha], axis=0)
    return lo, hi


# --------------------------------------------------------------------------
# Initialization


def initial_theta(state: GibbsState, cfg: MCEMConfig) -> Theta:
    """Deterministic starting values.

    Static coefficients start from OLS on complete rows (or all observed rows
    with interpolated lags when too few rows are complete). When the model
    has random-walk coordinates, ``Q`` and ``R`` are then set by maximizing
    the Kalman log-likelihood of the observed rows (lags interpolated), and
    ``mu0`` by the smoothed prior state of that fit.
    """
    X, y_rows, d = state.design.X, state.y_rows, state.design.d
    rows = state.complete_rows
    if rows.size < max(2 * d, d + 10):
        rows = np.flatnonzero(state.observed)
    if rows.size <= d:
        raise DataError(f"only {rows.size} usable rows for {d} coefficients")
    Xr, yr = X[rows], y_rows[rows]
    beta, *_ = np.linalg.lstsq(Xr, yr, rcond=None)
    resid = yr - Xr @ beta
    R = max(float(resid @ resid) / (rows.size - d), R_FLOOR)
    free = state.design.free
    theta = Theta(beta, cfg.sigma0_init * np.eye(d), np.diag(np.where(free, cfg.q_init, 0.0)), R)
    if free.any():
        start = _difference_start(state, cfg)
        theta = start if start is not None else _warm_start(theta, state, free)
    return theta


def _intercept_column(state: GibbsState):
    names = state.design.names
    if "intercept" not in names:
        return None
    j = names.index("intercept")
    return j if np.all(state.design.X[:, j] == 1.0) else None


def _difference_start(state: GibbsState, cfg: MCEMConfig):
    """Start for models whose only random-walk coefficient is the intercept.

    First differences of adjacent complete rows remove the intercept walk, so
    OLS on them estimates the static coefficients. With those held fixed the
    complete rows follow a local-level model, whose ``(Q, R)`` are fitted by
    maximum likelihood and whose smoothed initial level gives ``mu0``.
    Returns None when not applicable.
    """
    from scipy.optimize import minimize

    free = state.design.free
    j = _intercept_column(state)
    if j is None or not free[j] or free.sum() != 1:
        return None
    X, y, d = state.design.X, state.y_rows, state.design.d
    complete = np.zeros(state.n, bool)
    complete[state.complete_rows] = True
    pair = complete[1:] & complete[:-1]
    static = np.flatnonzero(~free)
    if pair.sum() < static.size + 10:
        return None
    dX = (X[1:, static] - X[:-1, static])[pair]
    dy = (y[1:] - y[:-1])[pair]
    beta, *_ = np.linalg.lstsq(dX, dy, rcond=None)
    e = dy - dX @ beta

    level = np.where(complete, y - X[:, static] @ beta, 0.0)
    ones = np.ones((state.n, 1))
    first = level[complete][0]
    prior_var = 100.0 * max(float(np.var(level[complete])), 1.0)

    def local_level(x):
        return Theta(np.array([first]), np.array([[prior_var]]), np.array([[np.exp(x[0])]]), float(np.exp(x[1])))

    def nll(x):
        try:
            return -kalman_filter(local_level(x), ones, level, complete).loglik
        except NumericalError:
            return np.inf

    # var(e) = Q + 2R for adjacent rows; start from an even split
    v = max(float(np.var(e)), 1e-6)
    out = minimize(nll, np.log([0.5 * v, 0.25 * v]), method="Nelder-Mead", options={"xatol": 1e-4, "fatol": 1e-6})
    fit = local_level(out.x)
    sm = kalman_smoother(kalman_filter(fit, ones, level, complete))
    mu0 = np.zeros(d)
    mu0[static] = beta
    mu0[j] = sm.means[0, 0]
    Q = np.zeros((d, d))
    Q[j, j] = max(float(fit.Q[0, 0]), 1e-8)
    # EM cannot leave R = 0, so keep the start interior
    return Theta(mu0, cfg.sigma0_init * np.eye(d), Q, max(fit.R, 0.05 * v, R_FLOOR))


def _warm_start(theta: Theta, state: GibbsState, free, rounds: int = 3) -> Theta:
    """Maximize the filter likelihood over ``(Q_free, R)``, then re-centre ``mu0``.

    Only fully observed rows enter when there are enough of them, so no
    interpolated lag is used as a regressor.
    """
    from scipy.optimize import minimize

    X = state.design.X
    d = X.shape[1]
    use = np.zeros(state.n, bool)
    use[state.complete_rows] = True
    if use.sum() < max(2 * d, d + 10):
        use = state.observed.copy()
    y_rows = np.where(use, state.y_rows, 0.0)
    fidx = np.flatnonzero(free)
    mu0 = theta.mu0.copy()

    # diffuse prior scaled to each regressor: sd = 10 * sd(y) / rms(x_j)
    rms = np.sqrt(np.mean(X[use] ** 2, axis=0))
    rms[rms == 0] = 1.0
    sigma0 = np.diag(100.0 * max(float(np.var(state.y)), 1e-8) / rms**2)

    def unpack(x):
        Q = np.zeros((d, d))
        Q[fidx, fidx] = np.exp(x[:-1])
        return Theta(mu0, sigma0, Q, float(np.exp(x[-1])))

    def nll(x):
        try:
            return -kalman_filter(unpack(x), X, y_rows, use).loglik
        except NumericalError:
            return np.inf

    opts = {"xatol": 1e-4, "fatol": 1e-6, "maxiter": 600}
    # the likelihood can have a near-unit-root mode with tiny Q; start from several scales
    scale = float(np.var(np.diff(state.y)))
    starts = [np.log(np.diag(theta.Q)[free])] + [np.full(fidx.size, np.log(f * scale)) for f in (1e-3, 1e-2, 1e-1, 1.0)]
    x, fbest = None, np.inf
    for lq in starts:
        xs = np.concatenate([lq, [np.log(theta.R)]])
        out = minimize(nll, xs, method="Nelder-Mead", options=opts)
        if out.fun < fbest:
            x, fbest = out.x, out.fun
    if x is None:
        x = np.concatenate([np.log(np.diag(theta.Q)[free]), [np.log(theta.R)]])
    for k in range(rounds):
        if k:
            best = minimize(nll, x, method="Nelder-Mead", options=opts)
            if np.isfinite(best.fun) and best.fun <= nll(x):
                x = best.x
        sm = kalman_smoother(kalman_filter(unpack(x), X, y_rows, use))
        mu0 = sm.means[0].copy()
    fitted = unpack(x)
    Q = fitted.Q.copy()
    Q[fidx, fidx] = np.maximum(Q[fidx, fidx], 1e-8)
    return Theta(mu0, theta.sigma0, Q, max(fitted.R, R_FLOOR))


# --------------------------------------------------------------------------
# Change-point refresh


def _filled_design(acc: MomentAccumulator, state: GibbsState) -> np.ndarray:
    """Design with mean imputations in the lag slots."""
    design = state.design
    X = design.X.copy()
    ym = acc.y_mis_mean
    if ym is not None and state.mis_rows.size:
        q = state.spec.q
        yfull = state.y.copy()
        yfull[q + state.mis_rows] = ym
        for k, col in enumerate(design.lag_cols, start=1):
            X[:, col] = yfull[np.arange(len(design)) + q - k]
    return X


def _leave_one_out_free(theta: Theta, state: GibbsState, X, static_values):
    """Means and covariances of the random-walk coordinates at each row given all other rows.

    Static coordinates are held at ``static_values``. Combines a forward and
    a time-reversed filter, so a row's own outcome never informs its state.
    """
    free = state.design.free
    F, S = np.flatnonzero(free), np.flatnonzero(~free)
    obs = state.observed
    ys = np.where(obs, state.y_rows - X[:, S] @ static_values, 0.0)
    Xf = np.ascontiguousarray(X[:, F])
    Q = theta.Q[np.ix_(F, F)]
    fwd = kalman_filter(Theta(theta.mu0[F], theta.sigma0[np.ix_(F, F)], Q, theta.R), Xf, ys, obs)
    diffuse = 100.0 * max(float(np.var(ys[obs])) if obs.any() else 1.0, 1.0)
    bwd = kalman_filter(Theta(np.zeros(F.size), diffuse * np.eye(F.size), Q, theta.R), Xf[::-1], ys[::-1], obs[::-1])
    Pf, Pb = fwd.P_pred, bwd.P_pred[::-1]
    mf, mb = fwd.m_pred, bwd.m_pred[::-1]
    Hf, Hb = np.linalg.inv(Pf), np.linalg.inv(Pb)
    P = np.linalg.inv(Hf + Hb)
    m = np.einsum("ijk,ik->ij", P, np.einsum("ijk,ik->ij", Hf, mf) + np.einsum("ijk,ik->ij", Hb, mb))
    return F, m, P


def _detection_series(X, state: GibbsState, theta: Theta, static_mean, base: str):
    """Standardized partial residuals of one periodic coefficient's regressor.

    Returns ``(z, w)`` with ``z_t = r_t / a_t`` and ``w_t = a_t^2 / s_t^2``.
    ``r_t`` removes every other coefficient's contribution from ``y_t``;
    random-walk coordinates enter through their leave-one-out means so they
    cannot absorb a shift in the slope, and ``s_t^2`` is the matching
    predictive variance. The weighted mean-shift cost on ``z`` is then the
    standardized least-squares cost of a piecewise-constant slope on ``a``.
    """
    design = state.design
    cols = np.array([o[0] == base for o in design.origin])
    free = design.free
    mean0 = np.zeros(design.d)
    S = np.flatnonzero(~free)
    mean0[S] = static_mean
    keep = S[~cols[S]]
    other = X[:, keep] @ mean0[keep]
    s2 = np.full(state.n, theta.R)
    if free.any():
        F, m, P = _leave_one_out_free(theta, state, X, static_mean)
        other = other + np.einsum("ij,ij->i", X[:, F], m)
        s2 = s2 + np.einsum("ij,ijk,ik->i", X[:, F], P, X[:, F])
    a = X[:, cols].sum(axis=1)
    r = state.y_rows - other
    w = np.where(state.observed, a * a / s2, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(w > 0, r / np.where(a == 0, 1.0, a), 0.0)
    return z, w


def refresh_segments(acc: MomentAccumulator | None, state: GibbsState, theta: Theta, cfg: MCEMConfig):
    """Re-detect segments of every periodic coefficient.

    Uses the E-step moments when ``acc`` is given, else the current fills
    and ``theta.mu0``. Returns ``(spec, changed, estimates)`` where
    ``estimates`` maps new expanded names to a starting value.
    """
    spec = state.spec
    n = state.n
    times = state.design.times
    new_segments = {}
    starts = {}
    penalty = 2.0 * np.log(n) * cfg.penalty_scale
    static = ~state.design.free
    if acc is None:
        X, static_mean = state.design.X, theta.mu0[static]
    else:
        X, static_mean = _filled_design(acc, state), acc.theta_tilde[0][static]
    for base in spec.periodic:
        z, w = _detection_series(X, state, theta, static_mean, base)
        seg = detect_changepoints(z, penalty, cfg.min_segment_length, weights=w)
        cps = tuple(int(times[c - 1]) for c in seg.change_points)
        new_segments[base] = cps
        for k, (lo, hi) in enumerate(seg.segments):
            ws = w[lo:hi]
            starts[f"{base}[{k + 1}]"] = float(ws @ z[lo:hi] / ws.sum()) if ws.sum() > 0 else 0.0
    changed = any(tuple(spec.segments.get(b, ())) != v for b, v in new_segments.items())
    return spec.with_segments(new_segments), changed, starts


def remap_theta(theta: Theta, old_names, new_names, starts, cfg: MCEMConfig) -> Theta:
    """Carry parameters across a change of expanded coordinates."""
    d = len(new_names)
    mu0 = np.zeros(d)
    sigma0 = cfg.sigma0_init * np.eye(d)
    Q = np.zeros((d, d))
    pos = {nm: j for j, nm in enumerate(old_names)}
    keep = [(j, pos[nm]) for j, nm in enumerate(new_names) if nm in pos and nm not in starts]
    for j, nm in enumerate(new_names):
        if nm in starts:
            mu0[j] = starts[nm]
    for j, i in keep:
        mu0[j] = theta.mu0[i]
        Q[j, j] = theta.Q[i, i]
        for k, l in keep:
            sigma0[j, k] = theta.sigma0[i, l]
    return Theta(mu0, sigma0, Q, theta.R)


# --------------------------------------------------------------------------
# Driver


@dataclass
class MCEMResult:
    """Fitted parameters, coefficient summaries and diagnostics.

    ``estimates`` and ``intervals`` are keyed by expanded coefficient name
    (periodic coefficients appear once per segment as ``name[k]``).
    Random-walk coefficients carry their smoothed path in ``trajectories``
    and per-time intervals in ``path_intervals``.
    """

    theta: Theta
    spec: ModelSpec
    names: list[str]
    roles: list[str]
    origin: list[tuple[str, int, int]]
    times: np.ndarray
    estimates: dict[str, float]
    intervals: dict[str, tuple[float, float]]
    trajectories: dict[str, np.ndarray]
    path_intervals: dict[str, tuple[np.ndarray, np.ndarray]]
    change_points: dict[str, tuple[int, ...]]
    trace: list[dict]
    converged: bool
    chain: Chain
    y_imputed: np.ndarray
    pattern: MissingPattern
    level: float = 0.95
    posterior_sd: dict[str, float] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def coefficient_at(self, base: str, t: int) -> float:
        """Point estimate of a (possibly time-varying) coefficient at time ``t``."""
        if base in self.trajectories:
            return float(self.trajectories[base][int(np.searchsorted(self.times, t))])
        for nm, (b, lo, hi) in zip(self.names, self.origin):
            if b == base and t > lo and (hi < 0 or t <= hi):
                return self.estimates[nm]
        raise KeyError(base)

    def segment_name(self, base: str, t: int) -> str:
        """Expanded name of the segment of ``base`` covering time ``t``."""
        for nm, (b, lo, hi) in zip(self.names, self.origin):
            if b == base and t > lo and (hi < 0 or t <= hi):
                return nm
        raise KeyError(base)


def _tracked(theta: Theta, free) -> np.ndarray:
    return np.concatenate([theta.mu0[~free], np.diag(theta.Q)[free], [theta.R]])


def batch_means_se(x, n_batches=None) -> np.ndarray:
    """Monte Carlo standard error of the mean of a correlated chain (batch means)."""
    x = np.asarray(x, dtype=float)
    M = x.shape[0]
    b = n_batches or max(int(np.sqrt(M)), 2)
    size = M // b
    if size < 1:
        return np.full(x.shape[1:], np.inf)
    means = x[: b * size].reshape((b, size) + x.shape[1:]).mean(axis=1)
    return means.std(axis=0, ddof=1) / np.sqrt(b)


def _mc_errors(theta_new: Theta, chain: Chain | None, free, n_obs: int):
    """Standard errors of the tracked parameters and of the Q-function value."""
    k = int((~free).sum() + free.sum() + 1)
    if chain is None:
        return np.zeros(k), 0.0
    n = chain.paths.shape[1] - 1
    per_draw = np.column_stack([chain.theta0[:, ~free], chain.incr2 / n, chain.ssr / n_obs])
    dev = chain.theta0 - theta_new.mu0
    lq = -0.5 * chain.ssr / theta_new.R
    static = ~free
    if static.any():
        # prior term on the support of sigma0
        S = theta_new.sigma0[np.ix_(static, static)]
        lq = lq - 0.5 * np.einsum("mi,ij,mj->m", dev[:, static], np.linalg.pinv(S), dev[:, static])
    if free.any():
        qd = np.diag(theta_new.Q)[free]
        pos = qd > 0
        lq = lq - 0.5 * (chain.incr2[:, pos] / qd[pos]).sum(axis=1)
    return batch_means_se(per_draw), float(batch_means_se(lq))


def run_mcem(dataset: TimeSeriesDataset, spec: ModelSpec, cfg: MCEMConfig | None = None, rows=None) -> MCEMResult:
    """Fit the model by Monte Carlo EM.

    ``rows`` optionally restricts the fit to a set of fully observed design
    rows, which are then treated as consecutive time points.

    Raises
    ------
    DataError
        If no outcome is observed after the first ``q`` time points.
    NumericalError
        If a filter pass or M-step breaks down.
    """
    cfg = cfg or MCEMConfig()
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    state = GibbsState.initial(dataset, spec, rows=rows)
    if cfg.theta_init is not None:
        theta = cfg.theta_init.copy()
    else:
        theta = initial_theta(state, cfg)
        # settle segments before the first E-step; a few rounds suffice
        for _ in range(3 if spec.periodic else 0):
            new_spec, changed, _ = refresh_segments(None, state, theta, cfg)
            if not changed:
                break
            state = state.with_spec(new_spec)
            theta = initial_theta(state, cfg)
    if theta.d != state.design.d:
        raise ConfigError(f"theta_init has dimension {theta.d}, design has {state.design.d}")
    theta.validate(state.design.free)
    # a compressed row set has no missing outcomes to sample
    exact = (cfg.exact_when_possible or rows is not None) and state.exact
    n_obs = int(state.observed.sum())
    trace = []
    passes = 0
    converged = False
    prev_q = prev_se = prev_qse = None
    res = None
    M = cfg.m_initial
    for j in range(cfg.max_outer_iterations):
        M = cfg.draws(j)
        free = state.design.free
        # exact moments need no chain until the end
        res = e_step(theta, state, M, rng, cfg.burn_in, cfg.sampler, keep_chain=not exact, exact=exact)
        new = m_step(res.acc, state)
        if cfg.hold_sigma0:
            new.sigma0 = theta.sigma0.copy()
        qval = q_function(new, res.acc, state)
        delta = np.abs(_tracked(new, free) - _tracked(theta, free))
        se, qse = _mc_errors(new, res.chain, free, n_obs)
        dq = abs(qval - prev_q) if prev_q is not None else np.inf
        rel = dq / max(abs(prev_q), 1e-12) if prev_q is not None else np.inf
        param_ok = delta < cfg.tol_params
        q_ok = rel < cfg.tol_loglik
        if cfg.mc_error_aware and prev_se is not None and prev_se.shape == se.shape:
            # changes indistinguishable from Monte Carlo noise also count as passes
            param_ok |= delta < 2.0 * np.sqrt(se**2 + prev_se**2)
            q_ok = q_ok or dq < 2.0 * np.hypot(qse, prev_qse)
        seg_changed = False
        if spec.periodic:
            new_spec, seg_changed, starts = refresh_segments(res.acc, state, new, cfg)
            if seg_changed:
                old_names = state.design.names
                state = state.with_spec(new_spec)
                new = remap_theta(new, old_names, state.design.names, starts, cfg)
        ok = (not seg_changed) and q_ok and bool(np.all(param_ok))
        passes = passes + 1 if ok else 0
        trace.append(
            {
                "iteration": j + 1,
                "M": M,
                "q_value": qval,
                "rel_change": rel,
                "max_param_change": float(delta.max()),
                "max_mc_se": float(se.max()) if se.size else 0.0,
                "R": new.R,
                "segments_changed": seg_changed,
                "passes": passes,
            }
        )
        log.debug("iteration %d M=%d Q=%.6f dparam=%.3g", j + 1, M, qval, float(delta.max()))
        prev_q = None if seg_changed else qval
        prev_se, prev_qse = (None, None) if seg_changed else (se, qse)
        theta = new
        if passes >= cfg.consecutive_passes:
            converged = True
            break

    need_chain = res.chain is None or res.state is not state or cfg.m_final is not None
    if need_chain:
        M_final = cfg.m_final if cfg.m_final is not None else M
        if exact:
            # summaries are analytic; the chain only serves imputations
            M_final = min(M_final, EXACT_CHAIN_DRAWS)
        res = e_step(theta, state, M_final, rng, cfg.burn_in, cfg.sampler, True, exact)
    return _summarize(theta, state, res, trace, converged, cfg, exact)


def _gaussian_summary(theta: Theta, state: GibbsState, level: float):
    """Smoothed means with equal-tailed normal intervals (exact mode)."""
    from scipy.stats import norm

    sm = kalman_smoother(kalman_filter(theta, state.design.X, state.y_rows, state.observed))
    sd = np.sqrt(np.maximum(np.einsum("tii->ti", sm.covs), 0.0))
    z = norm.ppf(0.5 + level / 2.0)
    return sm.means, sm.means - z * sd, sm.means + z * sd, sd


def _summarize(theta, state, res, trace, converged, cfg, exact=False) -> MCEMResult:
    design = state.design
    chain = res.chain
    free = design.free
    names = design.names
    estimates, intervals, trajectories, path_intervals, sds = {}, {}, {}, {}, {}
    if exact:
        means, lo_all, hi_all, sd_all = _gaussian_summary(theta, state, cfg.level)
        mean0, lo, hi, sd0 = means[0], lo_all[0], hi_all[0], sd_all[0]
    else:
        lo, hi = credible_intervals(chain.theta0, cfg.level)
        mean0 = chain.theta0.mean(axis=0)
        sd0 = chain.theta0.std(axis=0, ddof=1)
    for j, nm in enumerate(names):
        if free[j]:
            continue
        est = float(mean0[j])
        estimates[nm] = est
        sds[nm] = float(sd0[j])
        intervals[nm] = (min(float(lo[j]), est), max(float(hi[j]), est))
    if chain.free_idx.size:
        if exact:
            pm, plo, phi = (a[:, chain.free_idx] for a in (means, lo_all, hi_all))
        else:
            plo, phi = credible_intervals(chain.paths, cfg.level)
            pm = chain.paths.mean(axis=0, dtype=float)
        for k, j in enumerate(chain.free_idx):
            nm = names[j]
            trajectories[nm] = pm[1:, k]
            path_intervals[nm] = (plo[1:, k], phi[1:, k])
            estimates[nm] = float(pm[1:, k].mean())
    y_imp = state.y.copy()
    if chain.y_mis.shape[1]:
        y_imp[state.spec.q + state.mis_rows] = chain.y_mis.mean(axis=0)
    cps = {b: tuple(state.spec.segments.get(b, ())) for b in state.spec.periodic}
    return MCEMResult(
        theta=theta,
        spec=state.spec,
        names=list(names),
        roles=list(design.roles),
        origin=list(design.origin),
        times=design.times,
        estimates=estimates,
        intervals=intervals,
        trajectories=trajectories,
        path_intervals=path_intervals,
        change_points=cps,
        trace=trace,
        converged=converged,
        chain=chain,
        y_imputed=y_imp,
        pattern=state.pattern,
        level=cfg.level,
        posterior_sd=sds,
        extra={"exact": bool(exact)},
    )
