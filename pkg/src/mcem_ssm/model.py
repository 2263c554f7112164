"""Data containers, model specification and design-row construction.

The outcome at time ``t`` depends on an intercept, ``q`` lagged outcomes,
exposures at lags ``0..p`` and covariates at lags ``0..o``. Each coefficient
is a state coordinate with one of three roles:

* ``static`` -- constant over time (zero state noise),
* ``random-walk`` -- ``theta_t = theta_{t-1} + w_t``,
* ``periodic-stable`` -- piecewise constant; encoded as one static
  coefficient per segment by splitting its design column.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, DataError

ROLES = ("static", "random-walk", "periodic-stable")


@dataclass
class TimeSeriesDataset:
    """One subject's series. ``y`` holds NaN where the outcome is missing."""

    y: np.ndarray
    exposures: dict[str, np.ndarray] = field(default_factory=dict)
    covariates: dict[str, np.ndarray] = field(default_factory=dict)
    time: np.ndarray | None = None

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        T = self.y.shape[0]
        self.exposures = {k: np.asarray(v, dtype=float) for k, v in self.exposures.items()}
        self.covariates = {k: np.asarray(v, dtype=float) for k, v in self.covariates.items()}
        for name, v in {**self.exposures, **self.covariates}.items():
            if v.shape != (T,):
                raise DataError(f"series {name!r} has length {v.shape[0]}, expected {T}")
            if not np.all(np.isfinite(v)):
                raise DataError(f"series {name!r} contains missing values")
        if self.time is None:
            self.time = np.arange(1, T + 1)
        else:
            self.time = np.asarray(self.time)
            if self.time.shape != (T,):
                raise DataError("time index length does not match outcome")

    @property
    def T(self) -> int:
        return self.y.shape[0]

    @property
    def missing(self) -> np.ndarray:
        return np.isnan(self.y)

    def with_outcome(self, y) -> "TimeSeriesDataset":
        return replace(self, y=np.asarray(y, dtype=float))


@dataclass(frozen=True)
class ModelSpec:
    """Lag orders, coefficient roles and periodic segment boundaries.

    ``roles`` maps coefficient names to a role; unnamed coefficients are
    static. ``segments`` maps each periodic-stable coefficient to its
    strictly increasing change points ``c`` (a segment ends at ``t <= c``).
    """

    q: int = 1
    p: int = 0
    o: int = 0
    exposures: tuple[str, ...] = ()
    covariates: tuple[str, ...] = ()
    roles: Mapping[str, str] = field(default_factory=dict)
    segments: Mapping[str, tuple[int, ...]] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "exposures", tuple(self.exposures))
        object.__setattr__(self, "covariates", tuple(self.covariates))
        object.__setattr__(self, "roles", dict(self.roles))
        object.__setattr__(
            self, "segments", {k: tuple(int(c) for c in v) for k, v in self.segments.items()}
        )
        if self.q < 1:
            raise ConfigError("outcome lag order q must be >= 1")
        if self.p < 0 or self.o < 0:
            raise ConfigError("lag orders p and o must be >= 0")
        names = self.names
        if len(set(names)) != len(names):
            raise ConfigError("duplicate coefficient names; rename exposures/covariates")
        for name, role in self.roles.items():
            if name not in names:
                raise ConfigError(f"role given for unknown coefficient {name!r}")
            if role not in ROLES:
                raise ConfigError(f"unknown role {role!r} for {name!r}")
        for name, cps in self.segments.items():
            if self.role(name) != "periodic-stable":
                raise ConfigError(f"segments given for non-periodic coefficient {name!r}")
            if any(b <= a for a, b in zip(cps, cps[1:])):
                raise ConfigError(f"change points for {name!r} must be strictly increasing")

    @property
    def names(self) -> list[str]:
        out = ["intercept"] + [f"y_lag{k}" for k in range(1, self.q + 1)]
        for a in self.exposures:
            out += [a if k == 0 else f"{a}_lag{k}" for k in range(self.p + 1)]
        for c in self.covariates:
            out += [c if k == 0 else f"{c}_lag{k}" for k in range(self.o + 1)]
        return out

    @property
    def d(self) -> int:
        return 1 + self.q + (self.p + 1) * len(self.exposures) + (self.o + 1) * len(self.covariates)

    def role(self, name: str) -> str:
        return self.roles.get(name, "static")

    @property
    def periodic(self) -> list[str]:
        return [n for n in self.names if self.role(n) == "periodic-stable"]

    def with_segments(self, segments: Mapping[str, Sequence[int]]) -> "ModelSpec":
        merged = dict(self.segments)
        merged.update({k: tuple(v) for k, v in segments.items()})
        return replace(self, segments=merged)

    def check_segments(self, T: int):
        for name, cps in self.segments.items():
            if cps and (cps[0] < 1 or cps[-1] >= T):
                raise ConfigError(f"change points for {name!r} must lie inside 1..{T - 1}")

    def expanded(self) -> tuple[list[str], list[str], list[tuple[str, int, int]]]:
        """Names and roles after segment expansion.

        Returns ``(names, roles, origin)`` where ``origin[j]`` is
        ``(base_name, segment_lo, segment_hi)`` with the segment covering
        ``lo < t <= hi`` (``hi = -1`` meaning unbounded).
        """
        names, roles, origin = [], [], []
        for n in self.names:
            role = self.role(n)
            if role == "periodic-stable":
                cps = self.segments.get(n, ())
                bounds = [0, *cps, -1]
                for k in range(len(bounds) - 1):
                    names.append(f"{n}[{k + 1}]")
                    roles.append("static")
                    origin.append((n, bounds[k], bounds[k + 1]))
            else:
                names.append(n)
                roles.append(role)
                origin.append((n, 0, -1))
        return names, roles, origin


@dataclass
class DesignRow:
    t: int
    values: np.ndarray
    lag_missing_mask: np.ndarray


@dataclass
class Design:
    """Stacked design rows ``t = q+1 .. T`` with lag bookkeeping.

    ``X[i]`` is the row at time ``times[i]``; ``lag_cols[k-1]`` is the column
    holding ``Y_{t-k}``; ``lag_missing[i, j]`` flags design slots whose source
    outcome is missing (always False outside lag columns).
    """

    times: np.ndarray
    X: np.ndarray
    lag_missing: np.ndarray
    names: list[str]
    roles: list[str]
    lag_cols: np.ndarray
    origin: list[tuple[str, int, int]] | None = None

    def __len__(self):
        return self.X.shape[0]

    def __getitem__(self, i) -> DesignRow:
        return DesignRow(int(self.times[i]), self.X[i], self.lag_missing[i, self.lag_cols])

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def free(self) -> np.ndarray:
        """Coordinates with nonzero state noise (random-walk roles)."""
        return np.array([r == "random-walk" for r in self.roles], dtype=bool)


def lag_fill_from_series(y_filled) -> dict[int, float]:
    """``time -> value`` map for a fully imputed 1-based series."""
    return {t + 1: float(v) for t, v in enumerate(np.asarray(y_filled))}


def build_design(dataset: TimeSeriesDataset, spec: ModelSpec, lag_fill=None, expand=True) -> Design:
    """Design rows for ``t = q+1 .. T``.

    ``lag_fill`` maps 1-based time to the value used for a missing lagged
    outcome (an array of length T is accepted too). The mask records the
    original missingness, never the filled value.
    """
    T, q = dataset.T, spec.q
    if T <= q:
        raise DataError(f"series of length {T} too short for outcome lag order {q}")
    spec.check_segments(T)
    y = dataset.y
    missing = dataset.missing
    times = np.arange(q + 1, T + 1)
    n = times.shape[0]

    fill = None
    if lag_fill is not None and not isinstance(lag_fill, Mapping):
        fill = np.asarray(lag_fill, dtype=float)

    cols, names = [np.ones(n)], ["intercept"]
    lag_cols, mask_cols = [], [np.zeros(n, dtype=bool)]
    for k in range(1, q + 1):
        src = times - k  # 1-based source time
        vals = y[src - 1].copy()
        miss = missing[src - 1]
        for i in np.flatnonzero(miss):
            t_src = int(src[i])
            if fill is not None:
                v = fill[t_src - 1]
            elif lag_fill is not None and t_src in lag_fill:
                v = lag_fill[t_src]
            else:
                raise DataError(
                    f"no fill value for missing outcome at t={t_src} (lag {k} of row t={int(times[i])})"
                )
            if not np.isfinite(v):
                raise DataError(f"non-finite fill value for missing outcome at t={t_src}")
            vals[i] = v
        lag_cols.append(len(cols))
        cols.append(vals)
        mask_cols.append(miss.copy())
        names.append(f"y_lag{k}")
    for group, lag in ((spec.exposures, spec.p), (spec.covariates, spec.o)):
        for name in group:
            series = dataset.exposures.get(name) if group is spec.exposures else dataset.covariates.get(name)
            if series is None:
                raise DataError(f"dataset has no series named {name!r}")
            for k in range(lag + 1):
                # Exposure/covariate lags before t=1 are not available: rows start at q+1 > k required.
                if np.any(times - k < 1):
                    raise DataError(f"lag {k} of {name!r} reaches before t=1; increase q")
                cols.append(series[times - k - 1])
                mask_cols.append(np.zeros(n, dtype=bool))
                names.append(name if k == 0 else f"{name}_lag{k}")
    X = np.column_stack(cols)
    lag_missing = np.column_stack(mask_cols)
    design = Design(
        times=times,
        X=X,
        lag_missing=lag_missing,
        names=names,
        roles=[spec.role(nm) for nm in names],
        lag_cols=np.array(lag_cols, dtype=np.int64),
    )
    return expand_design(design, spec) if expand else design


def expand_design(design: Design, spec: ModelSpec) -> Design:
    """Split periodic-stable columns into one indicator-masked column per segment."""
    names, roles, origin = spec.expanded()
    base_index = {n: j for j, n in enumerate(design.names)}
    t = design.times
    cols, masks, lag_cols = [], [], []
    lag_lookup = {int(c): k for k, c in enumerate(design.lag_cols)}
    lag_new = [None] * len(design.lag_cols)
    for name, (base, lo, hi) in zip(names, origin):
        j = base_index[base]
        col = design.X[:, j]
        if spec.role(base) == "periodic-stable":
            inside = (t > lo) & ((t <= hi) if hi >= 0 else True)
            col = np.where(inside, col, 0.0)
        if j in lag_lookup and spec.role(base) != "periodic-stable":
            lag_new[lag_lookup[j]] = len(cols)
        cols.append(col)
        masks.append(design.lag_missing[:, j])
    if any(v is None for v in lag_new):
        raise ConfigError("lagged outcomes cannot be periodic-stable")
    lag_cols = np.array(lag_new, dtype=np.int64)
    return Design(
        times=design.times,
        X=np.column_stack(cols),
        lag_missing=np.column_stack(masks),
        names=names,
        roles=roles,
        lag_cols=lag_cols,
        origin=origin,
    )


@dataclass
class Theta:
    """Unknown parameters ``(mu0, sigma0, Q, R)``; transition is the identity."""

    mu0: np.ndarray
    sigma0: np.ndarray
    Q: np.ndarray
    R: float

    def __post_init__(self):
        self.mu0 = np.asarray(self.mu0, dtype=float).ravel()
        d = self.mu0.shape[0]
        self.sigma0 = np.asarray(self.sigma0, dtype=float).reshape(d, d)
        self.Q = np.asarray(self.Q, dtype=float).reshape(d, d)
        self.R = float(self.R)

    @property
    def d(self) -> int:
        return self.mu0.shape[0]

    def copy(self) -> "Theta":
        return Theta(self.mu0.copy(), self.sigma0.copy(), self.Q.copy(), self.R)

    def validate(self, free=None, tol=1e-10):
        if not self.R > 0:
            raise ConfigError(f"observation variance R must be positive, got {self.R}")
        for nm, M in (("sigma0", self.sigma0), ("Q", self.Q)):
            if not np.allclose(M, M.T, atol=tol):
                raise ConfigError(f"{nm} is not symmetric")
            if np.linalg.eigvalsh(0.5 * (M + M.T)).min() < -tol * max(1.0, np.abs(M).max()):
                raise ConfigError(f"{nm} is not positive semidefinite")
        if free is not None:
            static = ~np.asarray(free, dtype=bool)
            if np.any(self.Q[static, :] != 0) or np.any(self.Q[:, static] != 0):
                raise ConfigError("Q must be exactly zero for static coefficients")
