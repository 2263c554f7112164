"""Penalized mean-shift segmentation (PELT) for piecewise-constant coefficients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class Segmentation:
    """Change points ``c_1 < ... < c_k`` over ``1..T``.

    Segment ``j`` covers ``c_{j-1} < t <= c_j`` with ``c_0 = 0`` and
    ``c_{k+1} = T``.
    """

    change_points: tuple[int, ...]
    T: int

    @property
    def segments(self) -> list[tuple[int, int]]:
        b = (0, *self.change_points, self.T)
        return list(zip(b[:-1], b[1:]))

    @property
    def n_changes(self) -> int:
        return len(self.change_points)

    def labels(self) -> np.ndarray:
        """Segment number (0-based) for each ``t = 1..T``."""
        return np.searchsorted(np.asarray(self.change_points), np.arange(1, self.T + 1), side="left")


def choose_penalty(series) -> float:
    """``2 * sigma^2 * log T`` with ``sigma^2`` estimated from first differences."""
    x = np.asarray(series, dtype=float)
    T = x.shape[0]
    if T < 2:
        return 0.0
    dx = np.diff(x)
    sigma2 = float(dx @ dx) / (2.0 * (T - 1))
    return 2.0 * sigma2 * np.log(T)


def _segment_costs(c0, c1, c2, starts, end):
    """Weighted within-segment sum of squares for segments ``(s, end]``."""
    w = c0[end] - c0[starts]
    s1 = c1[end] - c1[starts]
    s2 = c2[end] - c2[starts]
    with np.errstate(invalid="ignore", divide="ignore"):
        cost = s2 - np.where(w > 0, s1 * s1 / w, 0.0)
    return np.maximum(cost, 0.0)


def detect_changepoints(series, penalty=None, min_segment_length: int = 30, weights=None) -> Segmentation:
    """Exact penalized segmentation by PELT.

    Minimizes ``sum_k cost(segment_k) + penalty * (#change points)`` with the
    weighted Gaussian mean-shift cost ``sum w (x - xbar_w)^2``. Unit weights
    give the ordinary mean-shift cost. Among equal-cost optima the one with
    fewer change points is returned.
    """
    x = np.asarray(series, dtype=float)
    T = x.shape[0]
    if min_segment_length < 1:
        raise ConfigError("min_segment_length must be >= 1")
    w = np.ones(T) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != (T,) or np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ConfigError("weights must be finite, nonnegative and match the series length")
    x = np.where(w > 0, x, 0.0)
    if not np.all(np.isfinite(x)):
        raise ConfigError("series contains non-finite values at positive weight")
    if penalty is None:
        penalty = choose_penalty(x)
    if penalty < 0:
        raise ConfigError("penalty must be nonnegative")
    L = int(min_segment_length)
    if T < 2 * L:
        return Segmentation((), T)

    # centre first: the cost is shift invariant and this limits cancellation
    wsum = w.sum()
    if wsum > 0:
        x = x - (w @ x) / wsum
    c0 = np.concatenate([[0.0], np.cumsum(w)])
    c1 = np.concatenate([[0.0], np.cumsum(w * x)])
    c2 = np.concatenate([[0.0], np.cumsum(w * x * x)])
    scale = 1.0 + float(c2[-1])
    tie = 1e-12 * scale

    F = np.full(T + 1, np.inf)
    F[0] = -penalty
    ncp = np.zeros(T + 1, dtype=np.int64)
    last = np.zeros(T + 1, dtype=np.int64)
    cand = np.array([0], dtype=np.int64)
    pending: dict[int, np.ndarray] = {}

    for t in range(L, T + 1):
        new = t - L
        if new >= L:
            cand = np.append(cand, new)
        if t in pending:
            cand = np.setdiff1d(cand, pending.pop(t), assume_unique=True)
        vals = F[cand] + _segment_costs(c0, c1, c2, cand, t) + penalty
        best = vals.min()
        near = np.flatnonzero(vals <= best + tie)
        pick = near[np.argmin(ncp[cand[near]])]
        F[t] = vals[pick]
        last[t] = cand[pick]
        ncp[t] = ncp[cand[pick]] + (cand[pick] > 0)
        # s cannot beat t for any u >= t + L (where (t, u] is a legal segment)
        drop = cand[vals - penalty > F[t] + tie]
        if drop.size and t + L <= T:
            pending[t + L] = np.union1d(pending.get(t + L, np.zeros(0, np.int64)), drop)

    cps = []
    t = T
    while t > 0:
        s = int(last[t])
        if s > 0:
            cps.append(s)
        t = s
    return Segmentation(tuple(sorted(cps)), T)
