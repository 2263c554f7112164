"""Kalman filtering, smoothing and sampling for the identity-transition model.

State ``theta_i`` for ``i = 0..n`` where index 0 is the prior state and
index ``i >= 1`` belongs to design row ``i - 1``::

    theta_i = theta_{i-1} + w_i,   w_i ~ N(0, Q)
    y_i     = X[i-1] theta_i + v_i, v_i ~ N(0, R)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import DataError, NumericalError
from .model import Design, Theta


@dataclass
class GaussianBelief:
    mean: np.ndarray
    cov: np.ndarray


@dataclass
class FilterResult:
    m_filt: np.ndarray  # (n+1, d); row 0 is the prior
    P_filt: np.ndarray  # (n+1, d, d)
    loglik: float
    Q: np.ndarray

    @property
    def n(self) -> int:
        return self.m_filt.shape[0] - 1

    @property
    def m_pred(self) -> np.ndarray:
        """One-step predicted means for states 1..n."""
        return self.m_filt[:-1]

    @property
    def P_pred(self) -> np.ndarray:
        return self.P_filt[:-1] + self.Q

    def filtered(self, i: int) -> GaussianBelief:
        return GaussianBelief(self.m_filt[i], self.P_filt[i])

    def predicted(self, i: int) -> GaussianBelief:
        """Belief about state ``i`` (1-based) before row ``i-1`` is seen."""
        return GaussianBelief(self.m_filt[i - 1], self.P_filt[i - 1] + self.Q)


@dataclass
class SmootherResult:
    means: np.ndarray  # (n+1, d)
    covs: np.ndarray  # (n+1, d, d)
    lag_covs: np.ndarray  # (n+1, d, d); lag_covs[i] = Cov(theta_i, theta_{i-1}), [0] unused

    def smoothed(self, i: int) -> GaussianBelief:
        return GaussianBelief(self.means[i], self.covs[i])


def _as_matrix(rows) -> np.ndarray:
    X = rows.X if isinstance(rows, Design) else rows
    return np.ascontiguousarray(X, dtype=float)


def kalman_filter(theta: Theta, rows, y, observed=None) -> FilterResult:
    """Forward pass. Rows whose outcome is missing get the prediction step only.

    ``y`` is aligned with ``rows``; NaN entries are treated as missing unless
    ``observed`` is given explicitly.
    """
    X = _as_matrix(rows)
    y = np.asarray(y, dtype=float)
    if observed is None:
        observed = ~np.isnan(y)
    observed = np.asarray(observed, dtype=bool)
    if y.shape[0] != X.shape[0] or observed.shape[0] != X.shape[0]:
        raise DataError("outcome and design rows have different lengths")
    y_clean = np.where(observed, y, 0.0)
    if not np.all(np.isfinite(y_clean[observed])):
        raise DataError("non-finite observed outcome")
    m_filt, P_filt, ll = kernels.kalman_filter(
        X, y_clean, observed.astype(np.uint8), theta.mu0, theta.sigma0, theta.Q, theta.R
    )
    return FilterResult(m_filt, P_filt, float(ll), np.asarray(theta.Q, dtype=float))


def kalman_smoother(fr: FilterResult) -> SmootherResult:
    """Rauch-Tung-Striebel pass with lag-one covariances ``P_s[i] J_{i-1}'``."""
    m_s, P_s, P_lag = kernels.rts_smoother(fr.m_filt, fr.P_filt, fr.Q)
    return SmootherResult(m_s, P_s, P_lag)


def ffbs_sample(fr: FilterResult, rng: np.random.Generator) -> np.ndarray:
    """One exact draw of ``theta_{0:n}`` given the filtered data."""
    z = rng.standard_normal(fr.m_filt.shape)
    return kernels.ffbs_backward(fr.m_filt, fr.P_filt, fr.Q, z)


def predict_missing_outcome(path, rows, theta: Theta, i: int, missing_rows=None) -> tuple[float, float]:
    """Mean and variance of the outcome at row ``i`` given the sampled state.

    ``missing_rows`` (boolean per row), when given, is used to check that the
    row's outcome is actually missing.
    """
    X = _as_matrix(rows)
    if missing_rows is not None and not missing_rows[i]:
        raise DataError(f"row {i} has an observed outcome; nothing to impute")
    return float(X[i] @ path[i + 1]), float(theta.R)


def _support_logdet_and_inv(M, tol=1e-12):
    """Log pseudo-determinant and inverse on the positive-diagonal support."""
    diag = np.diag(M)
    idx = np.flatnonzero(diag > tol * max(1.0, diag.max() if diag.size else 0.0))
    if idx.size == 0:
        return 0.0, idx, np.zeros((0, 0))
    sub = M[np.ix_(idx, idx)]
    sign, logdet = np.linalg.slogdet(sub)
    if sign <= 0:
        raise NumericalError("covariance block is not positive definite on its support")
    return logdet, idx, np.linalg.inv(sub)


def _gauss_term(delta, M, count=1):
    """``count`` copies of ``0.5 log det(M^-1)`` plus the quadratic forms of ``delta``.

    Singular ``M`` is handled on the positive-diagonal support (the
    pseudo-determinant). Mass off the support makes the density zero.
    """
    delta = np.atleast_2d(delta)
    logdet, idx, inv = _support_logdet_and_inv(M)
    off = np.setdiff1d(np.arange(M.shape[0]), idx)
    if off.size and np.any(np.abs(delta[:, off]) > 1e-8 * (1.0 + np.abs(delta).max())):
        return -np.inf
    sub = delta[:, idx]
    quad = np.einsum("ti,ij,tj->", sub, inv, sub) if idx.size else 0.0
    return -0.5 * count * logdet - 0.5 * quad


def complete_data_loglik(theta: Theta, path, rows, y, observed=None) -> float:
    """Complete-data log-likelihood with constants dropped.

    Observation terms run over rows with an observed outcome only. Singular
    ``sigma0``/``Q`` are evaluated by pseudo-determinant over their support.
    """
    X = _as_matrix(rows)
    y = np.asarray(y, dtype=float)
    if observed is None:
        observed = ~np.isnan(y)
    path = np.asarray(path, dtype=float)
    n = X.shape[0]
    val = _gauss_term(path[0] - theta.mu0, theta.sigma0)
    val += _gauss_term(np.diff(path, axis=0), theta.Q, count=n)
    resid = y[observed] - np.einsum("ij,ij->i", X[observed], path[1:][observed])
    n_obs = int(observed.sum())
    val += -0.5 * n_obs * np.log(theta.R) - 0.5 * float(resid @ resid) / theta.R
    return float(val)
