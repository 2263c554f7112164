"""Pure-numpy reference implementation of the hot kernels.

Every function here has a twin in ``_kernels.pyx`` with the same signature
and the same arithmetic, so the two backends agree to rounding error given
the same standard-normal draws. The transition matrix is the identity
throughout.
"""

import math

import numpy as np

from .errors import NumericalError

PSD_REL_TOL = 1e-13
INNOVATION_JITTER = 1e-12


def psd_cholesky(A):
    """Lower Cholesky factor of a PSD matrix; zero pivots give zero columns."""
    d = A.shape[0]
    L = np.zeros((d, d))
    scale = max(float(np.max(np.diag(A))), 0.0) if d else 0.0
    tol = PSD_REL_TOL * scale
    for k in range(d):
        s = A[k, k] - L[k, :k] @ L[k, :k]
        if s <= tol:
            continue
        lkk = math.sqrt(s)
        L[k, k] = lkk
        for i in range(k + 1, d):
            L[i, k] = (A[i, k] - L[i, :k] @ L[k, :k]) / lkk
    return L


def psd_solve(L, B):
    """Solve ``L L' X = B`` column by column, zeroing null-pivot components."""
    d = L.shape[0]
    B = np.asarray(B, dtype=float)
    vec = B.ndim == 1
    B2 = B.reshape(d, -1)
    X = np.zeros_like(B2)
    W = np.zeros_like(B2)
    for c in range(B2.shape[1]):
        for k in range(d):
            if L[k, k] == 0.0:
                continue
            W[k, c] = (B2[k, c] - L[k, :k] @ W[:k, c]) / L[k, k]
        for k in range(d - 1, -1, -1):
            if L[k, k] == 0.0:
                continue
            X[k, c] = (W[k, c] - L[k + 1:, k] @ X[k + 1:, c]) / L[k, k]
    return X[:, 0] if vec else X


def _innovation_variance(S, i):
    if not math.isfinite(S):
        raise NumericalError(f"non-finite innovation variance at row {i}")
    if S <= 0.0:
        if S < -1e-8:
            raise NumericalError(
                f"negative innovation variance {S:.3g} at row {i}: degenerate R/Q"
            )
        S = INNOVATION_JITTER
    return S


def kalman_filter(X, y, obs, mu0, sigma0, Q, R):
    n, d = X.shape
    m_filt = np.empty((n + 1, d))
    P_filt = np.empty((n + 1, d, d))
    m_filt[0] = mu0
    P_filt[0] = sigma0
    m = np.array(mu0, dtype=float)
    P = np.array(sigma0, dtype=float)
    loglik = 0.0
    for i in range(n):
        P = P + Q
        if obs[i]:
            x = X[i]
            Px = P @ x
            S = _innovation_variance(float(x @ Px) + R, i)
            e = y[i] - float(x @ m)
            K = Px / S
            m = m + K * e
            P = P - np.outer(K, Px)
            P = 0.5 * (P + P.T)
            loglik -= 0.5 * (math.log(2.0 * math.pi * S) + e * e / S)
        m_filt[i + 1] = m
        P_filt[i + 1] = P
    return m_filt, P_filt, loglik


def ffbs_backward(m_filt, P_filt, Q, z):
    n1, d = m_filt.shape
    path = np.empty((n1, d))
    n = n1 - 1
    path[n] = m_filt[n] + psd_cholesky(P_filt[n]) @ z[n]
    for i in range(n - 1, -1, -1):
        P = P_filt[i]
        L = psd_cholesky(P + Q)
        Jt = psd_solve(L, P)  # J' = (P + Q)^+ P
        mean = m_filt[i] + Jt.T @ (path[i + 1] - m_filt[i])
        cov = Jt.T @ Q
        cov = 0.5 * (cov + cov.T)
        path[i] = mean + psd_cholesky(cov) @ z[i]
    return path


def rts_smoother(m_filt, P_filt, Q):
    n1, d = m_filt.shape
    n = n1 - 1
    m_s = np.empty_like(m_filt)
    P_s = np.empty_like(P_filt)
    P_lag = np.zeros_like(P_filt)
    m_s[n] = m_filt[n]
    P_s[n] = P_filt[n]
    for i in range(n - 1, -1, -1):
        P = P_filt[i]
        A = P + Q
        Jt = psd_solve(psd_cholesky(A), P)
        J = Jt.T
        m_s[i] = m_filt[i] + J @ (m_s[i + 1] - m_filt[i])
        Ps = P + J @ (P_s[i + 1] - A) @ Jt
        P_s[i] = 0.5 * (Ps + Ps.T)
        P_lag[i + 1] = P_s[i + 1] @ Jt
    return m_s, P_s, P_lag


def draw_missing(X, y, path, R, mis_rows, lag_cols, q, z, full):
    """Gibbs update of missing outcomes in increasing time order, in place.

    Row ``i`` of ``X`` is the observation at series index ``q + i``; its lag-k
    slot (column ``lag_cols[k-1]``) holds ``y[q + i - k]``.
    """
    n = X.shape[0]
    sd = math.sqrt(R)
    for j in range(mis_rows.shape[0]):
        i = int(mis_rows[j])
        s = q + i
        mu = float(X[i] @ path[i + 1])
        if full:
            prec = 1.0
            num = mu
            for k in range(1, q + 1):
                r = i + k
                if r >= n:
                    break
                phi = path[r + 1, lag_cols[k - 1]]
                zk = y[s + k] - float(X[r] @ path[r + 1]) + phi * y[s]
                num += phi * zk
                prec += phi * phi
            val = num / prec + sd / math.sqrt(prec) * z[j]
        else:
            val = mu + sd * z[j]
        y[s] = val
        for k in range(1, q + 1):
            r = i + k
            if r >= n:
                break
            X[r, lag_cols[k - 1]] = val
