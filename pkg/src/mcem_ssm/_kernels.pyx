# cython: language_level=3
"""Compiled hot kernels: Kalman filter, FFBS, RTS smoother, Gibbs draws.

Mirrors ``_pykernels`` operation for operation. Transition matrix is the
identity; all matrices are small (d <= ~20) and dense.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, log, isfinite, M_PI
from libc.stdlib cimport malloc, free

from .errors import NumericalError

cnp.import_array()

cdef double PSD_REL_TOL = 1e-13
cdef double INNOVATION_JITTER = 1e-12


cdef void _psd_cholesky(const double* A, double* L, int d) noexcept nogil:
    cdef int i, j, k
    cdef double s, lkk, scale = 0.0, tol
    for k in range(d * d):
        L[k] = 0.0
    for k in range(d):
        if A[k * d + k] > scale:
            scale = A[k * d + k]
    tol = PSD_REL_TOL * scale
    for k in range(d):
        s = A[k * d + k]
        for j in range(k):
            s -= L[k * d + j] * L[k * d + j]
        if s <= tol:
            continue
        lkk = sqrt(s)
        L[k * d + k] = lkk
        for i in range(k + 1, d):
            s = A[i * d + k]
            for j in range(k):
                s -= L[i * d + j] * L[k * d + j]
            L[i * d + k] = s / lkk


cdef void _psd_solve_cols(const double* L, const double* B, double* X,
                          double* w, int d, int ncol) noexcept nogil:
    """Solve L L' X = B for a d x ncol row-major B."""
    cdef int c, k, j
    cdef double s
    for c in range(ncol):
        for k in range(d):
            w[k] = 0.0
            if L[k * d + k] == 0.0:
                continue
            s = B[k * ncol + c]
            for j in range(k):
                s -= L[k * d + j] * w[j]
            w[k] = s / L[k * d + k]
        for k in range(d - 1, -1, -1):
            X[k * ncol + c] = 0.0
            if L[k * d + k] == 0.0:
                continue
            s = w[k]
            for j in range(k + 1, d):
                s -= L[j * d + k] * X[j * ncol + c]
            X[k * ncol + c] = s / L[k * d + k]


def psd_cholesky(A):
    cdef cnp.ndarray[double, ndim=2, mode="c"] a = np.ascontiguousarray(A, dtype=np.float64)
    cdef int d = a.shape[0]
    cdef cnp.ndarray[double, ndim=2, mode="c"] L = np.zeros((d, d))
    if d:
        _psd_cholesky(&a[0, 0], &L[0, 0], d)
    return L


def psd_solve(L, B):
    cdef cnp.ndarray[double, ndim=2, mode="c"] l = np.ascontiguousarray(L, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    vec = B.ndim == 1
    cdef int d = l.shape[0]
    cdef cnp.ndarray[double, ndim=2, mode="c"] b = np.ascontiguousarray(B.reshape(d, -1))
    cdef int ncol = b.shape[1]
    cdef cnp.ndarray[double, ndim=2, mode="c"] X = np.zeros((d, ncol))
    cdef cnp.ndarray[double, ndim=1, mode="c"] w = np.zeros(d)
    if d and ncol:
        _psd_solve_cols(&l[0, 0], &b[0, 0], &X[0, 0], &w[0], d, ncol)
    return X[:, 0] if vec else X


def kalman_filter(X, y, obs, mu0, sigma0, Q, double R):
    cdef double[:, ::1] Xv = np.ascontiguousarray(X, dtype=np.float64)
    cdef double[::1] yv = np.ascontiguousarray(y, dtype=np.float64)
    cdef unsigned char[::1] ov = np.ascontiguousarray(obs, dtype=np.uint8)
    cdef double[:, ::1] Qv = np.ascontiguousarray(Q, dtype=np.float64)
    cdef int n = Xv.shape[0], d = Xv.shape[1]
    m_filt_a = np.empty((n + 1, d))
    P_filt_a = np.empty((n + 1, d, d))
    cdef double[:, ::1] mf = m_filt_a
    cdef double[:, :, ::1] Pf = P_filt_a
    cdef double[::1] m = np.array(mu0, dtype=np.float64).ravel()
    cdef double[:, ::1] P = np.array(sigma0, dtype=np.float64).reshape(d, d).copy()
    cdef double[::1] Px = np.empty(d)
    cdef int i, a, b
    cdef double S, e, loglik = 0.0, tmp, bad_S = 0.0
    cdef int bad = -1, bad_kind = 0
    with nogil:
        for a in range(d):
            mf[0, a] = m[a]
            for b in range(d):
                Pf[0, a, b] = P[a, b]
        for i in range(n):
            for a in range(d):
                for b in range(d):
                    P[a, b] += Qv[a, b]
            if ov[i]:
                S = R
                e = yv[i]
                for a in range(d):
                    tmp = 0.0
                    for b in range(d):
                        tmp += P[a, b] * Xv[i, b]
                    Px[a] = tmp
                    S += Xv[i, a] * tmp
                    e -= Xv[i, a] * m[a]
                if not isfinite(S):
                    bad = i
                    bad_kind = 1
                    break
                if S <= 0.0:
                    if S < -1e-8:
                        bad = i
                        bad_kind = 2
                        bad_S = S
                        break
                    S = INNOVATION_JITTER
                for a in range(d):
                    m[a] += Px[a] / S * e
                for a in range(d):
                    for b in range(d):
                        P[a, b] -= (Px[a] / S) * Px[b]
                for a in range(d):
                    for b in range(a + 1, d):
                        tmp = 0.5 * (P[a, b] + P[b, a])
                        P[a, b] = tmp
                        P[b, a] = tmp
                loglik -= 0.5 * (log(2.0 * M_PI * S) + e * e / S)
            for a in range(d):
                mf[i + 1, a] = m[a]
                for b in range(d):
                    Pf[i + 1, a, b] = P[a, b]
    if bad_kind == 1:
        raise NumericalError(f"non-finite innovation variance at row {bad}")
    if bad_kind == 2:
        raise NumericalError(
            f"negative innovation variance {bad_S:.3g} at row {bad}: degenerate R/Q"
        )
    return m_filt_a, P_filt_a, loglik


def ffbs_backward(m_filt, P_filt, Q, z):
    cdef double[:, ::1] mf = np.ascontiguousarray(m_filt, dtype=np.float64)
    cdef double[:, :, ::1] Pf = np.ascontiguousarray(P_filt, dtype=np.float64)
    cdef double[:, ::1] Qv = np.ascontiguousarray(Q, dtype=np.float64)
    cdef double[:, ::1] zv = np.ascontiguousarray(z, dtype=np.float64)
    cdef int n1 = mf.shape[0], d = mf.shape[1]
    cdef int n = n1 - 1
    path_a = np.empty((n1, d))
    cdef double[:, ::1] path = path_a
    cdef double* A = <double*> malloc(d * d * sizeof(double))
    cdef double* L = <double*> malloc(d * d * sizeof(double))
    cdef double* Jt = <double*> malloc(d * d * sizeof(double))
    cdef double* C = <double*> malloc(d * d * sizeof(double))
    cdef double* w = <double*> malloc(d * sizeof(double))
    cdef double* diff = <double*> malloc(d * sizeof(double))
    cdef int i, a, b, k
    cdef double s, t
    try:
        with nogil:
            _psd_cholesky(&Pf[n, 0, 0], L, d)
            for a in range(d):
                s = mf[n, a]
                for b in range(a + 1):
                    s += L[a * d + b] * zv[n, b]
                path[n, a] = s
            for i in range(n - 1, -1, -1):
                for a in range(d * d):
                    A[a] = (&Pf[i, 0, 0])[a] + (&Qv[0, 0])[a]
                _psd_cholesky(A, L, d)
                _psd_solve_cols(L, &Pf[i, 0, 0], Jt, w, d, d)
                for a in range(d):
                    diff[a] = path[i + 1, a] - mf[i, a]
                # cov = J Q, J = Jt'
                for a in range(d):
                    for b in range(d):
                        s = 0.0
                        for k in range(d):
                            s += Jt[k * d + a] * Qv[k, b]
                        C[a * d + b] = s
                for a in range(d):
                    for b in range(a + 1, d):
                        t = 0.5 * (C[a * d + b] + C[b * d + a])
                        C[a * d + b] = t
                        C[b * d + a] = t
                _psd_cholesky(C, L, d)
                for a in range(d):
                    s = mf[i, a]
                    for k in range(d):
                        s += Jt[k * d + a] * diff[k]
                    for b in range(a + 1):
                        s += L[a * d + b] * zv[i, b]
                    path[i, a] = s
    finally:
        free(A)
        free(L)
        free(Jt)
        free(C)
        free(w)
        free(diff)
    return path_a


def rts_smoother(m_filt, P_filt, Q):
    cdef double[:, ::1] mf = np.ascontiguousarray(m_filt, dtype=np.float64)
    cdef double[:, :, ::1] Pf = np.ascontiguousarray(P_filt, dtype=np.float64)
    cdef double[:, ::1] Qv = np.ascontiguousarray(Q, dtype=np.float64)
    cdef int n1 = mf.shape[0], d = mf.shape[1]
    cdef int n = n1 - 1
    m_s_a = np.empty((n1, d))
    P_s_a = np.empty((n1, d, d))
    P_lag_a = np.zeros((n1, d, d))
    cdef double[:, ::1] ms = m_s_a
    cdef double[:, :, ::1] Ps = P_s_a
    cdef double[:, :, ::1] Pl = P_lag_a
    cdef double* A = <double*> malloc(d * d * sizeof(double))
    cdef double* L = <double*> malloc(d * d * sizeof(double))
    cdef double* Jt = <double*> malloc(d * d * sizeof(double))
    cdef double* D = <double*> malloc(d * d * sizeof(double))
    cdef double* T = <double*> malloc(d * d * sizeof(double))
    cdef double* w = <double*> malloc(d * sizeof(double))
    cdef int i, a, b, k
    cdef double s, t
    try:
        with nogil:
            for a in range(d):
                ms[n, a] = mf[n, a]
                for b in range(d):
                    Ps[n, a, b] = Pf[n, a, b]
            for i in range(n - 1, -1, -1):
                for a in range(d * d):
                    A[a] = (&Pf[i, 0, 0])[a] + (&Qv[0, 0])[a]
                _psd_cholesky(A, L, d)
                _psd_solve_cols(L, &Pf[i, 0, 0], Jt, w, d, d)
                for a in range(d):
                    s = mf[i, a]
                    for k in range(d):
                        s += Jt[k * d + a] * (ms[i + 1, k] - mf[i, k])
                    ms[i, a] = s
                # D = P_s[i+1] - A ; T = J D ; P_s[i] = P + T J'
                for a in range(d * d):
                    D[a] = (&Ps[i + 1, 0, 0])[a] - A[a]
                for a in range(d):
                    for b in range(d):
                        s = 0.0
                        for k in range(d):
                            s += Jt[k * d + a] * D[k * d + b]
                        T[a * d + b] = s
                for a in range(d):
                    for b in range(d):
                        s = Pf[i, a, b]
                        for k in range(d):
                            s += T[a * d + k] * Jt[k * d + b]
                        Ps[i, a, b] = s
                for a in range(d):
                    for b in range(a + 1, d):
                        t = 0.5 * (Ps[i, a, b] + Ps[i, b, a])
                        Ps[i, a, b] = t
                        Ps[i, b, a] = t
                for a in range(d):
                    for b in range(d):
                        s = 0.0
                        for k in range(d):
                            s += Ps[i + 1, a, k] * Jt[k * d + b]
                        Pl[i + 1, a, b] = s
    finally:
        free(A)
        free(L)
        free(Jt)
        free(D)
        free(T)
        free(w)
    return m_s_a, P_s_a, P_lag_a


def draw_missing(double[:, ::1] X, double[::1] y, path, double R,
                 mis_rows, lag_cols, int q, z, bint full):
    cdef double[:, ::1] pv = np.ascontiguousarray(path, dtype=np.float64)
    cdef long[::1] rows = np.ascontiguousarray(mis_rows, dtype=np.int64)
    cdef long[::1] lc = np.ascontiguousarray(lag_cols, dtype=np.int64)
    cdef double[::1] zv = np.ascontiguousarray(z, dtype=np.float64)
    cdef int n = X.shape[0], d = X.shape[1]
    cdef int j, i, s, k, r, a
    cdef double sd = sqrt(R), mu, prec, num, phi, zk, val, fit
    with nogil:
        for j in range(rows.shape[0]):
            i = <int> rows[j]
            s = q + i
            mu = 0.0
            for a in range(d):
                mu += X[i, a] * pv[i + 1, a]
            if full:
                prec = 1.0
                num = mu
                for k in range(1, q + 1):
                    r = i + k
                    if r >= n:
                        break
                    phi = pv[r + 1, lc[k - 1]]
                    fit = 0.0
                    for a in range(d):
                        fit += X[r, a] * pv[r + 1, a]
                    zk = y[s + k] - fit + phi * y[s]
                    num += phi * zk
                    prec += phi * phi
                val = num / prec + sd / sqrt(prec) * zv[j]
            else:
                val = mu + sd * zv[j]
            y[s] = val
            for k in range(1, q + 1):
                r = i + k
                if r >= n:
                    break
                X[r, lc[k - 1]] = val
