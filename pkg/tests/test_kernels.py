import numpy as np
import pytest

from mcem_ssm.kernels import BACKEND, get_backend

from oracles import random_instance

try:
    cy = get_backend("cython")
except ImportError:  # extension not built
    cy = None
py = get_backend("python")

pytestmark = pytest.mark.skipif(cy is None, reason="compiled backend not built")


def args(seed):
    inst = random_instance(np.random.default_rng(seed))
    y = np.where(inst["obs"], inst["y"], 0.0)
    return inst["X"], y, inst["obs"].astype(np.uint8), inst["mu0"], inst["sigma0"], inst["Q"], inst["R"]


def test_backend_reported():
    assert BACKEND in ("python", "cython")


@pytest.mark.parametrize("seed", range(25))
def test_filter_smoother_sampler_parity(seed):
    a = args(seed)
    m1, P1, l1 = py.kalman_filter(*a)
    m2, P2, l2 = cy.kalman_filter(*a)
    np.testing.assert_allclose(m1, m2, rtol=1e-10, atol=1e-10)
    np.testing.assert_allclose(P1, P2, rtol=1e-10, atol=1e-10)
    assert l1 == pytest.approx(l2, rel=1e-10)
    for r1, r2 in zip(py.rts_smoother(m1, P1, a[5]), cy.rts_smoother(m1, P1, a[5])):
        np.testing.assert_allclose(r1, r2, rtol=1e-9, atol=1e-10)
    z = np.random.default_rng(seed).standard_normal(m1.shape)
    np.testing.assert_allclose(py.ffbs_backward(m1, P1, a[5], z), cy.ffbs_backward(m1, P1, a[5], z),
                               rtol=1e-9, atol=1e-9)


@pytest.mark.parametrize("full", [True, False])
@pytest.mark.parametrize("seed", range(10))
def test_draw_missing_parity(seed, full):
    rng = np.random.default_rng(seed)
    n, q = 12, 2
    X = np.column_stack([np.ones(n), rng.standard_normal((n, 2)), rng.standard_normal(n)])
    lag_cols = np.array([1, 2], dtype=np.int64)
    y = rng.standard_normal(n + q)
    for i in range(n):
        X[i, 1], X[i, 2] = y[q + i - 1], y[q + i - 2]
    path = rng.standard_normal((n + 1, 4))
    mis = np.array([1, 4, 5, 11], dtype=np.int64)
    z = rng.standard_normal(mis.size)
    X1, y1, X2, y2 = X.copy(), y.copy(), X.copy(), y.copy()
    py.draw_missing(X1, y1, path, 0.3, mis, lag_cols, q, z, full)
    cy.draw_missing(X2, y2, path, 0.3, mis, lag_cols, q, z, full)
    np.testing.assert_allclose(y1, y2, rtol=1e-12)
    np.testing.assert_allclose(X1, X2, rtol=1e-12)
    for i in range(n):
        assert X1[i, 1] == y1[q + i - 1] and X1[i, 2] == y1[q + i - 2]


def test_psd_helpers_parity():
    rng = np.random.default_rng(0)
    A = rng.standard_normal((4, 3))
    S = A @ A.T  # rank 3
    L1, L2 = py.psd_cholesky(S), cy.psd_cholesky(S)
    np.testing.assert_allclose(L1, L2, atol=1e-12)
    np.testing.assert_allclose(L1 @ L1.T, S, atol=1e-10)
    B = rng.standard_normal((4, 2))
    np.testing.assert_allclose(py.psd_solve(L1, B), cy.psd_solve(L2, B), atol=1e-10)
