import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mcem_ssm.errors import DataError, NumericalError
from mcem_ssm.model import Theta
from mcem_ssm.ssm import (
    complete_data_loglik,
    ffbs_sample,
    kalman_filter,
    kalman_smoother,
    predict_missing_outcome,
)

from oracles import JointGaussian, complete_loglik_oracle, random_instance


def theta_of(inst):
    return Theta(inst["mu0"], inst["sigma0"], inst["Q"], inst["R"])


def y_with_nan(inst):
    return np.where(inst["obs"], inst["y"], np.nan)


def test_scalar_conjugate_update():
    th = Theta(np.zeros(1), np.eye(1), np.zeros((1, 1)), 1.0)
    fr = kalman_filter(th, np.ones((1, 1)), [2.0])
    assert fr.m_filt[1, 0] == pytest.approx(1.0)
    assert fr.P_filt[1, 0, 0] == pytest.approx(0.5)


def test_missing_row_is_prediction_only():
    th = Theta(np.zeros(1), np.eye(1), 0.3 * np.eye(1), 1.0)
    fr = kalman_filter(th, np.ones((2, 1)), [np.nan, np.nan])
    assert fr.m_filt[2, 0] == 0.0
    assert fr.P_filt[2, 0, 0] == pytest.approx(1.6)
    assert fr.loglik == 0.0


def test_length_mismatch_is_data_error():
    th = Theta(np.zeros(1), np.eye(1), np.zeros((1, 1)), 1.0)
    with pytest.raises(DataError):
        kalman_filter(th, np.ones((3, 1)), [1.0, 2.0])


def test_degenerate_variance_is_numerical_error():
    bad = Theta(np.zeros(1), -5.0 * np.eye(1), np.zeros((1, 1)), 1.0)
    with pytest.raises(NumericalError):
        kalman_filter(bad, np.ones((1, 1)), [1.0])


def test_random_model_matches_joint_conditioning():
    rng = np.random.default_rng(3)
    inst = random_instance(rng, d_max=3, n_max=6, max_missing=0)
    inst["X"] = rng.standard_normal((6, 3))
    inst["y"] = rng.standard_normal(6)
    inst["obs"] = np.ones(6, bool)
    inst["mu0"], inst["sigma0"] = np.zeros(3), np.eye(3)
    inst["Q"] = np.diag([0.2, 0.1, 0.05])
    fr = kalman_filter(theta_of(inst), inst["X"], inst["y"])
    jg = JointGaussian(inst["X"], inst["mu0"], inst["sigma0"], inst["Q"], inst["R"])
    for i in range(1, 7):
        m, P = jg.filtered(inst["y"], inst["obs"], i)
        np.testing.assert_allclose(fr.m_filt[i], m, atol=1e-8)
        np.testing.assert_allclose(fr.P_filt[i], P, atol=1e-8)
    assert fr.loglik == pytest.approx(jg.loglik(inst["y"], inst["obs"]), abs=1e-8)


def test_predict_missing_outcome_definition():
    th = Theta(np.zeros(2), np.eye(2), np.zeros((2, 2)), 0.1)
    path = np.array([[0.0, 0.0], [1.2, 1.0], [1.2, 1.0]])
    rows = np.array([[1.0, 2.0], [1.0, 1.0]])
    mean, var = predict_missing_outcome(path, rows, th, 0)
    assert mean == pytest.approx(3.2)
    assert var == pytest.approx(0.1)
    with pytest.raises(DataError):
        predict_missing_outcome(path, rows, th, 1, missing_rows=np.array([True, False]))


def test_complete_loglik_residual_free_case_is_zero():
    th = Theta(np.zeros(1), np.eye(1), np.eye(1), 1.0)
    path = np.zeros((3, 1))
    assert complete_data_loglik(th, path, np.ones((2, 1)), np.zeros(2)) == pytest.approx(0.0)


@pytest.mark.parametrize("seed", range(10))
def test_complete_loglik_matches_density_up_to_constant(seed):
    rng = np.random.default_rng(seed)
    inst = random_instance(rng)
    d, n = inst["X"].shape[1], inst["X"].shape[0]
    free = np.diag(inst["Q"]) > 0
    path = np.empty((n + 1, d))
    path[0] = rng.standard_normal(d)
    for i in range(1, n + 1):
        path[i] = path[i - 1] + np.where(free, rng.standard_normal(d), 0.0)
    got = complete_data_loglik(theta_of(inst), path, inst["X"], y_with_nan(inst))
    ref = complete_loglik_oracle(path, inst["X"], inst["y"], inst["obs"], inst["mu0"], inst["sigma0"],
                                 inst["Q"], inst["R"])
    const = -0.5 * np.log(2 * np.pi) * (d + n * free.sum() + inst["obs"].sum())
    assert got + const == pytest.approx(ref, abs=1e-8)


def test_ffbs_static_model_matches_smoother():
    rng = np.random.default_rng(0)
    th = Theta(np.zeros(1), np.eye(1), np.zeros((1, 1)), 1.0)
    y = rng.standard_normal(8) + 1.0
    fr = kalman_filter(th, np.ones((8, 1)), y)
    sm = kalman_smoother(fr)
    draws = np.array([ffbs_sample(fr, rng)[5, 0] for _ in range(10_000)])
    se_mean = np.sqrt(sm.covs[5, 0, 0] / draws.size)
    assert abs(draws.mean() - sm.means[5, 0]) < 4 * se_mean
    se_var = np.sqrt(np.var(draws) ** 2 * 2 / draws.size)
    assert abs(draws.var() - sm.covs[5, 0, 0]) < 4 * se_var


def _psd_gap(A, B, tol=1e-9):
    """Smallest eigenvalue of ``B - A`` (nonnegative when ``A <= B``)."""
    return float(np.linalg.eigvalsh(0.5 * ((B - A) + (B - A).T)).min()) + tol


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_variance_ordering_smoothed_filtered_predicted(seed):
    inst = random_instance(np.random.default_rng(seed))
    fr = kalman_filter(theta_of(inst), inst["X"], y_with_nan(inst))
    sm = kalman_smoother(fr)
    for i in range(1, fr.n + 1):
        pred = fr.predicted(i).cov
        filt = fr.P_filt[i]
        assert _psd_gap(filt, pred) >= 0
        assert _psd_gap(sm.covs[i], filt) >= 0
        assert np.all(np.diag(sm.covs[i]) <= np.diag(filt) + 1e-9)
        assert np.all(np.diag(filt) <= np.diag(pred) + 1e-9)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_covariances_symmetric_psd(seed):
    inst = random_instance(np.random.default_rng(seed))
    fr = kalman_filter(theta_of(inst), inst["X"], y_with_nan(inst))
    sm = kalman_smoother(fr)
    for C in (*fr.P_filt, *sm.covs):
        assert np.abs(C - C.T).max() <= 1e-10 * (1 + np.abs(C).max())
        assert np.linalg.eigvalsh(C).min() >= -1e-10 * (1 + np.abs(C).max())


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_all_missing_smoother_is_prior_propagation(seed):
    inst = random_instance(np.random.default_rng(seed))
    y = np.full(inst["X"].shape[0], np.nan)
    sm = kalman_smoother(kalman_filter(theta_of(inst), inst["X"], y))
    for i in range(sm.means.shape[0]):
        np.testing.assert_allclose(sm.means[i], inst["mu0"], atol=1e-10)
        np.testing.assert_allclose(sm.covs[i], inst["sigma0"] + i * inst["Q"], atol=1e-9)
