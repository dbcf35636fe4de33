import numpy as np
import pytest

from conftest import random_spd
from fcglasso.core import EstimationError, PrecisionEstimate
from fcglasso.factor_glasso import (
    GridParams,
    factor_glasso_fit,
    not_sparse_fit,
    plain_glasso_fit,
    smw_combine,
)
from fcglasso.combination import precision_error
from fcglasso.simulation import FactorErrorDgpSpec, rng_for, simulate_factor_errors


def test_smw_zero_loadings(rng):
    te = random_spd(rng, 4)
    out = smw_combine(te, np.eye(2), np.zeros((4, 2)))
    np.testing.assert_allclose(out.matrix, te, atol=1e-15)


def test_smw_scalar():
    out = smw_combine(np.array([[2.0]]), np.array([[1.0]]), np.array([[1.0]]))
    assert abs(out.matrix[0, 0] - 2 / 3) < 1e-15
    assert abs(out.matrix[0, 0] - 1 / (1 + 0.5)) < 1e-15


def test_smw_matches_direct_inverse(rng):
    for _ in range(50):
        p = int(rng.integers(2, 21))
        q = int(rng.integers(1, 4))
        sig_eps = random_spd(rng, p)
        sig_f = random_spd(rng, q)
        B = rng.standard_normal((p, q))
        out = smw_combine(np.linalg.inv(sig_eps), np.linalg.inv(sig_f), B)
        direct = np.linalg.inv(B @ sig_f @ B.T + sig_eps)
        assert np.linalg.norm(out.matrix - direct) / np.linalg.norm(direct) < 1e-8
        np.testing.assert_array_equal(out.matrix, out.matrix.T)


def test_smw_shape_mismatch(rng):
    with pytest.raises(EstimationError):
        smw_combine(np.eye(3), np.eye(2), np.ones((3, 1)))


def test_pure_factor_errors_rejected(rng):
    B = rng.standard_normal((10, 2))
    e = rng.standard_normal((80, 2)) @ B.T
    with pytest.raises(EstimationError, match="degenerate"):
        factor_glasso_fit(e, q=2)


def test_q_zero_rejected(rng):
    with pytest.raises(EstimationError, match="q >= 1"):
        factor_glasso_fit(rng.standard_normal((50, 6)), q=0)


def test_fit_pipeline_outputs(rng):
    e = rng.standard_normal((120, 2)) @ rng.standard_normal((2, 15)) + rng.standard_normal((120, 15))
    res = factor_glasso_fit(e, q="auto")
    assert res.decomposition.q >= 1
    assert res.theta.is_pd_certified and res.theta_eps.is_pd_certified
    assert res.chosen_tau > 0
    np.testing.assert_array_equal(res.theta.matrix, res.theta.matrix.T)


def test_not_sparse_is_inverse_of_factor_covariance(rng):
    e = rng.standard_normal((200, 2)) @ rng.standard_normal((2, 8)) + rng.standard_normal((200, 8))
    res = not_sparse_fit(e, q=2)
    dec = res.decomposition
    cov = dec.loadings @ dec.sigma_f @ dec.loadings.T + dec.sigma_eps
    np.testing.assert_allclose(res.theta.matrix, np.linalg.inv(cov), rtol=1e-6, atol=1e-8)


def test_plain_glasso_returns_tau(rng):
    est, tau = plain_glasso_fit(rng.standard_normal((60, 5)), GridParams(M=4))
    assert isinstance(est, PrecisionEstimate) and tau > 0


def test_beats_plain_glasso_on_most_draws():
    # reduced version of the precision-recovery comparison at T = 512
    T = 512
    wins = 0
    n = 10
    for rep in range(n):
        spec = FactorErrorDgpSpec.for_T(T)
        s = simulate_factor_errors(spec, rng_for(99, rep))
        fg = factor_glasso_fit(s.errors, q=spec.q).theta
        gl, _ = plain_glasso_fit(s.errors)
        wins += precision_error(fg, s.theta[0]) < precision_error(gl, s.theta[0])
    assert wins >= 8
