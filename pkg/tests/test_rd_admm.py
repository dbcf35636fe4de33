import cvxpy as cp
import numpy as np
import pytest
from scipy.optimize import minimize

from conftest import random_spd
from fcglasso.core import EstimationError
from fcglasso.factor_glasso import factor_glasso_fit
from fcglasso.glasso import GlassoConfig, glasso_objective, glasso_solve
from fcglasso.rd_admm import (
    AdmmStop,
    RdTuning,
    RegimeSegmentation,
    SmoothingPenalty,
    prox_pair,
    rd_admm_solve,
    rd_factor_glasso_fit,
    rd_objective,
    regime_covariances,
    soft_threshold,
    theta_step,
)

# residual balancing keeps the iteration count low when n_i is large relative to rho
TIGHT = AdmmStop(eps_abs=1e-9, max_iter=20000, adapt_rho=True)


# -- segmentation ----------------------------------------------------------------


def test_segmentation_lengths():
    seg = RegimeSegmentation.from_breaks(10, [4, 7])
    assert seg.N == 3 and seg.segment_lengths == (4, 3, 3) and seg.break_points == (4, 7)
    assert [seg.regime_of(t) for t in (0, 3, 4, 9, 12)] == [0, 0, 1, 2, 2]


@pytest.mark.parametrize("starts", [(1, 5), (0, 5, 5), (0, 9)])
def test_segmentation_rejects(starts):
    with pytest.raises(EstimationError):
        RegimeSegmentation(starts, 10)


def test_truncate_folds_short_tail():
    seg = RegimeSegmentation.from_breaks(10, [6]).truncate(7)
    assert seg.starts == (0,) and seg.T == 7


# -- soft threshold and prox ---------------------------------------------------------


@pytest.mark.parametrize("x,k,out", [(0.0, 0.7, 0.0), (1.2, 0.5, 0.7), (-0.3, 0.5, 0.0),
                                     (-2.0, 0.5, -1.5)])
def test_soft_threshold(x, k, out):
    assert abs(soft_threshold(x, k) - out) < 1e-15


def test_soft_threshold_rejects_negative():
    with pytest.raises(EstimationError):
        soft_threshold(1.0, -0.1)


def test_prox_ridge_scalar():
    z2, z1 = prox_pair(np.array(1.0), np.array(0.0), SmoothingPenalty("ridge", 1.0), 1.0)
    assert abs(z2 - 0.6) < 1e-15 and abs(z1 - 0.4) < 1e-15


def test_prox_fixed_points(rng):
    A = rng.standard_normal((3, 3))
    for kind in ("ridge", "lasso"):
        z2, z1 = prox_pair(A, A, SmoothingPenalty(kind, 2.0), 1.3)
        np.testing.assert_allclose(z2, A)
        np.testing.assert_allclose(z1, A)
        z2, z1 = prox_pair(A, -A, SmoothingPenalty(kind, 0.0), 1.3)
        np.testing.assert_array_equal(z2, A)
        np.testing.assert_array_equal(z1, -A)


def _prox_numeric(a, b, kind, beta, rho):
    def f(z):
        d = z[0] - z[1]
        psi = d ** 2 if kind == "ridge" else abs(d)
        return rho / 2 * ((a - z[0]) ** 2 + (b - z[1]) ** 2) + beta * psi

    # the lasso objective is piecewise smooth; a derivative-free method copes with the kink
    res = minimize(f, [a, b], method="Nelder-Mead",
                   options={"xatol": 1e-12, "fatol": 1e-15, "maxiter": 20000})
    return res.x


@pytest.mark.parametrize("kind", ["ridge", "lasso"])
def test_prox_matches_numerical_minimisation(kind):
    r = np.random.default_rng(4)
    for _ in range(100):
        a, b = r.normal(scale=2, size=2)
        beta, rho = r.uniform(0.05, 3), r.uniform(0.2, 3)
        z2, z1 = prox_pair(np.array(a), np.array(b), SmoothingPenalty(kind, beta), rho)
        num = _prox_numeric(a, b, kind, beta, rho)
        assert abs(z2 - num[0]) < 1e-6 and abs(z1 - num[1]) < 1e-6


def test_prox_matrix_is_elementwise(rng):
    A, Bm = rng.standard_normal((2, 3, 3))
    pen = SmoothingPenalty("lasso", 0.4)
    z2, z1 = prox_pair(A, Bm, pen, 1.0)
    for i in range(3):
        for j in range(3):
            s2, s1 = prox_pair(A[i, j], Bm[i, j], pen, 1.0)
            assert z2[i, j] == s2 and z1[i, j] == s1


@pytest.mark.parametrize("kind", ["group_lasso", "max_norm"])
def test_prox_unimplemented(kind):
    with pytest.raises(NotImplementedError):
        prox_pair(np.eye(2), np.eye(2), SmoothingPenalty(kind, 1.0), 1.0)


def test_penalty_validation():
    with pytest.raises(EstimationError):
        SmoothingPenalty("fused", 1.0)
    with pytest.raises(EstimationError):
        SmoothingPenalty("ridge", -1.0)


# -- theta step ---------------------------------------------------------------------


def test_theta_step_stationarity(rng):
    for copies in (1, 2, 3):
        S = random_spd(rng, 6)
        A = rng.standard_normal((6, 6))
        A = A + A.T
        n, rho = 40, 1.7
        th = theta_step(A, S, n, rho, copies).matrix
        eta = n / (copies * rho)
        grad = S - np.linalg.inv(th) + (th - A) / eta
        assert np.linalg.norm(grad) < 1e-8
        assert np.all(np.linalg.eigvalsh(th) > 0)


def test_theta_step_closed_form_three_copies(rng):
    S = random_spd(rng, 4)
    A = random_spd(rng, 4)
    n, rho = 25, 0.8
    eta = n / (3 * rho)
    lam, Q = np.linalg.eigh(A / eta - S)
    expected = n / (6 * rho) * (Q * (lam + np.sqrt(lam ** 2 + 12 * rho / n))) @ Q.T
    np.testing.assert_allclose(theta_step(A, S, n, rho).matrix, expected, atol=1e-12)


def test_theta_step_matches_convex_solver(rng):
    S = random_spd(rng, 3)
    A = random_spd(rng, 3)
    n, rho = 10, 1.0
    eta = n / (3 * rho)
    X = cp.Variable((3, 3), PSD=True)
    cp.Problem(cp.Minimize(cp.trace(S @ X) - cp.log_det(X)
                           + cp.sum_squares(X - A) / (2 * eta))).solve(
        solver=cp.CLARABEL, tol_gap_abs=1e-12, tol_gap_rel=1e-12, tol_feas=1e-12)
    np.testing.assert_allclose(theta_step(A, S, n, rho).matrix, X.value, atol=1e-5)


def test_theta_step_symmetrises_input(rng):
    S = random_spd(rng, 3)
    A = rng.standard_normal((3, 3))
    np.testing.assert_allclose(theta_step(A, S, 10, 1.0).matrix,
                               theta_step((A + A.T) / 2, S, 10, 1.0).matrix, atol=1e-14)


# -- ADMM degenerations ----------------------------------------------------------------


def _blocks(rng, ns, p):
    return [rng.standard_normal((n, p)) @ random_spd(rng, p) for n in ns]


def test_single_regime_matches_glasso(rng):
    x = _blocks(rng, [60], 5)[0]
    S = x.T @ x / 60
    alpha = 6.0
    res = rd_admm_solve([x], alpha=alpha, stop=TIGHT)
    assert res.converged
    # with n = 60 the l1 weight alpha matches tau = alpha / n on an unpenalised diagonal
    tau = alpha / 60
    gl = glasso_solve(S, GlassoConfig(tau=tau, penalize_diagonal=False, coord_tol=1e-12,
                                      outer_tol=1e-10, max_sweeps=2000))
    f_admm = glasso_objective(res.thetas[0].matrix, S, tau, penalize_diagonal=False)
    f_gl = glasso_objective(gl.matrix, S, tau, penalize_diagonal=False)
    assert abs(f_admm - f_gl) / abs(f_gl) < 1e-4


def test_beta_zero_matches_separate_fits(rng):
    blocks = _blocks(rng, [50, 40, 45], 4)
    alpha = 4.0
    joint = rd_admm_solve(blocks, alpha=alpha, penalty=SmoothingPenalty("ridge", 0.0), stop=TIGHT)
    for blk, th in zip(blocks, joint.thetas):
        solo = rd_admm_solve([blk], alpha=alpha, stop=TIGHT)
        np.testing.assert_allclose(th.matrix, solo.thetas[0].matrix, atol=1e-4)


def test_huge_beta_forces_equal_regimes(rng):
    blocks = _blocks(rng, [50, 40, 45], 4)
    res = rd_admm_solve(blocks, alpha=2.0, penalty=SmoothingPenalty("ridge", 1e6),
                        stop=TIGHT)
    th = np.array([t.matrix for t in res.thetas])
    gap = max(np.abs(th[i] - th[j]).max() for i in range(3) for j in range(3))
    assert gap < 1e-3


def test_admm_matches_joint_convex_solve(rng):
    blocks = _blocks(rng, [30, 25], 3)
    covs, ns = regime_covariances(blocks)
    alpha, beta = 3.0, 2.0
    pen = SmoothingPenalty("ridge", beta)
    res = rd_admm_solve(blocks, alpha=alpha, penalty=pen, stop=TIGHT)
    g = [np.sqrt(np.diag(c)) for c in covs]
    X = [cp.Variable((3, 3), PSD=True) for _ in range(2)]
    obj = 0
    for i in range(2):
        W = np.outer(g[i], g[i])
        np.fill_diagonal(W, 0.0)
        obj += ns[i] * (cp.trace(covs[i] @ X[i]) - cp.log_det(X[i]))
        obj += alpha * cp.sum(cp.multiply(W, cp.abs(X[i])))
    obj += beta * cp.sum_squares(X[1] - X[0])
    cp.Problem(cp.Minimize(obj)).solve(solver=cp.CLARABEL, tol_gap_abs=1e-12,
                                       tol_gap_rel=1e-12, tol_feas=1e-12)
    for th, x in zip(res.thetas, X):
        np.testing.assert_allclose(th.matrix, x.value, atol=1e-4)
    ref = rd_objective([x.value for x in X], covs, ns, alpha, pen)
    assert res.objective <= ref * (1 + 1e-8)


def test_consensus_at_convergence(rng):
    blocks = _blocks(rng, [40, 40], 4)
    res = rd_admm_solve(blocks, alpha=3.0, penalty=SmoothingPenalty("lasso", 1.0), stop=TIGHT)
    assert res.converged
    st = res.state
    assert np.abs(st.thetas - st.Z0).max() < 1e-8
    assert np.abs(st.thetas[:-1] - st.Z1).max() < 1e-8
    assert np.abs(st.thetas[1:] - st.Z2).max() < 1e-8
    assert all(t.is_pd_certified for t in res.thetas)


def test_iteration_cap_flags_best_iterate(rng):
    blocks = _blocks(rng, [40, 40], 4)
    res = rd_admm_solve(blocks, alpha=3.0, penalty=SmoothingPenalty("ridge", 1.0),
                        stop=AdmmStop(eps_abs=1e-14, max_iter=5))
    assert not res.converged and res.n_iter == 5
    assert not any(t.converged for t in res.thetas)


def test_alpha_zero_singular_rejected(rng):
    x = rng.standard_normal((3, 6))  # fewer rows than columns
    with pytest.raises(EstimationError, match="no minimiser"):
        rd_admm_solve([x, x], alpha=0.0, penalty=SmoothingPenalty("ridge", 0.0))


def test_warm_start_reaches_same_solution(rng):
    blocks = _blocks(rng, [40, 35], 4)
    pen = SmoothingPenalty("ridge", 1.0)
    cold = rd_admm_solve(blocks, alpha=3.0, penalty=pen, stop=TIGHT)
    other = rd_admm_solve(blocks, alpha=5.0, penalty=pen, stop=TIGHT)
    warm = rd_admm_solve(blocks, alpha=3.0, penalty=pen, stop=TIGHT, init=other.state)
    for a, b in zip(cold.thetas, warm.thetas):
        np.testing.assert_allclose(a.matrix, b.matrix, atol=1e-6)


def test_adaptive_rho_converges_to_same_point(rng):
    blocks = _blocks(rng, [40, 35], 4)
    pen = SmoothingPenalty("ridge", 1.0)
    fixed = rd_admm_solve(blocks, alpha=3.0, penalty=pen, rho=20.0,
                          stop=AdmmStop(eps_abs=1e-9, max_iter=20000))
    adapt = rd_admm_solve(blocks, alpha=3.0, penalty=pen, rho=20.0, stop=TIGHT)
    for a, b in zip(fixed.thetas, adapt.thetas):
        np.testing.assert_allclose(a.matrix, b.matrix, atol=1e-6)


# -- full pipeline ------------------------------------------------------------------------


def test_single_regime_pipeline_matches_factor_glasso(rng):
    e = rng.standard_normal((150, 2)) @ rng.standard_normal((2, 10)) + rng.standard_normal((150, 10))
    T = e.shape[0]
    fg = factor_glasso_fit(e, q=2)
    # glasso with a penalised diagonal adds tau to w_jj; the ADMM leaves the diagonal free,
    # so compare on the off-diagonal scale alpha = tau * T against a diagonal-free glasso
    alpha = fg.chosen_tau * T
    rd = rd_factor_glasso_fit(e, RegimeSegmentation.from_breaks(T), 2,
                              RdTuning((alpha,), (0.0,)), stop=TIGHT)
    S = fg.decomposition.sigma_eps
    ref = glasso_solve(S, GlassoConfig(tau=fg.chosen_tau, penalize_diagonal=False,
                                       coord_tol=1e-12, outer_tol=1e-10, max_sweeps=2000))
    np.testing.assert_allclose(rd.theta_eps[0].matrix, ref.matrix, atol=1e-5)
    assert len(rd.weights) == 1 and abs(rd.weights[0].weights.sum() - 1) < 1e-12


def test_pipeline_grid_and_tuning(rng):
    e = rng.standard_normal((120, 2)) @ rng.standard_normal((2, 6)) + rng.standard_normal((120, 6))
    seg = RegimeSegmentation.from_breaks(120, [60])
    res = rd_factor_glasso_fit(e, seg, 2, RdTuning((1.0, 10.0), (0.0, 10.0)),
                               stop=AdmmStop(eps_rel=1e-4, max_iter=3000))
    assert set(res.tuning_scores) == {(1.0, 0.0), (1.0, 10.0), (10.0, 0.0), (10.0, 10.0)}
    best = min(res.tuning_scores.values())
    assert res.tuning_scores[(res.alpha, res.beta)] == best
    assert len(res.thetas) == 2 and res.segmentation == seg
    assert res.current_weights is res.weights[-1]


def test_default_grid_has_36_pairs(rng):
    e = rng.standard_normal((60, 2)) @ rng.standard_normal((2, 5)) + rng.standard_normal((60, 5))
    seg = RegimeSegmentation.from_breaks(60, [30])
    res = rd_factor_glasso_fit(e, seg, 1, RdTuning(), stop=AdmmStop(eps_rel=1e-3, max_iter=500))
    assert len(RdTuning().alpha_grid) * len(RdTuning().beta_grid) == 36
    # pairs with alpha = 0 are kept only when the problem is bounded
    assert 30 <= len(res.tuning_scores) <= 36


def test_precision_criterion_needs_truth(rng):
    e = rng.standard_normal((60, 5))
    with pytest.raises(EstimationError, match="true regime"):
        rd_factor_glasso_fit(e, RegimeSegmentation.from_breaks(60), 1,
                             RdTuning((1.0, 2.0), (0.0,), criterion="precision"))


def test_per_observation_grid_scales_by_mean_regime_length(rng):
    e = rng.standard_normal((120, 2)) @ rng.standard_normal((2, 6)) + rng.standard_normal((120, 6))
    seg = RegimeSegmentation.from_breaks(120, [40, 80])
    stop = AdmmStop(eps_rel=1e-6, max_iter=5000, adapt_rho=True)
    rel = rd_factor_glasso_fit(e, seg, 2, RdTuning((0.1, 0.5), (0.0, 0.2),
                                                   grid_scale="per_observation"), stop=stop)
    ab = rd_factor_glasso_fit(e, seg, 2, RdTuning((4.0, 20.0), (0.0, 8.0)), stop=stop)
    assert rel.grid_point == (rel.alpha / 40, rel.beta / 40)
    assert (rel.alpha, rel.beta) == (ab.alpha, ab.beta)
    for (a, b), s in rel.tuning_scores.items():
        assert abs(s - ab.tuning_scores[(40 * a, 40 * b)]) < 1e-12
    np.testing.assert_allclose(rel.thetas[-1].matrix, ab.thetas[-1].matrix, atol=1e-12)


def test_unknown_grid_scale(rng):
    e = rng.standard_normal((60, 5))
    with pytest.raises(EstimationError, match="grid_scale"):
        rd_factor_glasso_fit(e, RegimeSegmentation.from_breaks(60), 1,
                             RdTuning((1.0,), (0.0,), grid_scale="relative"))
