"""Factor GLASSO: PCA factors, sparse idiosyncratic precision, low-rank recombination."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .core import EstimationError, PrecisionEstimate, check_symmetric, sample_covariance, symmetrize
from .factor_model import FactorDecomposition, estimate_factors, select_num_factors
from .glasso import GlassoConfig, build_tau_grid, glasso_tune

# relative floor on the residual variances below which Sigma_eps is treated as degenerate
DEGENERATE_VARIANCE = 1e-10


@dataclass(frozen=True)
class GridParams:
    M: int = 10
    vartheta: float | None = None  # None: sqrt(log p / T) + 1 / sqrt(p)


@dataclass(frozen=True)
class FactorGlassoResult:
    decomposition: FactorDecomposition
    theta_eps: PrecisionEstimate
    theta: PrecisionEstimate
    chosen_tau: float


def smw_combine(theta_eps, theta_f, B) -> PrecisionEstimate:
    """Precision of ``B Sigma_f B' + Sigma_eps`` from the two component precisions.

    ``Theta = Theta_eps - Theta_eps B [Theta_f + B' Theta_eps B]^{-1} B' Theta_eps``
    """
    te = theta_eps.matrix if isinstance(theta_eps, PrecisionEstimate) else theta_eps
    tf = theta_f.matrix if isinstance(theta_f, PrecisionEstimate) else theta_f
    te = check_symmetric(te, "theta_eps")
    tf = np.atleast_2d(check_symmetric(np.atleast_2d(tf), "theta_f"))
    B = np.asarray(B, dtype=float).reshape(te.shape[0], -1)
    if B.shape[1] != tf.shape[0]:
        raise EstimationError(f"loadings have {B.shape[1]} columns but theta_f is {tf.shape}")
    teB = te @ B
    inner = tf + B.T @ teB
    try:
        factor = cho_factor(symmetrize(inner))
    except np.linalg.LinAlgError as exc:
        raise EstimationError("inner q x q system is singular") from exc
    theta = te - teB @ cho_solve(factor, teB.T)
    tau = theta_eps.tau if isinstance(theta_eps, PrecisionEstimate) else 0.0
    return PrecisionEstimate.certify(symmetrize(theta), tau=tau)


def _check_residual_cov(S_eps: np.ndarray, scale: float) -> None:
    d = np.diag(S_eps)
    if np.any(d <= DEGENERATE_VARIANCE * max(scale, 1e-300)):
        j = int(np.argmin(d))
        raise EstimationError(
            f"residual covariance is degenerate: variance of series {j} is {d[j]:.3e}"
        )


def _resolve_q(e: np.ndarray, q: Union[int, str], q_max: int | None) -> int:
    T, p = e.shape
    if q == "auto":
        qm = q_max if q_max is not None else max(1, min(8, min(T, p) - 1))
        return select_num_factors(e, qm)
    q = int(q)
    if q < 1:
        raise EstimationError("factor pipeline requires q >= 1; use plain glasso instead")
    return q


def factor_glasso_fit(
    errors,
    q: Union[int, str] = "auto",
    grid_params: GridParams | None = None,
    glasso_cfg: GlassoConfig | None = None,
    q_max: int | None = None,
    demean: bool = False,
) -> FactorGlassoResult:
    """Run the three-step Factor GLASSO estimator on a T x p error panel."""
    e = np.asarray(errors, dtype=float)
    if e.ndim != 2 or e.shape[0] < 4 or e.shape[1] < 2:
        raise EstimationError(f"need T >= 4 and p >= 2, got shape {e.shape}")
    T, p = e.shape
    grid_params = grid_params or GridParams()
    qq = _resolve_q(e, q, q_max)
    dec = estimate_factors(e, qq, demean=demean)
    S_eps = dec.sigma_eps
    _check_residual_cov(S_eps, float(np.mean(dec.eigenvalues[:qq])))
    grid = build_tau_grid(S_eps, grid_params.M, grid_params.vartheta, T=T)
    theta_eps, tau = glasso_tune(S_eps, T, grid, glasso_cfg)
    theta = smw_combine(theta_eps, dec.theta_f, dec.loadings)
    return FactorGlassoResult(dec, theta_eps, theta, tau)


def not_sparse_fit(errors, q: Union[int, str] = "auto", q_max: int | None = None,
                   demean: bool = False, ridge: float = 1e-8) -> FactorGlassoResult:
    """Factor model with an unpenalised idiosyncratic precision (tau = 0).

    A tiny ridge ``ridge * trace(S_eps) / p`` keeps the inverse defined when p is
    close to T.
    """
    e = np.asarray(errors, dtype=float)
    T, p = e.shape
    qq = _resolve_q(e, q, q_max)
    dec = estimate_factors(e, qq, demean=demean)
    S_eps = dec.sigma_eps
    delta = ridge * np.trace(S_eps) / p
    theta_eps = PrecisionEstimate.certify(np.linalg.inv(S_eps + delta * np.eye(p)))
    theta = smw_combine(theta_eps, dec.theta_f, dec.loadings)
    return FactorGlassoResult(dec, theta_eps, theta, 0.0)


def plain_glasso_fit(errors, grid_params: GridParams | None = None,
                     glasso_cfg: GlassoConfig | None = None) -> tuple[PrecisionEstimate, float]:
    """BIC-tuned weighted GLASSO on the raw forecast errors (no factors)."""
    e = np.asarray(errors, dtype=float)
    T, p = e.shape
    grid_params = grid_params or GridParams()
    S = sample_covariance(e)
    grid = build_tau_grid(S, grid_params.M, grid_params.vartheta, T=T)
    return glasso_tune(S, T, grid, glasso_cfg)
