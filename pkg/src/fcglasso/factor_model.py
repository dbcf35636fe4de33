"""Principal-component estimation of the approximate factor model for forecast errors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import EstimationError, PrecisionEstimate, sample_covariance, symmetric_eigendecomposition

MAX_FACTOR_CONDITION = 1e12


@dataclass(frozen=True)
class FactorDecomposition:
    """PCA fit ``e_t = B f_t + eps_t`` with ``B'B = I_q``.

    Attributes
    ----------
    loadings : ndarray (p, q)
    factors : ndarray (T, q)
    residuals : ndarray (T, p)
    sigma_f : ndarray (q, q)
    theta_f : PrecisionEstimate
    eigenvalues : ndarray (p,)
        Descending eigenvalues of the second-moment matrix of the errors.
    """

    loadings: np.ndarray
    factors: np.ndarray
    residuals: np.ndarray
    sigma_f: np.ndarray
    theta_f: PrecisionEstimate
    eigenvalues: np.ndarray

    @property
    def q(self) -> int:
        return self.loadings.shape[1]

    @property
    def sigma_eps(self) -> np.ndarray:
        return sample_covariance(self.residuals)


def _check_errors(errors) -> np.ndarray:
    e = np.asarray(errors, dtype=float)
    if e.ndim != 2:
        raise EstimationError(f"errors must be a T x p array, got shape {e.shape}")
    if not np.all(np.isfinite(e)):
        raise EstimationError("errors contain non-finite values")
    return e


def estimate_factors(errors, q: int, demean: bool = False) -> FactorDecomposition:
    """Estimate loadings as the leading ``q`` eigenvectors of (1/T) sum e_t e_t'."""
    e = _check_errors(errors)
    T, p = e.shape
    if not 1 <= q < min(T, p):
        raise EstimationError(f"need 1 <= q < min(T, p) = {min(T, p)}, got q={q}")
    if demean:
        e = e - e.mean(axis=0)
    vals, vecs = symmetric_eigendecomposition(sample_covariance(e))
    B = vecs[:, :q].copy()
    f = e @ B
    resid = e - f @ B.T
    sigma_f = sample_covariance(f)
    cond = np.linalg.cond(sigma_f)
    if not np.isfinite(cond) or cond > MAX_FACTOR_CONDITION:
        raise EstimationError(f"factor covariance is singular (condition number {cond:.3e})")
    theta_f = PrecisionEstimate.certify(np.linalg.inv(sigma_f))
    return FactorDecomposition(B, f, resid, sigma_f, theta_f, vals)


def residual_variance(errors, k: int) -> float:
    """V(k): mean squared residual of the k-factor PCA fit (k = 0 allowed)."""
    e = _check_errors(errors)
    T, p = e.shape
    vals = np.linalg.eigvalsh(sample_covariance(e))[::-1]
    # trace of the residual second moment equals the sum of the trailing eigenvalues
    return float(np.clip(vals[k:], 0.0, None).sum() / p)


def ic1(errors, k: int) -> float:
    e = _check_errors(errors)
    T, p = e.shape
    penalty = k * (p + T) / (p * T) * np.log(p * T / (p + T))
    return float(np.log(residual_variance(e, k)) + penalty)


def select_num_factors(errors, q_max: int) -> int:
    """Number of factors minimising the IC1 criterion over k = 1..q_max."""
    e = _check_errors(errors)
    T, p = e.shape
    if not 1 <= q_max < min(T, p):
        raise EstimationError(f"need 1 <= q_max < min(T, p) = {min(T, p)}, got {q_max}")
    vals = np.clip(np.linalg.eigvalsh(sample_covariance(e))[::-1], 0.0, None)
    tail = np.cumsum(vals[::-1])[::-1]
    ks = np.arange(1, q_max + 1)
    v = tail[ks] / p
    if np.any(v <= 0):
        # exact k-factor structure: the first k with zero residual wins
        return int(ks[np.argmax(v <= 0)])
    crit = np.log(v) + ks * (p + T) / (p * T) * np.log(p * T / (p + T))
    return int(ks[np.argmin(crit)])
