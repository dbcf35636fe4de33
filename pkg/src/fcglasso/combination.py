"""Combination weights from precision matrices, forecast scoring and DM tests."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.stats import norm

from .core import EstimationError, ForecastPanel, PrecisionEstimate, sample_covariance


@dataclass(frozen=True)
class CombinationWeights:
    weights: np.ndarray
    method_label: str = ""
    regime: Optional[int] = None

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 1 or not np.all(np.isfinite(w)):
            raise EstimationError("weights must be a finite vector")
        if abs(w.sum() - 1.0) > 1e-12:
            raise EstimationError(f"weights sum to {w.sum():.15g}, not one")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)


@dataclass(frozen=True)
class DMResult:
    statistic: float
    pvalue: float
    degenerate: bool = False


@dataclass(frozen=True)
class EvaluationRecord:
    msfe: float
    msfe_ratio_to_ew: float
    dm_statistic: float
    dm_pvalue: float
    a_hat: float = float("nan")
    weight_l1_error: Optional[float] = None


def _as_matrix(theta) -> np.ndarray:
    return theta.matrix if isinstance(theta, PrecisionEstimate) else np.asarray(theta, dtype=float)


def weights_from_precision(theta, method_label: str = "", regime: Optional[int] = None) -> CombinationWeights:
    """``w = Theta iota / (iota' Theta iota)``.

    The last weight absorbs the rounding residual so the sum is one to
    machine precision.
    """
    m = _as_matrix(theta)
    row = m.sum(axis=1)
    denom = row.sum()
    if not np.isfinite(denom) or denom <= 0:
        raise EstimationError(f"iota' Theta iota = {denom:.3e} is not positive")
    w = row / denom
    w[-1] = 1.0 - w[:-1].sum()
    return CombinationWeights(w, method_label, regime)


def a_hat(theta) -> float:
    """``iota' Theta iota / p``; the implied minimum MSFE is ``1 / (p a)``."""
    m = _as_matrix(theta)
    return float(m.sum() / m.shape[0])


def combined_forecast(panel: ForecastPanel, w, t: int) -> float:
    ww = w.weights if isinstance(w, CombinationWeights) else np.asarray(w, dtype=float)
    return float(panel.forecasts[t] @ ww)


def msfe(errors=None, weights=None, sigma=None) -> float:
    """Mean squared forecast error.

    With ``sigma`` the population form ``w' Sigma w`` is returned; otherwise
    ``errors`` are combined errors (1-d) or a panel of errors (2-d, combined
    with ``weights``) and the empirical mean of squares is returned.
    """
    if sigma is not None:
        w = weights.weights if isinstance(weights, CombinationWeights) else np.asarray(weights, dtype=float)
        return float(w @ np.asarray(sigma, dtype=float) @ w)
    e = np.asarray(errors, dtype=float)
    if e.ndim == 2:
        w = weights.weights if isinstance(weights, CombinationWeights) else np.asarray(weights, dtype=float)
        e = e @ w
    if e.size == 0:
        raise EstimationError("msfe of an empty error series")
    return float(np.mean(e ** 2))


def ew_precision_benchmark(errors) -> PrecisionEstimate:
    """Diagonal precision ``I / mu`` with ``mu`` the mean eigenvalue of the error covariance."""
    e = np.asarray(errors, dtype=float)
    if e.ndim != 2 or e.shape[0] < 2:
        raise EstimationError("need at least two periods of errors")
    S = sample_covariance(e)
    mu = np.trace(S) / S.shape[0]
    if mu <= 0:
        raise EstimationError("forecast errors have zero variance")
    return PrecisionEstimate.certify(np.eye(S.shape[0]) / mu)


def equal_weights(p: int) -> CombinationWeights:
    w = np.full(p, 1.0 / p)
    w[-1] = 1.0 - w[:-1].sum()
    return CombinationWeights(w, "ew")


def weight_error_l1(w_hat, w_true) -> float:
    a = w_hat.weights if isinstance(w_hat, CombinationWeights) else np.asarray(w_hat, dtype=float)
    b = w_true.weights if isinstance(w_true, CombinationWeights) else np.asarray(w_true, dtype=float)
    return float(np.abs(a - b).sum())


def precision_error(theta_hat, theta_true, kind: str = "operator") -> float:
    d = _as_matrix(theta_hat) - _as_matrix(theta_true)
    if kind == "operator":
        return float(np.linalg.norm(d, 2))
    if kind == "max":
        return float(np.abs(d).max())
    if kind == "frobenius":
        return float(np.linalg.norm(d, "fro"))
    if kind == "l1":
        return float(np.abs(d).sum(axis=0).max())
    raise ValueError(f"unknown norm kind {kind!r}")


def diebold_mariano(loss_a, loss_b, horizon: int = 1) -> DMResult:
    """One-sided DM test of H0: equal accuracy against H1: ``a`` has smaller loss.

    Long-run variance of ``d = loss_a - loss_b`` uses a Bartlett kernel with
    ``horizon - 1`` lags; the statistic is compared to N(0, 1).
    """
    a = np.asarray(loss_a, dtype=float)
    b = np.asarray(loss_b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise EstimationError("loss series must be 1-d and of equal length")
    if horizon < 1:
        raise EstimationError("horizon must be positive")
    H = a.size
    if H < 10:
        raise EstimationError(f"DM test needs at least 10 losses, got {H}")
    d = a - b
    dbar = d.mean()
    u = d - dbar
    lrv = u @ u / H
    for k in range(1, horizon):
        lrv += 2.0 * (1.0 - k / horizon) * (u[k:] @ u[:-k]) / H
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-300)
    if lrv <= (1e-14 * scale) ** 2:
        if abs(dbar) <= 1e-14 * scale:
            return DMResult(0.0, 1.0, degenerate=True)
        stat = -np.inf if dbar < 0 else np.inf
        return DMResult(stat, 0.0 if dbar < 0 else 1.0, degenerate=True)
    stat = dbar / np.sqrt(lrv / H)
    return DMResult(float(stat), float(norm.cdf(stat)))
