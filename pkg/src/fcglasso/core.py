"""Shared matrix and panel types plus small linear-algebra helpers."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

SYMMETRY_TOL = 1e-8
DEFAULT_ZERO_TOL = 1e-10


class EstimationError(ValueError):
    """Raised when an estimator receives input it cannot work with."""


class NonFiniteError(EstimationError):
    pass


def check_symmetric(m, name: str = "matrix", tol: float = SYMMETRY_TOL) -> np.ndarray:
    """Validate a square, finite, symmetric matrix and return it as float array.

    Symmetry is checked relative to the largest entry; small rounding
    asymmetry is removed by averaging with the transpose.
    """
    a = np.asarray(m, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise EstimationError(f"{name} must be square, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        bad = np.argwhere(~np.isfinite(a))[0]
        raise NonFiniteError(f"{name} has non-finite entry at {tuple(bad)}")
    scale = max(1.0, float(np.max(np.abs(a)))) if a.size else 1.0
    if a.size and np.max(np.abs(a - a.T)) > tol * scale:
        raise EstimationError(
            f"{name} is not symmetric (max |a - a'| = {np.max(np.abs(a - a.T)):.3e})"
        )
    return (a + a.T) / 2.0


def symmetrize(a: np.ndarray) -> np.ndarray:
    return (a + a.T) / 2.0


@dataclass(frozen=True)
class PrecisionEstimate:
    """A symmetric precision matrix together with how it was produced.

    Attributes
    ----------
    matrix : ndarray of shape (p, p)
    tau : float
        Shrinkage intensity used by the estimator (0 when not applicable).
    is_pd_certified : bool
        True when positive definiteness was verified by a Cholesky factorization.
    converged : bool
        False when an iterative solver hit its iteration cap.
    n_iter : int
    """

    matrix: np.ndarray
    tau: float = 0.0
    is_pd_certified: bool = False
    converged: bool = True
    n_iter: int = 0
    info: dict = field(default_factory=dict, compare=False)

    @classmethod
    def certify(cls, matrix, tau: float = 0.0, **kwargs) -> "PrecisionEstimate":
        m = symmetrize(np.asarray(matrix, dtype=float))
        m.setflags(write=False)
        return cls(m, tau=float(tau), is_pd_certified=is_positive_definite(m), **kwargs)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def sparsity(self, zero_tol: float = DEFAULT_ZERO_TOL) -> "SparsityStats":
        return sparsity_stats(self.matrix, zero_tol)


@dataclass(frozen=True)
class SparsityStats:
    """Vertex degrees of the graph implied by the off-diagonal support."""

    degree_per_vertex: np.ndarray
    max_degree: int
    edge_count: int
    pattern: frozenset

    @property
    def n_undirected_edges(self) -> int:
        return len(self.pattern)


@dataclass(frozen=True)
class ForecastPanel:
    """T periods of p competing forecasts and the realized target.

    Forecast errors follow the convention ``e_t = yhat_t - y_t``.
    """

    times: tuple
    forecasts: np.ndarray
    actuals: np.ndarray
    forecaster_ids: tuple

    def __post_init__(self):
        f = np.asarray(self.forecasts, dtype=float)
        y = np.asarray(self.actuals, dtype=float)
        if f.ndim != 2:
            raise EstimationError("forecasts must be a T x p matrix")
        T, p = f.shape
        if T < 2 or p < 2:
            raise EstimationError(f"panel needs T >= 2 and p >= 2, got T={T}, p={p}")
        if y.shape != (T,):
            raise EstimationError(f"actuals must have length {T}, got shape {y.shape}")
        if len(self.times) != T or len(self.forecaster_ids) != p:
            raise EstimationError("labels do not match panel dimensions")
        if not (np.all(np.isfinite(f)) and np.all(np.isfinite(y))):
            raise EstimationError("panel contains missing or non-finite values")
        f.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "forecasts", f)
        object.__setattr__(self, "actuals", y)
        object.__setattr__(self, "times", tuple(self.times))
        object.__setattr__(self, "forecaster_ids", tuple(self.forecaster_ids))

    @classmethod
    def from_arrays(cls, forecasts, actuals, times: Optional[Sequence] = None,
                    forecaster_ids: Optional[Sequence] = None) -> "ForecastPanel":
        f = np.asarray(forecasts, dtype=float)
        T, p = f.shape
        times = tuple(range(T)) if times is None else tuple(times)
        ids = tuple(f"f{j + 1}" for j in range(p)) if forecaster_ids is None else tuple(forecaster_ids)
        return cls(times, f, np.asarray(actuals, dtype=float), ids)

    @property
    def T(self) -> int:
        return self.forecasts.shape[0]

    @property
    def p(self) -> int:
        return self.forecasts.shape[1]

    @property
    def errors(self) -> np.ndarray:
        return self.forecasts - self.actuals[:, None]


def symmetric_eigendecomposition(m) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues in descending order and orthonormal eigenvectors.

    Each eigenvector is sign-normalised so that its largest-magnitude
    component is positive, which makes results reproducible across
    LAPACK builds.
    """
    a = check_symmetric(m)
    vals, vecs = np.linalg.eigh(a)
    vals = vals[::-1]
    vecs = vecs[:, ::-1]
    idx = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[idx, np.arange(vecs.shape[1])])
    signs[signs == 0] = 1.0
    return vals.copy(), vecs * signs


def is_positive_definite(m) -> bool:
    a = np.asarray(m, dtype=float)
    if not np.all(np.isfinite(a)):
        return False
    try:
        np.linalg.cholesky(symmetrize(a))
    except np.linalg.LinAlgError:
        return False
    return True


def sparsity_stats(m, zero_tol: float = DEFAULT_ZERO_TOL) -> SparsityStats:
    """Degrees d_j, max degree d and edge count s of the off-diagonal support.

    ``edge_count`` sums the vertex degrees, so every undirected edge is
    counted twice; ``pattern`` holds each edge once as ``(i, j)`` with i < j.
    """
    if zero_tol < 0:
        raise EstimationError("zero_tol must be nonnegative")
    a = np.asarray(m, dtype=float)
    adj = np.abs(a) > zero_tol
    np.fill_diagonal(adj, False)
    # treat an entry as an edge if either triangle carries it
    adj = adj | adj.T
    degrees = adj.sum(axis=1).astype(int)
    iu, ju = np.nonzero(np.triu(adj, 1))
    return SparsityStats(
        degree_per_vertex=degrees,
        max_degree=int(degrees.max()) if degrees.size else 0,
        edge_count=int(degrees.sum()),
        pattern=frozenset(zip(iu.tolist(), ju.tolist())),
    )


def sample_covariance(x, demean: bool = False) -> np.ndarray:
    """(1/T) sum_t x_t x_t' for a T x p array."""
    x = np.asarray(x, dtype=float)
    if demean:
        x = x - x.mean(axis=0)
    return symmetrize(x.T @ x / x.shape[0])
