"""Regime-dependent factor GLASSO solved by consensus ADMM.

For regimes i = 1..N with residual covariances S_i and lengths n_i the solver
minimises

    sum_i n_i [tr(S_i Theta_i) - log det Theta_i] + alpha sum_i ||Theta_i||_od,1
        + beta sum_{i >= 2} psi(Theta_i - Theta_{i-1})

where the off-diagonal l1 norm weighs entry (l, q) of regime i by
sqrt(s_ll,i * s_qq,i). Each Theta_i has a copy Z_{i,0} carrying the sparsity
penalty and, for every neighbouring pair, copies (Z_{i-1,1}, Z_{i,2}) carrying
the smoothing penalty.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .combination import CombinationWeights, msfe, precision_error, weights_from_precision
from .core import EstimationError, PrecisionEstimate, check_symmetric, sample_covariance, symmetrize
from .factor_glasso import smw_combine
from .factor_model import FactorDecomposition, estimate_factors

log = logging.getLogger(__name__)

PENALTY_KINDS = ("lasso", "group_lasso", "ridge", "max_norm")
DEFAULT_GRID = (0.0, 0.25, 0.5, 1.0, 10.0, 30.0)


@dataclass(frozen=True)
class RegimeSegmentation:
    """Consecutive regimes covering periods ``0..T-1``.

    ``starts[i]`` is the first period of regime i; ``starts[0] == 0``.
    """

    starts: tuple
    T: int

    def __post_init__(self):
        starts = tuple(int(s) for s in self.starts)
        if not starts or starts[0] != 0:
            raise EstimationError("first regime must start at period 0")
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise EstimationError("break points must be strictly increasing")
        object.__setattr__(self, "starts", starts)
        lengths = self.segment_lengths
        if len(starts) > self.T:
            raise EstimationError("more regimes than periods")
        if min(lengths) < 2:
            raise EstimationError(f"every regime needs at least 2 periods, got lengths {lengths}")

    @classmethod
    def from_breaks(cls, T: int, breaks: Sequence[int] = ()) -> "RegimeSegmentation":
        """``breaks`` are the first periods of regimes 2..N."""
        return cls((0, *sorted(int(b) for b in breaks)), int(T))

    @property
    def N(self) -> int:
        return len(self.starts)

    @property
    def break_points(self) -> tuple:
        return self.starts[1:]

    @property
    def segment_lengths(self) -> tuple:
        ends = self.starts[1:] + (self.T,)
        return tuple(e - s for s, e in zip(self.starts, ends))

    def slices(self) -> list[slice]:
        ends = self.starts[1:] + (self.T,)
        return [slice(s, e) for s, e in zip(self.starts, ends)]

    def regime_of(self, t: int) -> int:
        """Regime index of period ``t``; periods past the end belong to the last regime."""
        return int(np.searchsorted(self.starts, t, side="right") - 1)

    def truncate(self, T_new: int) -> "RegimeSegmentation":
        """Restrict to periods ``0..T_new-1``, folding a too-short tail regime into its neighbour."""
        starts = [s for s in self.starts if s < T_new]
        while len(starts) > 1 and T_new - starts[-1] < 2:
            starts.pop()
        return RegimeSegmentation(tuple(starts), T_new)


@dataclass(frozen=True)
class SmoothingPenalty:
    kind: str = "ridge"
    beta: float = 0.0

    def __post_init__(self):
        if self.kind not in PENALTY_KINDS:
            raise EstimationError(f"unknown smoothing penalty {self.kind!r}")
        if self.beta < 0:
            raise EstimationError("beta must be nonnegative")

    def value(self, x: np.ndarray) -> float:
        if self.kind == "ridge":
            return float(self.beta * np.sum(x ** 2))
        if self.kind == "lasso":
            return float(self.beta * np.sum(np.abs(x)))
        if self.kind == "group_lasso":
            return float(self.beta * np.sum(np.linalg.norm(x, axis=0)))
        return float(self.beta * np.sum(np.abs(x).max(axis=0)))


def soft_threshold(x, kappa):
    """``sign(x) * max(|x| - kappa, 0)``, elementwise."""
    kappa = np.asarray(kappa, dtype=float)
    if np.any(kappa < 0):
        raise EstimationError("threshold must be nonnegative")
    x = np.asarray(x, dtype=float)
    out = np.sign(x) * np.maximum(np.abs(x) - kappa, 0.0)
    return float(out) if out.ndim == 0 else out


def prox_pair(A, Bm, penalty: SmoothingPenalty, rho: float) -> tuple[np.ndarray, np.ndarray]:
    """Minimise ``rho/2 (||A - Z2||^2 + ||Bm - Z1||^2) + beta psi(Z2 - Z1)``.

    Returns ``(Z2, Z1)``.
    """
    if rho <= 0:
        raise EstimationError("rho must be positive")
    A = np.asarray(A, dtype=float)
    Bm = np.asarray(Bm, dtype=float)
    if A.shape != Bm.shape:
        raise EstimationError("prox arguments must have equal shapes")
    beta = penalty.beta
    if beta == 0:
        return A.copy(), Bm.copy()
    diff = A - Bm
    if penalty.kind == "ridge":
        step = 2.0 * beta * diff / (rho + 4.0 * beta)
        return A - step, Bm + step
    if penalty.kind == "lasso":
        k = beta / rho
        tied = np.abs(diff) <= 2.0 * k
        mid = (A + Bm) / 2.0
        s = np.sign(diff)
        return np.where(tied, mid, A - k * s), np.where(tied, mid, Bm + k * s)
    raise NotImplementedError(f"prox for {penalty.kind!r} smoothing is not implemented")


def theta_step(A_k, Sigma_i, n_i: int, rho: float, copies: int = 3) -> PrecisionEstimate:
    """Minimise ``tr(S Theta) - log det Theta + 1/(2 eta) ||Theta - A||_F^2``.

    ``eta = n_i / (copies * rho)``. With ``copies = 3`` the solution is
    ``n_i/(6 rho) Q (L + sqrt(L^2 + 12 rho / n_i)) Q'`` where ``Q L Q'`` is the
    eigendecomposition of ``A/eta - S``.
    """
    A = symmetrize(np.asarray(A_k, dtype=float))
    S = np.asarray(Sigma_i, dtype=float)
    if rho <= 0 or n_i <= 0 or copies < 1:
        raise EstimationError("theta_step needs positive rho, n_i and copies")
    eta = n_i / (copies * rho)
    try:
        lam, Q = np.linalg.eigh(A / eta - S)
    except np.linalg.LinAlgError as exc:
        raise EstimationError("eigendecomposition failed in theta step") from exc
    v = (eta / 2.0) * (lam + np.sqrt(lam ** 2 + 4.0 / eta))
    theta = symmetrize((Q * v) @ Q.T)
    return PrecisionEstimate(theta, is_pd_certified=bool(np.all(v > 0)))


def _theta_step_array(A, S, n, rho, copies):
    eta = n / (copies * rho)
    lam, Q = np.linalg.eigh(symmetrize(A) / eta - S)
    v = (eta / 2.0) * (lam + np.sqrt(lam ** 2 + 4.0 / eta))
    return symmetrize((Q * v) @ Q.T)


def penalty_scales(covs: np.ndarray) -> np.ndarray:
    """Per-regime matrices sqrt(s_ll s_qq) with a zero diagonal."""
    g = np.sqrt(np.einsum("ijj->ij", covs))
    W = g[:, :, None] * g[:, None, :]
    idx = np.arange(covs.shape[1])
    W[:, idx, idx] = 0.0
    return W


def rd_objective(thetas, covs, ns, alpha: float, penalty: SmoothingPenalty) -> float:
    covs = np.asarray(covs, dtype=float)
    th = np.asarray([t.matrix if isinstance(t, PrecisionEstimate) else t for t in thetas], dtype=float)
    W = penalty_scales(covs)
    total = 0.0
    for i in range(len(th)):
        sign, logdet = np.linalg.slogdet(th[i])
        if sign <= 0:
            return np.inf
        total += ns[i] * (np.sum(covs[i] * th[i]) - logdet)
        total += alpha * np.sum(W[i] * np.abs(th[i]))
    for i in range(1, len(th)):
        total += penalty.value(th[i] - th[i - 1])
    return float(total)


@dataclass(frozen=True)
class AdmmStop:
    eps_abs: Optional[float] = None  # None: 1e-6 * p
    eps_rel: float = 0.0
    max_iter: int = 5000
    adapt_rho: bool = False


@dataclass
class AdmmState:
    thetas: np.ndarray
    Z0: np.ndarray
    Z1: np.ndarray
    Z2: np.ndarray
    U0: np.ndarray
    U1: np.ndarray
    U2: np.ndarray
    rho: float
    iteration: int = 0

    @classmethod
    def initial(cls, thetas: np.ndarray, rho: float) -> "AdmmState":
        z = thetas.copy()
        return cls(
            thetas=thetas.copy(), Z0=z.copy(), Z1=z[:-1].copy(), Z2=z[1:].copy(),
            U0=np.zeros_like(z), U1=np.zeros_like(z[:-1]), U2=np.zeros_like(z[1:]), rho=rho,
        )


@dataclass
class RdAdmmResult:
    thetas: list
    sparse: list
    converged: bool
    n_iter: int
    primal_residuals: list = field(default_factory=list)
    dual_residuals: list = field(default_factory=list)
    state: Optional[AdmmState] = None
    objective: float = float("nan")


def regime_covariances(residuals_by_regime) -> tuple[np.ndarray, np.ndarray]:
    covs, ns = [], []
    for seg in residuals_by_regime:
        x = np.asarray(seg, dtype=float)
        if x.ndim != 2 or x.shape[0] < 1:
            raise EstimationError("each regime needs a 2-d block of residuals")
        covs.append(sample_covariance(x))
        ns.append(x.shape[0])
    return np.asarray(covs), np.asarray(ns, dtype=float)


def _singular(m: np.ndarray) -> bool:
    ev = np.linalg.eigvalsh(m)
    return ev[0] <= 1e-10 * max(ev[-1], 1e-300)


def _check_bounded(covs: np.ndarray, ns: np.ndarray, penalty: SmoothingPenalty) -> None:
    # without the l1 term the likelihood is unbounded along a shared null direction
    if penalty.beta == 0 or covs.shape[0] == 1:
        if any(_singular(c) for c in covs):
            raise EstimationError("alpha = 0 with a singular regime covariance has no minimiser")
    elif _singular(np.tensordot(ns, covs, axes=1)):
        raise EstimationError("alpha = 0 with a singular pooled covariance has no minimiser")


def rd_admm_solve(
    residuals_by_regime=None,
    alpha: float = 0.0,
    penalty: SmoothingPenalty = SmoothingPenalty(),
    rho: float = 1.0,
    stop: AdmmStop = AdmmStop(),
    covs=None,
    ns=None,
    init: Optional[AdmmState] = None,
) -> RdAdmmResult:
    """Jointly estimate the idiosyncratic precision of every regime.

    Either ``residuals_by_regime`` (a list of n_i x p arrays) or precomputed
    ``covs``/``ns`` must be given. ``init`` warm-starts from an earlier state.
    """
    if covs is None:
        covs, ns = regime_covariances(residuals_by_regime)
    covs = np.asarray(covs, dtype=float)
    ns = np.asarray(ns, dtype=float)
    for c in covs:
        check_symmetric(c, "regime covariance")
    N, p, _ = covs.shape
    if N < 1:
        raise EstimationError("need at least one regime")
    if alpha < 0:
        raise EstimationError("alpha must be nonnegative")
    if alpha == 0:
        _check_bounded(covs, ns, penalty)
    eps_abs = stop.eps_abs if stop.eps_abs is not None else 1e-6 * p

    if init is not None:
        st = AdmmState(**{k: (np.array(v) if isinstance(v, np.ndarray) else v)
                          for k, v in vars(init).items()})
        st.iteration = 0
        if st.rho != rho and not stop.adapt_rho:
            scale = st.rho / rho
            st.U0 *= scale
            st.U1 *= scale
            st.U2 *= scale
            st.rho = rho
    else:
        diag = np.einsum("ijj->ij", covs)
        start = np.zeros_like(covs)
        idx = np.arange(p)
        start[:, idx, idx] = 1.0 / np.maximum(diag, 1e-12)
        st = AdmmState.initial(start, rho)

    kappa_base = alpha * penalty_scales(covs)
    copies = np.ones(N)
    copies[:-1] += 1
    copies[1:] += 1

    prim_hist, dual_hist = [], []
    best = None
    converged = False
    it = 0
    for it in range(1, stop.max_iter + 1):
        rho = st.rho
        # Theta step: average the available consensus copies
        A = st.Z0 - st.U0
        A[:-1] += st.Z1 - st.U1
        A[1:] += st.Z2 - st.U2
        A /= copies[:, None, None]
        for i in range(N):
            st.thetas[i] = _theta_step_array(A[i], covs[i], ns[i], rho, copies[i])

        Z0_old, Z1_old, Z2_old = st.Z0, st.Z1, st.Z2
        V = st.thetas + st.U0
        Z0 = soft_threshold(V, kappa_base / rho)
        Z1 = np.empty_like(Z1_old)
        Z2 = np.empty_like(Z2_old)
        for i in range(1, N):
            Z2[i - 1], Z1[i - 1] = prox_pair(st.thetas[i] + st.U2[i - 1],
                                             st.thetas[i - 1] + st.U1[i - 1], penalty, rho)
        st.Z0, st.Z1, st.Z2 = Z0, Z1, Z2

        r0 = st.thetas - Z0
        r1 = st.thetas[:-1] - Z1
        r2 = st.thetas[1:] - Z2
        st.U0 += r0
        st.U1 += r1
        st.U2 += r2

        prim = max(
            np.sqrt(np.max(np.sum(r0 ** 2, axis=(1, 2)))),
            np.sqrt(np.max(np.sum(r1 ** 2, axis=(1, 2)))) if N > 1 else 0.0,
            np.sqrt(np.max(np.sum(r2 ** 2, axis=(1, 2)))) if N > 1 else 0.0,
        )
        dual = rho * np.sqrt(np.sum((Z0 - Z0_old) ** 2) + np.sum((Z1 - Z1_old) ** 2)
                             + np.sum((Z2 - Z2_old) ** 2))
        prim_hist.append(float(prim))
        dual_hist.append(float(dual))
        st.iteration = it

        size = max(np.sqrt(np.max(np.sum(st.thetas ** 2, axis=(1, 2)))),
                   np.sqrt(np.max(np.sum(Z0 ** 2, axis=(1, 2)))))
        eps_pri = eps_abs + stop.eps_rel * size
        eps_dual = eps_abs + stop.eps_rel * rho * np.sqrt(np.sum(st.U0 ** 2))
        if prim < eps_pri and dual < eps_dual:
            converged = True
            break
        score = max(prim / eps_pri, dual / eps_dual)
        if best is None or score < best[0]:
            best = (score, st.thetas.copy(), Z0.copy())

        if stop.adapt_rho:
            if prim > 10.0 * dual:
                _rescale(st, 2.0)
            elif dual > 10.0 * prim:
                _rescale(st, 0.5)

    if converged or best is None:
        thetas, sparse = st.thetas.copy(), st.Z0.copy()
    else:
        log.info("ADMM hit the iteration cap (%d) without converging", stop.max_iter)
        thetas, sparse = best[1], best[2]
    out_thetas = [PrecisionEstimate(symmetrize(t), tau=alpha, is_pd_certified=_pd(t),
                                    converged=converged, n_iter=it) for t in thetas]
    return RdAdmmResult(
        thetas=out_thetas,
        sparse=[symmetrize(z) for z in sparse],
        converged=converged,
        n_iter=it,
        primal_residuals=prim_hist,
        dual_residuals=dual_hist,
        state=st,
        objective=rd_objective(thetas, covs, ns, alpha, penalty),
    )


def _rescale(st: AdmmState, factor: float) -> None:
    st.rho *= factor
    st.U0 /= factor
    st.U1 /= factor
    st.U2 /= factor


def _pd(m: np.ndarray) -> bool:
    try:
        np.linalg.cholesky(symmetrize(m))
    except np.linalg.LinAlgError:
        return False
    return True


# ---------------------------------------------------------------------------
# full RD-Factor GLASSO pipeline


@dataclass(frozen=True)
class RdTuning:
    alpha_grid: tuple = DEFAULT_GRID
    beta_grid: tuple = DEFAULT_GRID
    criterion: str = "msfe"  # "msfe" or "precision"
    train_fraction: float = 2.0 / 3.0
    refit: bool = True
    # with the precision criterion, fit candidates on the full sample rather than the training split
    precision_full_sample: bool = True
    # "per_observation": grid values are multiplied by the mean regime length T/N,
    # so that alpha / n_i plays the role of the single-regime tau
    grid_scale: str = "absolute"

    def scale(self, segmentation: "RegimeSegmentation") -> float:
        if self.grid_scale == "absolute":
            return 1.0
        if self.grid_scale == "per_observation":
            return segmentation.T / segmentation.N
        raise EstimationError(f"unknown grid_scale {self.grid_scale!r}")


@dataclass
class RdFactorGlassoResult:
    decomposition: FactorDecomposition
    segmentation: RegimeSegmentation
    theta_eps: list
    thetas: list
    weights: list
    alpha: float
    beta: float
    admm: RdAdmmResult
    tuning_scores: dict = field(default_factory=dict)  # keyed by raw grid point
    grid_point: tuple = ()  # chosen (alpha, beta) before grid scaling

    @property
    def current_weights(self) -> CombinationWeights:
        return self.weights[-1]


def _fit_fixed(e: np.ndarray, seg: RegimeSegmentation, q: int, alpha: float,
               penalty: SmoothingPenalty, rho: float, stop: AdmmStop, demean: bool,
               init: Optional[AdmmState] = None):
    dec = estimate_factors(e, q, demean=demean)
    blocks = [dec.residuals[s] for s in seg.slices()]
    res = rd_admm_solve(blocks, alpha=alpha, penalty=penalty, rho=rho, stop=stop, init=init)
    thetas = [smw_combine(te, dec.theta_f, dec.loadings) for te in res.thetas]
    weights = [weights_from_precision(t, "rd_factor_glasso", regime=i) for i, t in enumerate(thetas)]
    return dec, res, thetas, weights


def rd_factor_glasso_fit(
    errors,
    segmentation: RegimeSegmentation,
    q: int,
    tuning: RdTuning = RdTuning(),
    penalty_kind: str = "ridge",
    rho: float = 1.0,
    stop: AdmmStop = AdmmStop(),
    true_thetas: Optional[Sequence] = None,
    demean: bool = False,
    init: Optional[AdmmState] = None,
) -> RdFactorGlassoResult:
    """Factor estimation, joint regime precisions by ADMM, and per-regime weights.

    With ``criterion="msfe"`` each grid pair is fitted on the first
    ``train_fraction`` of periods and scored by the MSFE of the combined
    validation errors (each period uses the weights of its regime); the chosen
    pair is refitted on the full sample when ``tuning.refit``. With
    ``criterion="precision"`` the score is the mean operator-norm distance to
    ``true_thetas`` and, unless ``precision_full_sample`` is False, every pair
    is fitted on the full sample since no held-out periods are needed.
    """
    e = np.asarray(errors, dtype=float)
    T, p = e.shape
    if segmentation.T != T:
        raise EstimationError(f"segmentation covers {segmentation.T} periods, errors have {T}")
    if not tuning.alpha_grid or not tuning.beta_grid:
        raise EstimationError("tuning grids must be nonempty")
    if tuning.criterion not in ("msfe", "precision"):
        raise EstimationError(f"unknown tuning criterion {tuning.criterion!r}")
    if tuning.criterion == "precision" and true_thetas is None:
        raise EstimationError("precision criterion needs the true regime precisions")

    pairs = list(itertools.product(tuning.alpha_grid, tuning.beta_grid))
    c = tuning.scale(segmentation)
    scores: dict = {}
    if len(pairs) == 1:
        a, b = pairs[0]
        penalty = SmoothingPenalty(penalty_kind, c * b)
        dec, res, thetas, weights = _fit_fixed(e, segmentation, q, c * a, penalty, rho, stop,
                                               demean, init)
        return RdFactorGlassoResult(dec, segmentation, res.thetas, thetas, weights,
                                    float(c * a), float(c * b), res, scores, (a, b))

    if tuning.criterion == "precision" and tuning.precision_full_sample:
        # the truth is the yardstick, so no periods need to be held out
        n_train, seg_fit, e_fit = T, segmentation, e
    else:
        n_train = int(round(tuning.train_fraction * T))
        if n_train < 4 or T - n_train < 1:
            raise EstimationError("sample too short for the validation split")
        seg_fit, e_fit = segmentation.truncate(n_train), e[:n_train]
    e_val = e[n_train:]
    fits: dict = {}
    for a, b in pairs:
        pen = SmoothingPenalty(penalty_kind, c * b)
        try:
            fit = _fit_fixed(e_fit, seg_fit, q, c * a, pen, rho, stop, demean, init)
        except EstimationError as exc:
            log.info("skipping (alpha=%g, beta=%g): %s", a, b, exc)
            continue
        _, res, thetas, weights = fit
        init = res.state
        if tuning.criterion == "msfe":
            regimes = [segmentation.regime_of(n_train + h) for h in range(len(e_val))]
            # validation regimes beyond those seen in training reuse the last one
            comb = np.array([
                e_val[h] @ weights[min(r, len(weights) - 1)].weights
                for h, r in enumerate(regimes)
            ])
            scores[(a, b)] = msfe(comb)
        else:
            scores[(a, b)] = float(np.mean([
                precision_error(thetas[i], true_thetas[min(i, len(true_thetas) - 1)])
                for i in range(len(thetas))
            ]))
        fits[(a, b)] = fit
    if not scores:
        raise EstimationError("every (alpha, beta) pair failed during tuning")
    # ties: prefer the smoother, sparser pair (larger beta, then larger alpha)
    a, b = min(scores, key=lambda ab: (scores[ab], -ab[1], -ab[0]))

    if n_train == T or not tuning.refit:
        dec, res, thetas, weights = fits[(a, b)]
        seg_out = seg_fit
    else:
        penalty = SmoothingPenalty(penalty_kind, c * b)
        dec, res, thetas, weights = _fit_fixed(e, segmentation, q, c * a, penalty, rho, stop, demean)
        seg_out = segmentation
    return RdFactorGlassoResult(dec, seg_out, res.thetas, thetas, weights, float(c * a),
                                float(c * b), res, scores, (a, b))
