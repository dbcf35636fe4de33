"""Monte Carlo designs: sparse-precision recovery and FAR forecast combination."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import cholesky, solve_triangular, toeplitz

from .combination import (
    ew_precision_benchmark,
    precision_error,
    weight_error_l1,
    weights_from_precision,
)
from .core import EstimationError, ForecastPanel, PrecisionEstimate
from .factor_glasso import factor_glasso_fit, plain_glasso_fit, smw_combine
from .factor_model import estimate_factors
from .rd_admm import AdmmStop, RdTuning, RegimeSegmentation, rd_factor_glasso_fit

log = logging.getLogger(__name__)


def rng_for(seed: int, rep: int = 0) -> np.random.Generator:
    """Independent generator for replication ``rep`` of a run seeded by ``seed``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(rep)]))


# ---------------------------------------------------------------------------
# sparse idiosyncratic precision


@dataclass(frozen=True)
class SparsePrecisionSpec:
    p: int
    edge_probability: float
    min_coef: float = 0.1
    max_coef: float = 0.3
    mixed_signs: bool = False
    margin: float = 0.05
    scaling: str = "dominance"  # or "spectral"

    def __post_init__(self):
        if self.scaling not in ("dominance", "spectral"):
            raise EstimationError(f"unknown scaling {self.scaling!r}")
        if not 0 <= self.edge_probability < 1:
            raise EstimationError("edge probability must lie in [0, 1)")
        if not 0 < self.min_coef <= self.max_coef < 1:
            raise EstimationError("need 0 < min_coef <= max_coef < 1")


def paper_edge_probability(p: int, T: int) -> float:
    return min(1.0, 500.0 / (p * T ** 0.8))


def draw_adjacency(p: int, prob: float, rng: np.random.Generator) -> np.ndarray:
    upper = np.triu(rng.random((p, p)) < prob, 1)
    return upper | upper.T


def generate_sparse_precisions(
    specs: Sequence[SparsePrecisionSpec], rng: np.random.Generator
) -> list[PrecisionEstimate]:
    """Precisions sharing one random graph, one per coefficient range in ``specs``.

    Partial correlations ``u`` are drawn once per edge as quantiles of each
    spec's ``[min_coef, max_coef]`` range and placed as ``-u`` on a unit
    diagonal. If the largest matrix is not positive definite with the
    requested eigenvalue margin, every matrix is shrunk by the same factor,
    which keeps the zero pattern and the ordering of magnitudes across specs.
    """
    p = specs[0].p
    adj = draw_adjacency(p, specs[0].edge_probability, rng)
    quant = np.triu(rng.random((p, p)), 1)
    signs = np.triu(np.where(rng.random((p, p)) < 0.5, -1.0, 1.0), 1)
    mats = []
    for spec in specs:
        mag = spec.min_coef + quant * (spec.max_coef - spec.min_coef)
        if spec.mixed_signs:
            mag = mag * signs
        v = np.where(np.triu(adj, 1), mag, 0.0)
        mats.append(v + v.T)
    margin = max(s.margin for s in specs)
    if specs[0].scaling == "dominance":
        # largest off-diagonal row mass; diagonal dominance then certifies PD
        bound = max(np.abs(v).sum(axis=1).max() for v in mats)
    else:
        bound = max(np.abs(np.linalg.eigvalsh(v)).max() if v.any() else 0.0 for v in mats)
    shrink = min(1.0, (1.0 - margin) / bound) if bound > 0 else 1.0
    out = []
    for v in mats:
        theta = np.eye(p) - shrink * v
        est = PrecisionEstimate.certify(theta, info={"shrink": shrink, "adjacency": adj})
        if not est.is_pd_certified:
            raise EstimationError("generated precision is not positive definite; retry with a new seed")
        out.append(est)
    return out


def generate_sparse_precision(spec: SparsePrecisionSpec, rng: np.random.Generator) -> PrecisionEstimate:
    return generate_sparse_precisions([spec], rng)[0]


def partial_correlations(theta) -> np.ndarray:
    m = theta.matrix if isinstance(theta, PrecisionEstimate) else np.asarray(theta)
    d = np.sqrt(np.diag(m))
    pc = -m / np.outer(d, d)
    np.fill_diagonal(pc, 1.0)
    return pc


# ---------------------------------------------------------------------------
# factor-structured forecast errors


def toeplitz_cholesky_loadings(p: int, q: int, rho: float) -> np.ndarray:
    """``p x q`` loadings: the first ``q`` rows of the upper Cholesky factor ``R``
    (``M = R'R``, ``M_ij = rho^|i-j|``), transposed."""
    if abs(rho) >= 1:
        raise EstimationError("Toeplitz parameter must satisfy |rho| < 1")
    if not 1 <= q <= p:
        raise EstimationError("need 1 <= q <= p")
    R = cholesky(toeplitz(rho ** np.arange(p)), lower=False)
    return R[:q].T.copy()


def dims_for_T(T: int, delta: float = 0.85) -> tuple[int, int]:
    """``p = floor(T^delta)`` and ``q = round(2 sqrt(log T))``."""
    return int(math.floor(T ** delta + 1e-9)), int(round(2.0 * math.sqrt(math.log(T))))


@dataclass(frozen=True)
class FactorErrorDgpSpec:
    p: int
    q: int
    T: int
    rho: float = 0.2
    phi_f: float = 0.2
    sigma_zeta: float = 1.0
    edge_probability: Optional[float] = None  # None: 500 / (p T^0.8)
    coef_range: tuple = (0.1, 0.3)
    post_break_coef_range: Optional[tuple] = None  # e.g. (0.1, 0.6) with coef_range (0.1, 0.4)
    mixed_signs: bool = True
    scaling: str = "spectral"
    margin: float = 0.05

    def __post_init__(self):
        if abs(self.phi_f) >= 1:
            raise EstimationError("factor AR coefficient must satisfy |phi_f| < 1")

    @classmethod
    def for_T(cls, T: int, breaks: bool = False, **kw) -> "FactorErrorDgpSpec":
        p, q = dims_for_T(T)
        if breaks:
            kw.setdefault("coef_range", (0.1, 0.4))
            kw.setdefault("post_break_coef_range", (0.1, 0.6))
        return cls(p=p, q=q, T=T, **kw)

    @property
    def has_break(self) -> bool:
        return self.post_break_coef_range is not None

    @property
    def prob(self) -> float:
        if self.edge_probability is not None:
            return self.edge_probability
        return paper_edge_probability(self.p, self.T)


@dataclass
class FactorErrorSample:
    errors: np.ndarray
    loadings: np.ndarray
    factors: np.ndarray
    idiosyncratic: np.ndarray
    sigma_f: np.ndarray
    theta_eps: list
    theta: list
    segmentation: RegimeSegmentation

    @property
    def true_weights(self) -> list:
        return [weights_from_precision(t) for t in self.theta]


def simulate_factor_errors(spec: FactorErrorDgpSpec, rng: np.random.Generator) -> FactorErrorSample:
    """Draw ``e_t = B f_t + eps_t`` with AR(1) factors and sparse-precision Gaussian noise.

    In the break variant the idiosyncratic precision switches at ``T // 2``.
    """
    p, q, T = spec.p, spec.q, spec.T
    ranges = [spec.coef_range] + ([spec.post_break_coef_range] if spec.has_break else [])
    specs = [SparsePrecisionSpec(p, spec.prob, lo, hi, spec.mixed_signs, spec.margin, spec.scaling)
             for lo, hi in ranges]
    theta_eps = generate_sparse_precisions(specs, rng)
    B = toeplitz_cholesky_loadings(p, q, spec.rho)

    var_f = spec.sigma_zeta ** 2 / (1.0 - spec.phi_f ** 2)
    f = np.empty((T, q))
    f[0] = rng.standard_normal(q) * np.sqrt(var_f)
    shocks = rng.standard_normal((T, q)) * spec.sigma_zeta
    for t in range(1, T):
        f[t] = spec.phi_f * f[t - 1] + shocks[t]

    seg = RegimeSegmentation.from_breaks(T, [T // 2] if spec.has_break else [])
    z = rng.standard_normal((T, p))
    eps = np.empty((T, p))
    for sl, th in zip(seg.slices(), theta_eps):
        L = np.linalg.cholesky(th.matrix)
        # Theta = L L'  =>  eps = L'^{-1} z has covariance Theta^{-1}
        eps[sl] = solve_triangular(L, z[sl].T, lower=True, trans="T").T

    sigma_f = var_f * np.eye(q)
    if var_f > 0:
        thetas = [smw_combine(th, np.linalg.inv(sigma_f), B) for th in theta_eps]
    else:
        thetas = list(theta_eps)  # factor channel switched off
    return FactorErrorSample(f @ B.T + eps, B, f, eps, sigma_f, theta_eps, thetas, seg)


# ---------------------------------------------------------------------------
# FAR forecasting design


@dataclass(frozen=True)
class FarDgpSpec:
    T: int
    N_predictors: int = 100
    r: int = 5
    phi: float = 0.8
    rho: float = 0.9
    sigma_v: float = 1.0
    sigma_xi: float = 1.0
    sigma_eps: float = 1.0
    c1: float = 0.0
    c2: float = 0.9
    c2_pre_break: Optional[float] = None
    break_at: Optional[int] = None
    ma_lags: int = 200
    burn_in: int = 200

    def __post_init__(self):
        if abs(self.phi) >= 1:
            raise EstimationError("factor AR coefficient must satisfy |phi| < 1")
        if abs(self.c2) >= 1 or (self.c2_pre_break is not None and abs(self.c2_pre_break) >= 1):
            raise EstimationError("MA decay must satisfy |c2| < 1")


def ma_coefficients(c1: float, c2: float, n: int) -> np.ndarray:
    """``theta_s = (1 + s)^c1 * c2^s`` for s = 1..n."""
    s = np.arange(1, n + 1, dtype=float)
    return (1.0 + s) ** c1 * c2 ** s


def simulate_far_data(spec: FarDgpSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Predictors ``x`` (T x N) and target ``y`` (T,), with ``y[t]`` driven by ``g[t-1]``."""
    n = spec.T + spec.burn_in
    Lam = toeplitz_cholesky_loadings(spec.N_predictors, spec.r, spec.rho)
    alpha = rng.normal(1.0, 1.0, size=spec.r)
    g = np.empty((n, spec.r))
    g[0] = rng.standard_normal(spec.r) * spec.sigma_xi / np.sqrt(1.0 - spec.phi ** 2)
    xi = rng.standard_normal((n, spec.r)) * spec.sigma_xi
    for t in range(1, n):
        g[t] = spec.phi * g[t - 1] + xi[t]
    x = g @ Lam.T + rng.standard_normal((n, spec.N_predictors)) * spec.sigma_v

    K = spec.ma_lags
    eps = rng.standard_normal(n + K) * spec.sigma_eps  # eps[K + t] is the shock of period t
    post = ma_coefficients(spec.c1, spec.c2, K)
    pre = ma_coefficients(spec.c1, spec.c2_pre_break, K) if spec.c2_pre_break is not None else post
    y = np.zeros(n)
    for t in range(1, n):
        coefs = pre if spec.break_at is not None and t - spec.burn_in < spec.break_at else post
        past = eps[K + t - 1::-1][:K] if K else np.empty(0)
        y[t] = g[t - 1] @ alpha + coefs @ past + eps[K + t]
    return x[spec.burn_in:], y[spec.burn_in:]


@dataclass
class FarForecasts:
    forecasts: np.ndarray  # (H, p) forecasts of y[start:], one column per model
    actuals: np.ndarray
    start: int
    labels: list


def fit_far_models(x, y, K: int, L: int, train_end: int) -> FarForecasts:
    """Fit every FAR(k, l), k <= K, l <= L, by least squares on periods before ``train_end``
    and produce one-step forecasts of ``y[train_end:]``.

    Factors come from PCA on the training predictors; later periods are
    projected on the training loadings, so no forecast uses future data.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    T = y.size
    if not max(L, 1) + 2 <= train_end < T:
        raise EstimationError("training span too short or leaves no forecast periods")
    mu_x = x[:train_end].mean(axis=0)
    xc = x - mu_x
    if K > 0:
        loadings = estimate_factors(xc[:train_end], K).loadings
        ghat = xc @ loadings
    else:
        ghat = np.zeros((T, 0))

    first = max(L, 1) - 1  # earliest forecast origin with all lags available
    labels, cols = [], []
    for k in range(K + 1):
        for l in range(L + 1):
            def design(origins, k=k, l=l):
                parts = [np.ones((origins.size, 1)), ghat[origins, :k]]
                parts += [y[origins - j][:, None] for j in range(l)]
                return np.hstack(parts)

            train_origins = np.arange(first, train_end - 1)
            X = design(train_origins)
            coef, *_ = np.linalg.lstsq(X, y[train_origins + 1], rcond=None)
            test_origins = np.arange(train_end - 1, T - 1)
            cols.append(design(test_origins) @ coef)
            labels.append(f"FAR({k},{l})")
    return FarForecasts(np.column_stack(cols), y[train_end:].copy(), train_end, labels)


# ---------------------------------------------------------------------------
# Monte Carlo harness


METHODS_PRECISION = ("ew", "glasso", "factor_glasso", "rd_factor_glasso")


@dataclass(frozen=True)
class McDesign:
    name: str = "fig3"
    kind: str = "precision"  # "precision" or "far"
    kappas: tuple = (7.0, 8.0, 9.0)
    T_values: Optional[tuple] = None  # overrides kappas when given (FAR designs)
    reps: int = 20
    seed: int = 20240101
    breaks: bool = False
    scaling: str = "spectral"
    mixed_signs: bool = True
    margin: float = 0.05
    methods: tuple = ("ew", "glasso", "factor_glasso")
    q: object = None  # None: the DGP's true q (precision) / 3 (FAR)
    alpha_grid: tuple = (0.0, 0.25, 0.5, 1.0, 10.0, 30.0)
    beta_grid: tuple = (0.0, 0.25, 0.5, 1.0, 10.0, 30.0)
    # "per_observation": grid values are multiplied by the mean regime length T/N,
    # which puts alpha on the same scale as the single-regime tau
    grid_scale: str = "absolute"
    rho: float = 1.0
    admm_eps_abs: Optional[float] = None
    admm_eps_rel: float = 1e-4
    admm_max_iter: int = 2000
    adapt_rho: bool = True
    # FAR design
    c1: float = 0.0
    c2: float = 0.9
    K: int = 2
    L: int = 7
    N_predictors: int = 100
    r: int = 5
    retune_every: Optional[int] = None  # RD tuning in rolling windows; None: first window only

    def T_grid(self) -> list[int]:
        if self.T_values is not None:
            return [int(t) for t in self.T_values]
        return [int(round(2.0 ** k)) for k in self.kappas]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class McRow:
    design: str
    T: int
    method: str
    metric: str
    value: float
    rep_count: int


def _admm_stop(design: McDesign) -> AdmmStop:
    return AdmmStop(eps_abs=design.admm_eps_abs, eps_rel=design.admm_eps_rel,
                    max_iter=design.admm_max_iter, adapt_rho=design.adapt_rho)


def precision_replication(design: McDesign, T: int, rep: int) -> dict:
    """One draw of the sparse-precision design; returns {(method, metric): value}."""
    rng = rng_for(design.seed, rep * 100_003 + T)
    spec = FactorErrorDgpSpec.for_T(T, breaks=design.breaks, scaling=design.scaling,
                                   mixed_signs=design.mixed_signs, margin=design.margin)
    sample = simulate_factor_errors(spec, rng)
    e = sample.errors
    q = spec.q if design.q is None else design.q
    true_w = sample.true_weights
    out = {}

    def score(method, thetas):
        # a single estimate is scored against every regime's truth and averaged
        ths = thetas if isinstance(thetas, list) else [thetas] * len(sample.theta)
        out[(method, "precision_op")] = float(np.mean(
            [precision_error(a, b) for a, b in zip(ths, sample.theta)]))
        out[(method, "weight_l1")] = float(np.mean(
            [weight_error_l1(weights_from_precision(a), w) for a, w in zip(ths, true_w)]))

    for method in design.methods:
        if method == "ew":
            score(method, ew_precision_benchmark(e))
        elif method == "glasso":
            score(method, plain_glasso_fit(e)[0])
        elif method == "factor_glasso":
            score(method, factor_glasso_fit(e, q=q).theta)
        elif method == "rd_factor_glasso":
            tuning = RdTuning(tuple(design.alpha_grid), tuple(design.beta_grid),
                              criterion="precision", grid_scale=design.grid_scale)
            res = rd_factor_glasso_fit(e, sample.segmentation, q, tuning, rho=design.rho,
                                       stop=_admm_stop(design), true_thetas=sample.theta)
            score(method, list(res.thetas))
        else:
            raise EstimationError(f"unknown method {method!r}")
    return out


def far_split(T: int, breaks: bool) -> dict:
    """Index layout of the FAR experiment (absolute period indices)."""
    m1 = T // 3 if breaks else T // 2
    m2 = T - m1
    window = m2 // 2
    info = {"m1": m1, "m2": m2, "window": window, "test_start": m1 + window, "T": T}
    if breaks:
        info["break_at"] = m1 + window // 2
    return info


def far_replication(design: McDesign, T: int, rep: int) -> dict:
    from .backtest import BacktestConfig, rolling_backtest  # avoid an import cycle

    rng = rng_for(design.seed, rep * 100_003 + T)
    split = far_split(T, design.breaks)
    spec = FarDgpSpec(T=T, N_predictors=design.N_predictors, r=design.r, c1=design.c1,
                      c2=design.c2, c2_pre_break=0.3 if design.breaks else None,
                      break_at=split.get("break_at"))
    x, y = simulate_far_data(spec, rng)
    fc = fit_far_models(x, y, design.K, design.L, split["m1"])
    panel = ForecastPanel.from_arrays(fc.forecasts, fc.actuals,
                                      times=range(split["m1"], T), forecaster_ids=fc.labels)
    breaks = [split["break_at"] - split["m1"]] if design.breaks else []
    cfg = BacktestConfig(
        methods=tuple(design.methods), window=split["window"], horizon=1,
        q=3 if design.q is None else design.q, break_points=tuple(breaks),
        alpha_grid=design.alpha_grid, beta_grid=design.beta_grid, grid_scale=design.grid_scale,
        rho=design.rho,
        admm=_admm_stop(design), retune_every=design.retune_every,
    )
    report = rolling_backtest(panel, cfg)
    return {(m, "msfe"): r.msfe for m, r in report.methods.items()}


def _run_one(args):
    design, T, rep = args
    run = precision_replication if design.kind == "precision" else far_replication
    try:
        return run(design, T, rep), None
    except (EstimationError, np.linalg.LinAlgError) as exc:
        return None, str(exc)


def run_monte_carlo(design: McDesign, reps: Optional[int] = None, progress=None,
                    workers: int = 1) -> list[McRow]:
    """Average every (T, method, metric) over replications.

    Failed replications are logged and excluded; ``rep_count`` reports how
    many contributed. With ``workers > 1`` replications run in separate
    processes; results do not depend on the worker count.
    """
    reps = design.reps if reps is None else reps
    if reps < 1:
        raise EstimationError("need at least one replication")
    if design.kind not in ("precision", "far"):
        raise EstimationError(f"unknown design kind {design.kind!r}")
    if design.grid_scale not in ("absolute", "per_observation"):
        raise EstimationError(f"unknown grid_scale {design.grid_scale!r}")
    rows = []
    pool = ProcessPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for T in design.T_grid():
            jobs = [(design, T, rep) for rep in range(reps)]
            results = pool.map(_run_one, jobs) if pool is not None else map(_run_one, jobs)
            acc: dict = {}
            failures = 0
            for rep, (res, err) in enumerate(results):
                if res is None:
                    failures += 1
                    log.warning("replication %d at T=%d failed: %s", rep, T, err)
                    continue
                for key, val in res.items():
                    acc.setdefault(key, []).append(val)
                if progress is not None:
                    progress(T, rep)
            if failures:
                log.warning("T=%d: %d of %d replications failed", T, failures, reps)
            for (method, metric), vals in sorted(acc.items()):
                rows.append(McRow(design.name, T, method, metric, float(np.mean(vals)), len(vals)))
    finally:
        if pool is not None:
            pool.shutdown()
    return rows
