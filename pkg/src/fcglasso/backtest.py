"""Rolling-window evaluation of combination methods.

For a target period ``t`` and horizon ``h`` the weights are estimated from the
``window`` most recent forecast errors whose actuals are known when the
forecast is made, i.e. rows ``t - h - window + 1 .. t - h``. Nothing at or
after ``t - h + 1`` is read.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .combination import (
    CombinationWeights,
    DMResult,
    EvaluationRecord,
    a_hat,
    diebold_mariano,
    equal_weights,
    ew_precision_benchmark,
    msfe,
    weights_from_precision,
)
from .core import EstimationError, ForecastPanel
from .factor_glasso import GridParams, factor_glasso_fit, not_sparse_fit, plain_glasso_fit
from .glasso import GlassoConfig
from .rd_admm import AdmmStop, RdTuning, RegimeSegmentation, rd_factor_glasso_fit

log = logging.getLogger(__name__)

METHODS = ("ew", "glasso", "factor_glasso", "rd_factor_glasso", "not_sparse")
DEFAULT_GRID = (0.0, 0.25, 0.5, 1.0, 10.0, 30.0)


@dataclass(frozen=True)
class BacktestConfig:
    methods: tuple = ("ew", "glasso", "factor_glasso")
    window: int = 50
    horizon: int = 1
    q: Union[int, str] = "auto"
    break_points: tuple = ()  # row indices of the panel where a new regime starts
    alpha_grid: tuple = DEFAULT_GRID
    beta_grid: tuple = DEFAULT_GRID
    penalty: str = "ridge"
    grid_scale: str = "absolute"  # or "per_observation"; see RdTuning
    rho: float = 1.0
    admm: AdmmStop = AdmmStop()
    retune_every: Optional[int] = None  # None: tune (alpha, beta) on the first window only
    grid: GridParams = GridParams()
    glasso: Optional[GlassoConfig] = None
    min_segment: int = 5  # shorter in-window segments are merged into a neighbour

    def __post_init__(self):
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise EstimationError(f"unknown methods {unknown}; choose from {METHODS}")
        if not self.methods:
            raise EstimationError("no methods requested")
        if self.window < 4:
            raise EstimationError("window must be at least 4 periods")
        if self.horizon < 1:
            raise EstimationError("horizon must be positive")
        if self.retune_every is not None and self.retune_every < 1:
            raise EstimationError("retune_every must be positive")


@dataclass
class MethodReport:
    method: str
    combined_errors: np.ndarray
    weights: np.ndarray  # one row per test period
    regimes: np.ndarray
    msfe: float
    msfe_ratio_to_ew: float = float("nan")
    dm: DMResult = DMResult(float("nan"), float("nan"))
    a_hat: np.ndarray = field(default_factory=lambda: np.empty(0))
    failed_periods: list = field(default_factory=list)
    tuned: list = field(default_factory=list)  # (test index, alpha, beta) for RD
    unconverged: int = 0  # windows whose solver hit its iteration cap

    @property
    def partial(self) -> bool:
        return bool(self.failed_periods)

    def record(self) -> EvaluationRecord:
        return EvaluationRecord(self.msfe, self.msfe_ratio_to_ew, self.dm.statistic,
                                self.dm.pvalue, float(np.mean(self.a_hat)) if self.a_hat.size
                                else float("nan"))


@dataclass
class BacktestReport:
    test_times: tuple
    test_index: np.ndarray
    regime_index: np.ndarray
    forecaster_ids: tuple
    methods: dict
    config: BacktestConfig

    @property
    def partial(self) -> bool:
        return any(r.partial for r in self.methods.values())


def test_indices(T: int, window: int, horizon: int) -> np.ndarray:
    """Panel rows that receive an out-of-sample combined forecast."""
    first = window + horizon - 1
    if first >= T:
        raise EstimationError(f"window {window} with horizon {horizon} leaves no test periods in T={T}")
    return np.arange(first, T)


def window_rows(t: int, window: int, horizon: int) -> slice:
    end = t - horizon + 1
    return slice(end - window, end)


def window_segmentation(start: int, length: int, break_points, min_segment: int) -> RegimeSegmentation:
    """Regimes inside rows ``start .. start + length - 1``.

    Break points that would leave a piece shorter than ``min_segment`` are
    ignored, which merges that piece into its neighbour.
    """
    rel = sorted(b - start for b in break_points if start < b < start + length)
    kept = []
    last = 0
    for b in rel:
        if b - last >= min_segment and length - b >= min_segment:
            kept.append(b)
            last = b
    return RegimeSegmentation.from_breaks(length, kept)


def regime_of(t: int, break_points) -> int:
    return int(sum(1 for b in break_points if b <= t))


def _static_weights(method: str, e: np.ndarray, cfg: BacktestConfig) -> CombinationWeights:
    if method == "ew":
        return weights_from_precision(ew_precision_benchmark(e), method)
    if method == "glasso":
        est, _ = plain_glasso_fit(e, cfg.grid, cfg.glasso)
        return weights_from_precision(est, method)
    if method == "factor_glasso":
        return weights_from_precision(factor_glasso_fit(e, cfg.q, cfg.grid, cfg.glasso).theta, method)
    if method == "not_sparse":
        return weights_from_precision(not_sparse_fit(e, cfg.q).theta, method)
    raise EstimationError(f"unknown method {method!r}")


def _resolve_rd_q(e: np.ndarray, q) -> int:
    if q == "auto":
        from .factor_glasso import _resolve_q
        return _resolve_q(e, q, None)
    return int(q)


class _RdRunner:
    """Keeps the tuned (alpha, beta) between windows."""

    def __init__(self, cfg: BacktestConfig):
        self.cfg = cfg
        self.pair: Optional[tuple] = None
        self.since_tune = 0
        self.state = None  # ADMM state of the previous window

    def weights(self, e: np.ndarray, seg: RegimeSegmentation, t: int, report: MethodReport):
        cfg = self.cfg
        if seg.N == 1:
            # with a single regime in the window the estimator is Factor GLASSO
            theta = factor_glasso_fit(e, cfg.q, cfg.grid, cfg.glasso).theta
            w = weights_from_precision(theta, "rd_factor_glasso", regime=0)
            return w, theta
        q = _resolve_rd_q(e, cfg.q)
        retune = self.pair is None or (cfg.retune_every is not None
                                       and self.since_tune >= cfg.retune_every)
        if retune:
            tuning = RdTuning(tuple(cfg.alpha_grid), tuple(cfg.beta_grid), criterion="msfe",
                              grid_scale=cfg.grid_scale)
            self.since_tune = 0
        else:
            tuning = RdTuning((self.pair[0],), (self.pair[1],), grid_scale=cfg.grid_scale)
        init = self.state if self.state is not None and len(self.state.thetas) == seg.N \
            and self.state.thetas.shape[1] == e.shape[1] else None
        res = rd_factor_glasso_fit(e, seg, q, tuning, cfg.penalty, cfg.rho, cfg.admm, init=init)
        self.state = res.admm.state
        if not res.admm.converged:
            report.unconverged += 1
        if retune:
            self.pair = res.grid_point
            report.tuned.append((t, res.alpha, res.beta))
        self.since_tune += 1
        # the target period belongs to the latest regime seen in the window
        w = res.weights[-1]
        return CombinationWeights(w.weights, "rd_factor_glasso", w.regime), res.thetas[-1]


def rolling_backtest(panel: ForecastPanel, cfg: BacktestConfig) -> BacktestReport:
    """Roll the estimation window over the panel and score every method."""
    T, p = panel.T, panel.p
    if cfg.window >= T - cfg.horizon + 1:
        raise EstimationError(f"window {cfg.window} too long for T={T} and horizon {cfg.horizon}")
    for b in cfg.break_points:
        if not 0 < b < T:
            raise EstimationError(f"break point {b} outside the panel (T={T})")
    errors = panel.errors
    idx = test_indices(T, cfg.window, cfg.horizon)
    regimes = np.array([regime_of(t, cfg.break_points) for t in idx])
    H = idx.size

    reports = {}
    for method in cfg.methods:
        W = np.empty((H, p))
        a = np.full(H, np.nan)
        rep = MethodReport(method, np.empty(H), W, regimes, float("nan"), a_hat=a)
        runner = _RdRunner(cfg) if method == "rd_factor_glasso" else None
        for h, t in enumerate(idx):
            rows = window_rows(t, cfg.window, cfg.horizon)
            e = errors[rows]
            try:
                if runner is not None:
                    seg = window_segmentation(rows.start, cfg.window, cfg.break_points,
                                              cfg.min_segment)
                    w, theta = runner.weights(e, seg, int(t), rep)
                    a[h] = a_hat(theta)
                else:
                    w = _static_weights(method, e, cfg)
            except (EstimationError, np.linalg.LinAlgError) as exc:
                log.warning("%s failed for period %s: %s; using equal weights",
                            method, panel.times[t], exc)
                rep.failed_periods.append(panel.times[t])
                w = equal_weights(p)
            W[h] = w.weights
        rep.combined_errors = np.einsum("hp,hp->h", errors[idx], W)
        rep.msfe = msfe(rep.combined_errors)
        reports[method] = rep

    ew_errors = reports["ew"].combined_errors if "ew" in reports else errors[idx].mean(axis=1)
    ew_msfe = msfe(ew_errors)
    for rep in reports.values():
        rep.msfe_ratio_to_ew = rep.msfe / ew_msfe if ew_msfe > 0 else float("nan")
        if H >= 10:
            rep.dm = diebold_mariano(rep.combined_errors ** 2, ew_errors ** 2, cfg.horizon)
    return BacktestReport(tuple(panel.times[t] for t in idx), idx, regimes,
                          panel.forecaster_ids, reports, cfg)
