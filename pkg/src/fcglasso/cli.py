"""Command-line front end: ``fcglasso {simulate,fit,backtest,mc,tune}``.

Every command reads an optional JSON config (``--config``); keys not given
fall back to the defaults of :class:`RunConfig`. Outputs are written
atomically into ``--out-dir`` together with a ``manifest.json``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 solver did not
converge (outputs are still written and the manifest carries ``"partial": true``).
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Union

import numpy as np

from . import __version__
from .backtest import METHODS, BacktestConfig, rolling_backtest
from .combination import a_hat, ew_precision_benchmark, weights_from_precision
from .core import EstimationError, ForecastPanel, sample_covariance
from .factor_glasso import (
    GridParams,
    _resolve_q,
    factor_glasso_fit,
    not_sparse_fit,
    plain_glasso_fit,
)
from .factor_model import estimate_factors
from .glasso import GlassoConfig, bic_score, build_tau_grid, count_nonzero_upper, glasso_solve
from .ingest import (
    DataError,
    atomic_write_text,
    csv_text,
    fmt,
    load_panel,
    write_panel_csv,
    write_weights_csv,
)
from .rd_admm import AdmmStop, RdTuning, RegimeSegmentation, rd_factor_glasso_fit
from .simulation import (
    FactorErrorDgpSpec,
    FarDgpSpec,
    McDesign,
    far_split,
    fit_far_models,
    rng_for,
    run_monte_carlo,
    simulate_factor_errors,
    simulate_far_data,
)

log = logging.getLogger("fcglasso")

THREADS_ENV = "FCGLASSO_THREADS"
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NONCONVERGED = 0, 2, 3, 4
DEFAULT_GRID = [0.0, 0.25, 0.5, 1.0, 10.0, 30.0]


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    """All settings a command may read; see README for the JSON schema."""

    panel: Optional[str] = None
    impute_policy: str = "reject"
    method: str = "factor_glasso"
    methods: list = field(default_factory=lambda: ["ew", "glasso", "factor_glasso"])
    q: Union[int, str] = "auto"
    q_max: Optional[int] = None
    M: int = 10
    vartheta: Union[float, str] = "auto"
    alpha_grid: list = field(default_factory=lambda: list(DEFAULT_GRID))
    beta_grid: list = field(default_factory=lambda: list(DEFAULT_GRID))
    penalty: str = "ridge"
    grid_scale: str = "absolute"
    rho: float = 1.0
    admm_eps_abs: Optional[float] = None
    admm_eps_rel: float = 0.0
    admm_max_iter: int = 5000
    adapt_rho: bool = False
    break_points: list = field(default_factory=list)  # period labels
    window: int = 50
    horizon: int = 1
    retune_every: Optional[int] = None
    seed: int = 20240101
    reps: Optional[int] = None
    design: dict = field(default_factory=dict)  # McDesign fields for `mc`
    simulate: dict = field(default_factory=dict)  # DGP settings for `simulate`

    @classmethod
    def from_dict(cls, d: dict, base_dir: Optional[Path] = None) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        cfg = cls(**d)
        if cfg.panel is not None and base_dir is not None and not os.path.isabs(cfg.panel):
            cfg.panel = str(base_dir / cfg.panel)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        for m in [self.method, *self.methods]:
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r}; choose from {METHODS}")
        if not (self.q == "auto" or (isinstance(self.q, int) and self.q >= 1)):
            raise ConfigError("q must be a positive integer or 'auto'")
        if self.M < 2:
            raise ConfigError("M must be at least 2")
        if self.vartheta != "auto" and not (isinstance(self.vartheta, (int, float))
                                            and 0 < self.vartheta < 1):
            raise ConfigError("vartheta must be 'auto' or lie in (0, 1)")
        if not self.alpha_grid or not self.beta_grid:
            raise ConfigError("alpha_grid and beta_grid must be nonempty")
        if min(self.alpha_grid) < 0 or min(self.beta_grid) < 0:
            raise ConfigError("grid values must be nonnegative")
        if self.penalty not in ("ridge", "lasso"):
            raise ConfigError(f"penalty {self.penalty!r} is not supported (ridge, lasso)")
        if self.grid_scale not in ("absolute", "per_observation"):
            raise ConfigError("grid_scale must be 'absolute' or 'per_observation'")
        if self.window < 4 or self.horizon < 1:
            raise ConfigError("window must be >= 4 and horizon >= 1")
        if self.rho <= 0 or self.admm_max_iter < 1:
            raise ConfigError("rho must be positive and admm_max_iter >= 1")
        if self.reps is not None and self.reps < 1:
            raise ConfigError("reps must be positive")

    @property
    def grid_params(self) -> GridParams:
        return GridParams(self.M, None if self.vartheta == "auto" else float(self.vartheta))

    @property
    def admm(self) -> AdmmStop:
        return AdmmStop(self.admm_eps_abs, self.admm_eps_rel, self.admm_max_iter, self.adapt_rho)


# ---------------------------------------------------------------------------
# helpers


def _load_config(args) -> RunConfig:
    data: dict = {}
    base = None
    if args.config:
        path = Path(args.config)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
        base = path.parent
    for key in ("panel", "method"):
        val = getattr(args, key, None)
        if val is not None:
            data[key] = val
    if args.seed is not None:
        data["seed"] = args.seed
    return RunConfig.from_dict(data, base)


def _panel(cfg: RunConfig):
    if cfg.panel is None:
        raise ConfigError("no input panel given (use --panel or the 'panel' config key)")
    if not os.path.exists(cfg.panel):
        raise ConfigError(f"panel file {cfg.panel} does not exist")
    res = load_panel(cfg.panel, cfg.impute_policy)
    for fid in res.dropped:
        log.warning("dropped forecaster %s (more than half of the periods missing)", fid)
    return res


def _break_indices(panel: ForecastPanel, labels) -> list[int]:
    lookup = {str(t): i for i, t in enumerate(panel.times)}
    out = []
    for b in labels:
        if str(b) not in lookup:
            raise ConfigError(f"break point {b!r} is not a period of the panel")
        i = lookup[str(b)]
        if i == 0:
            raise ConfigError(f"break point {b!r} is the first period; nothing precedes it")
        out.append(i)
    return sorted(out)


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"cannot serialise {type(o).__name__}")


def _clean(o):
    # JSON has no NaN/inf
    if isinstance(o, float) and not math.isfinite(o):
        return None
    if isinstance(o, dict):
        return {k: _clean(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_clean(v) for v in o]
    return o


def write_json(path, obj) -> None:
    text = json.dumps(_clean(json.loads(json.dumps(obj, default=_json_default))), indent=2,
                      sort_keys=True)
    atomic_write_text(path, text + "\n")


def _manifest(out: Path, command: str, cfg: RunConfig, outputs: list, partial: bool, **extra):
    write_json(out / "manifest.json", {
        "command": command,
        "version": __version__,
        "config": asdict(cfg),
        "outputs": sorted(outputs),
        "partial": partial,
        **extra,
    })


def _matrix_csv(path, ids, m) -> None:
    rows = [[fid, *map(fmt, row)] for fid, row in zip(ids, m)]
    atomic_write_text(path, csv_text(["id", *ids], rows))


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(cfg: RunConfig, out: Path, threads: int) -> int:
    sim = dict(cfg.simulate)
    kind = sim.pop("kind", "precision")
    T = int(sim.pop("T", 256))
    rep = int(sim.pop("rep", 0))
    rng = rng_for(cfg.seed, rep)
    outputs = ["panel.csv"]
    try:
        if kind == "precision":
            breaks = bool(sim.pop("breaks", False))
            spec = FactorErrorDgpSpec.for_T(T, breaks=breaks, **sim)
            sample = simulate_factor_errors(spec, rng)
            # actual fixed at zero so that the forecasts are the errors themselves
            panel = ForecastPanel.from_arrays(sample.errors, np.zeros(T))
            starts = sample.segmentation.starts
            write_weights_csv(out / "true_weights.csv", [str(s) for s in starts],
                              range(len(starts)), panel.forecaster_ids,
                              [w.weights for w in sample.true_weights])
            outputs.append("true_weights.csv")
            info = {"p": spec.p, "q": spec.q, "T": T, "break_points": [int(s) for s in starts[1:]]}
        elif kind == "far":
            breaks = bool(sim.pop("breaks", False))
            K = int(sim.pop("K", 2))
            L = int(sim.pop("L", 7))
            split = far_split(T, breaks)
            if breaks:
                sim.setdefault("c2_pre_break", 0.3)
                sim.setdefault("break_at", split["break_at"])
            spec = FarDgpSpec(T=T, **sim)
            x, y = simulate_far_data(spec, rng)
            fc = fit_far_models(x, y, K, L, split["m1"])
            panel = ForecastPanel.from_arrays(fc.forecasts, fc.actuals,
                                              times=range(split["m1"], T), forecaster_ids=fc.labels)
            info = {"split": split, "p": panel.p}
        else:
            raise ConfigError(f"unknown simulation kind {kind!r} (precision, far)")
    except TypeError as exc:
        raise ConfigError(f"bad simulate settings: {exc}") from None
    write_panel_csv(out / "panel.csv", panel)
    _manifest(out, "simulate", cfg, outputs, False, kind=kind, info=info)
    return EXIT_OK


def _fit_single(method: str, e: np.ndarray, cfg: RunConfig):
    """Full-sample fit; returns (list of precisions, summary dict, converged)."""
    if method == "ew":
        th = ew_precision_benchmark(e)
        return [th], {}, True
    if method == "glasso":
        th, tau = plain_glasso_fit(e, cfg.grid_params)
        return [th], {"tau": tau}, th.converged
    if method == "factor_glasso":
        res = factor_glasso_fit(e, cfg.q, cfg.grid_params, q_max=cfg.q_max)
        return [res.theta], {"tau": res.chosen_tau, "q": res.decomposition.q,
                             "edges_eps": res.theta_eps.sparsity().n_undirected_edges}, \
            res.theta_eps.converged
    if method == "not_sparse":
        res = not_sparse_fit(e, cfg.q, cfg.q_max)
        return [res.theta], {"q": res.decomposition.q}, True
    raise EstimationError(f"unknown method {method!r}")


def cmd_fit(cfg: RunConfig, out: Path, threads: int) -> int:
    ing = _panel(cfg)
    panel = ing.panel
    e = panel.errors
    ids = panel.forecaster_ids
    outputs = ["weights.csv"]
    if cfg.method == "rd_factor_glasso":
        breaks = _break_indices(panel, cfg.break_points)
        seg = RegimeSegmentation.from_breaks(panel.T, breaks)
        q = _resolve_q(e, cfg.q, cfg.q_max)
        tuning = RdTuning(tuple(cfg.alpha_grid), tuple(cfg.beta_grid), criterion="msfe",
                          grid_scale=cfg.grid_scale)
        res = rd_factor_glasso_fit(e, seg, q, tuning, cfg.penalty, cfg.rho, cfg.admm)
        thetas = res.thetas
        summary = {"alpha": res.alpha, "beta": res.beta, "q": q, "admm_iterations": res.admm.n_iter}
        converged = res.admm.converged
        labels = [str(panel.times[s]) for s in seg.starts]
    else:
        thetas, summary, converged = _fit_single(cfg.method, e, cfg)
        labels = [str(panel.times[0])]
    weights = [weights_from_precision(t, cfg.method, regime=i) for i, t in enumerate(thetas)]
    write_weights_csv(out / "weights.csv", labels, range(len(weights)), ids,
                      [w.weights for w in weights])
    for i, th in enumerate(thetas):
        name = "precision.csv" if len(thetas) == 1 else f"precision_regime{i}.csv"
        _matrix_csv(out / name, ids, th.matrix)
        outputs.append(name)
    summary.update({
        "method": cfg.method,
        "T": panel.T,
        "p": panel.p,
        "dropped_forecasters": ing.dropped,
        "imputed_cells": ing.imputed_cells,
        "a_hat": [a_hat(t) for t in thetas],
        "positive_definite": [bool(t.is_pd_certified) for t in thetas],
        "converged": bool(converged),
    })
    write_json(out / "fit.json", summary)
    outputs.append("fit.json")
    _manifest(out, "fit", cfg, outputs, not converged)
    return EXIT_OK if converged else EXIT_NONCONVERGED


def cmd_backtest(cfg: RunConfig, out: Path, threads: int) -> int:
    ing = _panel(cfg)
    panel = ing.panel
    breaks = _break_indices(panel, cfg.break_points)
    if cfg.window >= panel.T - cfg.horizon + 1:
        raise ConfigError(f"window {cfg.window} leaves no test periods (T={panel.T})")
    bcfg = BacktestConfig(
        methods=tuple(cfg.methods), window=cfg.window, horizon=cfg.horizon, q=cfg.q,
        break_points=tuple(breaks), alpha_grid=tuple(cfg.alpha_grid),
        beta_grid=tuple(cfg.beta_grid), penalty=cfg.penalty, grid_scale=cfg.grid_scale,
        rho=cfg.rho, admm=cfg.admm,
        retune_every=cfg.retune_every, grid=cfg.grid_params,
    )
    report = rolling_backtest(panel, bcfg)
    rows = []
    outputs = ["backtest_summary.csv", "combined_errors.csv"]
    for m, r in report.methods.items():
        rows.append([m, fmt(r.msfe), fmt(r.msfe_ratio_to_ew), fmt(r.dm.statistic),
                     fmt(r.dm.pvalue), int(r.dm.degenerate), int(r.partial),
                     len(r.failed_periods), r.unconverged])
        write_weights_csv(out / f"weights_{m}.csv", [str(t) for t in report.test_times],
                          report.regime_index, panel.forecaster_ids, r.weights)
        outputs.append(f"weights_{m}.csv")
    atomic_write_text(out / "backtest_summary.csv", csv_text(
        ["method", "msfe", "msfe_ratio_to_ew", "dm_statistic", "dm_pvalue", "dm_degenerate",
         "partial", "failed_windows", "unconverged_windows"], rows))
    err_rows = [[str(t), int(g), *[fmt(report.methods[m].combined_errors[h]) for m in report.methods]]
                for h, (t, g) in enumerate(zip(report.test_times, report.regime_index))]
    atomic_write_text(out / "combined_errors.csv",
                      csv_text(["period", "regime", *report.methods], err_rows))
    partial = report.partial or any(r.unconverged for r in report.methods.values())
    tuned = {m: r.tuned for m, r in report.methods.items() if r.tuned}
    _manifest(out, "backtest", cfg, outputs, partial, n_test=len(report.test_times),
              dropped_forecasters=ing.dropped, tuned=tuned,
              failed_periods={m: [str(t) for t in r.failed_periods]
                              for m, r in report.methods.items() if r.failed_periods})
    return EXIT_NONCONVERGED if partial else EXIT_OK


def curve_tables(rows) -> dict:
    """``{metric: (header, rows)}`` with one row per T and one column per method."""
    out = {}
    metrics = sorted({r.metric for r in rows})
    for metric in metrics:
        sub = [r for r in rows if r.metric == metric]
        methods = sorted({r.method for r in sub})
        Ts = sorted({r.T for r in sub})
        val = {(r.T, r.method): r.value for r in sub}
        table = [[fmt(math.log2(T)), T, *[fmt(val[(T, m)]) if (T, m) in val else "" for m in methods]]
                 for T in Ts]
        out[metric] = (["log2_T", "T", *methods], table)
    return out


def cmd_mc(cfg: RunConfig, out: Path, threads: int) -> int:
    d = dict(cfg.design)
    d.setdefault("seed", cfg.seed)
    for key in ("kappas", "T_values", "methods", "alpha_grid", "beta_grid"):
        if key in d and d[key] is not None:
            d[key] = tuple(d[key])
    try:
        design = McDesign(**d)
    except TypeError as exc:
        raise ConfigError(f"bad design settings: {exc}") from None
    reps = cfg.reps if cfg.reps is not None else design.reps
    rows = run_monte_carlo(design, reps=reps, workers=threads)
    if not rows:
        raise EstimationError("every replication failed")
    table = [[r.design, r.T, r.method, r.metric, fmt(r.value), r.rep_count] for r in rows]
    atomic_write_text(out / "results.csv",
                      csv_text(["design", "T", "method", "metric", "value", "rep_count"], table))
    outputs = ["results.csv"]
    for metric, (header, body) in curve_tables(rows).items():
        name = f"curve_{metric}.csv"
        atomic_write_text(out / name, csv_text(header, body))
        outputs.append(name)
    partial = any(r.rep_count < reps for r in rows)
    _manifest(out, "mc", cfg, outputs, partial, design=design.to_dict(), reps=reps)
    return EXIT_NONCONVERGED if partial else EXIT_OK


def cmd_tune(cfg: RunConfig, out: Path, threads: int) -> int:
    ing = _panel(cfg)
    panel = ing.panel
    e = panel.errors
    T = panel.T
    converged = True
    if cfg.method in ("glasso", "factor_glasso"):
        if cfg.method == "factor_glasso":
            q = _resolve_q(e, cfg.q, cfg.q_max)
            S = estimate_factors(e, q).sigma_eps
        else:
            q = 0
            S = sample_covariance(e)
        grid = build_tau_grid(S, cfg.grid_params.M, cfg.grid_params.vartheta, T=T)
        rows, best = [], None
        warm = None
        for tau in grid.taus[::-1]:
            est = glasso_solve(S, GlassoConfig(tau=float(tau)), warm_start=warm)
            warm = (est.info["W"], est.info["Beta"])
            converged &= est.converged
            score = bic_score(est, S, T)
            rows.append([fmt(tau), fmt(score), (count_nonzero_upper(est.matrix) - S.shape[0]),
                         int(est.converged)])
            if best is None or score < best[1]:
                best = (tau, score)
        rows.reverse()
        body = [r + [int(float(r[0]) == best[0])] for r in rows]
        atomic_write_text(out / "tune.csv", csv_text(
            ["tau", "bic", "edges", "converged", "chosen"], body))
        extra = {"chosen_tau": best[0], "vartheta": grid.vartheta, "q": q}
    elif cfg.method == "rd_factor_glasso":
        breaks = _break_indices(panel, cfg.break_points)
        seg = RegimeSegmentation.from_breaks(T, breaks)
        q = _resolve_q(e, cfg.q, cfg.q_max)
        tuning = RdTuning(tuple(cfg.alpha_grid), tuple(cfg.beta_grid), criterion="msfe",
                          grid_scale=cfg.grid_scale)
        res = rd_factor_glasso_fit(e, seg, q, tuning, cfg.penalty, cfg.rho, cfg.admm)
        converged = res.admm.converged
        body = [[fmt(a), fmt(b), fmt(s), int((a, b) == res.grid_point)]
                for (a, b), s in sorted(res.tuning_scores.items())]
        atomic_write_text(out / "tune.csv", csv_text(["alpha", "beta", "validation_msfe", "chosen"],
                                                     body))
        extra = {"alpha": res.alpha, "beta": res.beta, "grid_point": list(res.grid_point), "q": q}
    else:
        raise ConfigError(f"method {cfg.method!r} has no tuning parameters")
    _manifest(out, "tune", cfg, ["tune.csv"], not converged, **extra)
    return EXIT_OK if converged else EXIT_NONCONVERGED


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "backtest": cmd_backtest,
    "mc": cmd_mc,
    "tune": cmd_tune,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fcglasso", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="master seed (overrides the config)")
        p.add_argument("--out-dir", default=".", help="directory for outputs (default: .)")
        p.add_argument("--threads", type=int, default=None,
                       help=f"worker processes (default: ${THREADS_ENV} or 1)")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("fit", "backtest", "tune"):
            p.add_argument("--panel", help="panel CSV (overrides the config)")
        if name in ("fit", "tune"):
            p.add_argument("--method", choices=METHODS, help="estimator (overrides the config)")
    return parser


def _threads(args) -> int:
    if args.threads is not None:
        n = args.threads
    else:
        raw = os.environ.get(THREADS_ENV, "1")
        try:
            n = int(raw)
        except ValueError:
            raise ConfigError(f"{THREADS_ENV}={raw!r} is not an integer") from None
    if n < 1:
        raise ConfigError("threads must be at least 1")
    return n


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        threads = _threads(args)
        cfg = _load_config(args)
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, out, threads)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, EstimationError, np.linalg.LinAlgError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
