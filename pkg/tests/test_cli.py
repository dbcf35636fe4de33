import csv
import json

import numpy as np
import pytest

from fcglasso import cli
from fcglasso.combination import weights_from_precision
from fcglasso.factor_glasso import factor_glasso_fit
from fcglasso.ingest import ingest_panel, read_weights_csv


def run(*argv):
    return cli.main([str(a) for a in argv])


def dump(path, obj):
    path.write_text(json.dumps(obj))
    return path


@pytest.fixture
def sim_panel(tmp_path):
    cfg = dump(tmp_path / "sim.json", {"simulate": {"kind": "precision", "T": 128}, "seed": 11})
    assert run("simulate", "--config", cfg, "--out-dir", tmp_path / "sim") == 0
    return tmp_path / "sim" / "panel.csv"


def test_simulate_outputs(sim_panel):
    out = sim_panel.parent
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "simulate" and manifest["partial"] is False
    assert manifest["outputs"] == ["panel.csv", "true_weights.csv"]
    panel = ingest_panel(sim_panel)
    assert panel.T == 128 and panel.p == manifest["info"]["p"]
    _, _, _, W = read_weights_csv(out / "true_weights.csv")
    assert np.abs(W.sum(axis=1) - 1).max() <= 1e-12


def test_fit_weights_round_trip(sim_panel, tmp_path):
    out = tmp_path / "fit"
    assert run("fit", "--panel", sim_panel, "--method", "factor_glasso", "--out-dir", out) == 0
    periods, regimes, ids, W = read_weights_csv(out / "weights.csv")
    panel = ingest_panel(sim_panel)
    expected = weights_from_precision(factor_glasso_fit(panel.errors).theta).weights
    assert np.abs(W[0] - expected).max() <= 1e-12
    assert ids == list(panel.forecaster_ids) and regimes == [0]
    fit = json.loads((out / "fit.json").read_text())
    assert fit["converged"] and fit["positive_definite"] == [True]


def test_fit_rd_with_break_labels(sim_panel, tmp_path):
    cfg = dump(tmp_path / "rd.json", {
        "panel": str(sim_panel), "method": "rd_factor_glasso", "q": 2, "break_points": ["64"],
        "alpha_grid": [10.0, 30.0], "beta_grid": [0.0, 30.0], "admm_eps_rel": 1e-3,
        "adapt_rho": True})
    out = tmp_path / "rd"
    assert run("fit", "--config", cfg, "--out-dir", out) == 0
    periods, regimes, _, W = read_weights_csv(out / "weights.csv")
    assert periods == ["0", "64"] and regimes == [0, 1]
    assert (out / "precision_regime1.csv").exists()


def test_fit_nonconvergence_exit_code(sim_panel, tmp_path):
    cfg = dump(tmp_path / "rd.json", {
        "panel": str(sim_panel), "method": "rd_factor_glasso", "q": 2, "break_points": ["64"],
        "alpha_grid": [10.0], "beta_grid": [30.0], "admm_max_iter": 2})
    out = tmp_path / "rd"
    assert run("fit", "--config", cfg, "--out-dir", out) == 4
    assert json.loads((out / "manifest.json").read_text())["partial"] is True
    assert (out / "weights.csv").exists()


def test_backtest_outputs(sim_panel, tmp_path):
    cfg = dump(tmp_path / "bt.json", {"panel": str(sim_panel), "methods": ["ew", "glasso"],
                                      "window": 100})
    out = tmp_path / "bt"
    assert run("backtest", "--config", cfg, "--out-dir", out) == 0
    with open(out / "backtest_summary.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["method"] for r in rows] == ["ew", "glasso"]
    assert float(rows[0]["msfe_ratio_to_ew"]) == 1.0
    periods, _, _, W = read_weights_csv(out / "weights_glasso.csv")
    assert periods[0] == "100" and len(periods) == 28


def test_tune_outputs(sim_panel, tmp_path):
    out = tmp_path / "tune"
    assert run("tune", "--panel", sim_panel, "--method", "glasso", "--out-dir", out) == 0
    with open(out / "tune.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 10 and sum(int(r["chosen"]) for r in rows) == 1
    taus = [float(r["tau"]) for r in rows]
    assert taus == sorted(taus)


def test_mc_outputs_and_byte_identical_rerun(tmp_path):
    cfg = dump(tmp_path / "mc.json", {"design": {"kappas": [7], "methods": ["ew", "factor_glasso"]},
                                      "reps": 2})
    assert run("mc", "--config", cfg, "--out-dir", tmp_path / "a") == 0
    assert run("mc", "--config", cfg, "--out-dir", tmp_path / "b", "--threads", 2) == 0
    for name in ("results.csv", "curve_weight_l1.csv", "curve_precision_op.csv", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    with open(tmp_path / "a" / "results.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert set(rows[0]) == {"design", "T", "method", "metric", "value", "rep_count"}
    assert len(rows) == 4 and all(r["rep_count"] == "2" for r in rows)
    with open(tmp_path / "a" / "curve_weight_l1.csv") as fh:
        curve = list(csv.reader(fh))
    assert curve[0] == ["log2_T", "T", "ew", "factor_glasso"] and curve[1][:2] == ["7.0", "128"]


def test_seed_changes_results(tmp_path):
    cfg = dump(tmp_path / "mc.json", {"design": {"kappas": [7], "methods": ["ew"]}, "reps": 1})
    run("mc", "--config", cfg, "--out-dir", tmp_path / "a", "--seed", 1)
    run("mc", "--config", cfg, "--out-dir", tmp_path / "b", "--seed", 2)
    assert (tmp_path / "a" / "results.csv").read_bytes() != (tmp_path / "b" / "results.csv").read_bytes()


def test_config_errors(tmp_path, sim_panel, capsys):
    assert run("fit", "--panel", tmp_path / "missing.csv", "--out-dir", tmp_path) == 2
    assert run("fit", "--config", dump(tmp_path / "x.json", {"bogus": 1}), "--out-dir", tmp_path) == 2
    (tmp_path / "bad.json").write_text("{not json")
    assert run("fit", "--config", tmp_path / "bad.json", "--out-dir", tmp_path) == 2
    cfg = dump(tmp_path / "b.json", {"panel": str(sim_panel), "method": "rd_factor_glasso",
                                     "break_points": ["1999Q1"]})
    assert run("fit", "--config", cfg, "--out-dir", tmp_path) == 2
    assert run("fit", "--config", dump(tmp_path / "q.json", {"q": 0}), "--out-dir", tmp_path) == 2
    assert run("fit", "--config", dump(tmp_path / "g.json", {"grid_scale": "relative"}),
               "--out-dir", tmp_path) == 2
    assert run("tune", "--panel", sim_panel, "--method", "ew", "--out-dir", tmp_path) == 2
    assert "config error" in capsys.readouterr().err


def test_data_error_exit_code(tmp_path):
    bad = tmp_path / "p.csv"
    bad.write_text("period,actual,a,b\n1,0,1,2\n1,0,3,4\n")
    assert run("fit", "--panel", bad, "--out-dir", tmp_path) == 3


def test_threads_from_environment(tmp_path, monkeypatch):
    cfg = dump(tmp_path / "mc.json", {"design": {"kappas": [7], "methods": ["ew"]}, "reps": 1})
    monkeypatch.setenv(cli.THREADS_ENV, "zero")
    assert run("mc", "--config", cfg, "--out-dir", tmp_path) == 2
    monkeypatch.setenv(cli.THREADS_ENV, "2")
    assert run("mc", "--config", cfg, "--out-dir", tmp_path) == 0


def test_far_simulation(tmp_path):
    cfg = dump(tmp_path / "far.json", {"simulate": {"kind": "far", "T": 200}, "seed": 5})
    assert run("simulate", "--config", cfg, "--out-dir", tmp_path) == 0
    panel = ingest_panel(tmp_path / "panel.csv")
    assert panel.p == 24 and panel.T == 100 and panel.times[0] == "100"


@pytest.mark.slow
def test_figure3_curve_shape(tmp_path):
    cfg = dump(tmp_path / "mc.json", {"design": {"kappas": [7, 7.5, 8, 8.5, 9, 9.5]}, "reps": 1})
    assert run("mc", "--config", cfg, "--out-dir", tmp_path) == 0
    with open(tmp_path / "curve_weight_l1.csv") as fh:
        curve = list(csv.reader(fh))
    assert len(curve) == 7 and len(curve[0]) == 5
