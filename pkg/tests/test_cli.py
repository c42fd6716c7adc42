import csv
import json

import numpy as np
import pytest

from clusterps.cli import main
from clusterps.data import write_csv
from clusterps.simulation import DGPConfig, draw_trial, to_dataset


@pytest.fixture(scope="module")
def trial_csv(tmp_path_factory):
    p = tmp_path_factory.mktemp("data") / "trial.csv"
    write_csv(to_dataset(draw_trial(DGPConfig(K=40), np.random.default_rng(5))), p)
    return p


@pytest.fixture(scope="module")
def strong_csv(tmp_path_factory):
    ds = to_dataset(draw_trial(DGPConfig(K=40), np.random.default_rng(6)))
    from clusterps.data import Cluster, TrialDataset

    clusters = tuple(Cluster(c.id, c.cluster_covariates, c.indiv_covariates, c.assignment,
                             c.uptake * c.assignment, c.outcome) for c in ds.clusters)
    p = tmp_path_factory.mktemp("data") / "strong.csv"
    write_csv(TrialDataset(clusters, 0.5), p)
    return p


def _run(args, capsys=None):
    code = main([str(a) for a in args])
    err = capsys.readouterr().err if capsys else ""
    return code, err


def _read(path):
    return json.loads(path.read_text())


def _grid(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


FAST = ["--learner", "glm", "--threads", "1"]


def test_strong_mode_rejects_always_takers(strong_csv, tmp_path, capsys):
    out = tmp_path / "o"
    code, err = _run(["analyze", "--data", strong_csv, "--out", out, "--mode", "strong",
                      "--estimand", "NAE_at", *FAST], capsys)
    assert code == 2
    assert json.loads(err.strip().splitlines()[-1])["error"] == "StratumUnavailable"
    assert not out.exists()


def test_four_cluster_smoke(tmp_path):
    rng = np.random.default_rng(0)
    lines = ["cluster_id,a,d,y,x_1"]
    for k, a in enumerate([1, 1, 0, 0]):
        for j in range(8):
            d = int(rng.random() < (0.6 if a else 0.2))
            lines.append(f"c{k},{a},{d},{rng.normal(2 * d + a):.6f},{rng.normal():.6f}")
    data = tmp_path / "four.csv"
    data.write_text("\n".join(lines) + "\n")
    out = tmp_path / "o"
    code, _ = _run(["analyze", "--data", data, "--out", out, "--estimator", "mo", "--B", "0",
                    "--p-formula", "A,X", "--mu-formula", "D,X", *FAST])
    assert code == 0
    names = {e["estimand"] for e in _read(out / "analysis.json")["estimates"]}
    assert {"PCE_co", "ICE_co", "NAE_co", "NAE_nt"} <= names


def test_replay_byte_identical_across_threads(trial_csv, tmp_path):
    first = tmp_path / "first"
    assert _run(["analyze", "--data", trial_csv, "--out", first, "--B", "120", "--learner", "glm",
                 "--threads", "1", "--seed", "7"])[0] == 0
    again = tmp_path / "again"
    assert _run(["replay", first / "manifest.json", "--out", again, "--threads", "3"])[0] == 0
    for f in ("analysis.json", "eif_clusters.csv", "manifest.json"):
        assert (first / f).read_bytes() == (again / f).read_bytes(), f
    manifest = _read(first / "manifest.json")
    assert manifest["seed"] == 7 and str(trial_csv) in manifest["inputs"]


def test_reports_have_intervals(trial_csv, tmp_path):
    out = tmp_path / "o"
    assert _run(["analyze", "--data", trial_csv, "--out", out, "--B", "100", *FAST])[0] == 0
    reports = _read(out / "analysis.json")["estimates"]
    by = {(r["method"], r["estimand"]): r for r in reports}
    assert by[("np", "NAE_co")]["ci_method"] == "wald"
    assert by[("dr", "NAE_co")]["ci_method"] == "bootstrap_percentile"
    assert by[("mo", "ICE_nt")]["point"] == 0.0
    for r in reports:
        assert (r["ci"] is not None) == (r["se"] is not None)
    pce, ice, nae = (by[("np", f"{e}_co")]["point"] for e in ("PCE", "ICE", "NAE"))
    assert pce == ice + nae


def test_config_file_and_flag_override(trial_csv, tmp_path):
    ini = tmp_path / "run.ini"
    ini.write_text(f"[common]\nseed = 3\n\n[analyze]\ndata = {trial_csv}\nestimator = mo\nB = 0\nlearner = glm\n")
    out = tmp_path / "o"
    assert _run(["analyze", "--config", ini, "--out", out, "--seed", "4", "--threads", "1"])[0] == 0
    cfg = _read(out / "manifest.json")["config"]
    assert cfg["seed"] == 4 and cfg["estimator"] == ["mo"] and cfg["B"] == 0


def test_unknown_config_key(trial_csv, tmp_path, capsys):
    ini = tmp_path / "bad.ini"
    ini.write_text("[analyze]\nbogus = 1\n")
    out = tmp_path / "o"
    code, err = _run(["analyze", "--config", ini, "--data", trial_csv, "--out", out], capsys)
    assert code == 2 and "ConfigError" in err
    assert not out.exists()


def test_invalid_data_no_partial_output(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("cluster_id,a,d,y\nk1,1,2,1\nk2,0,0,1\n")
    out = tmp_path / "o"
    code, err = _run(["analyze", "--data", bad, "--out", out, *FAST], capsys)
    assert code == 2 and "NonBinary" in err
    assert not out.exists()


def test_estimation_failure_exit_3(tmp_path, capsys):
    # nobody takes up treatment: the complier stratum has no mass
    rng = np.random.default_rng(1)
    lines = ["cluster_id,a,d,y,x_1"]
    for k in range(12):
        for j in range(6):
            lines.append(f"c{k},{k % 2},0,{rng.normal():.6f},{rng.normal():.6f}")
    data = tmp_path / "none.csv"
    data.write_text("\n".join(lines) + "\n")
    out = tmp_path / "o"
    code, err = _run(["analyze", "--data", data, "--out", out, "--estimator", "mo", "--B", "0",
                      "--estimand", "NAE_co", "--p-formula", "A,X", "--mu-formula", "X", *FAST], capsys)
    assert code == 3
    assert json.loads(err.strip().splitlines()[-1])["error"] == "ZeroDenominator"
    assert not out.exists()


# --- sensitivity -----------------------------------------------------------------------

def test_sensitivity_unit_grid_matches_analysis(trial_csv, tmp_path):
    grid_dir, base_dir = tmp_path / "g", tmp_path / "b"
    common = ["--data", trial_csv, "--seed", "2", *FAST]
    assert _run(["sensitivity", "--out", grid_dir, "--estimand", "NAE_co", "--alpha", "1,1", "--beta", "1,1",
                 "--gamma", "1,1", *common])[0] == 0
    assert _run(["analyze", "--out", base_dir, "--estimator", "np", "--B", "0", "--estimand", "NAE_co",
                 *common])[0] == 0
    rows = _grid(grid_dir / "grid.csv")
    assert len(rows) == 1
    base = _read(base_dir / "analysis.json")["estimates"][0]
    assert float(rows[0]["estimate"]) == base["point"] and float(rows[0]["se"]) == base["se"]


def test_sensitivity_default_grid_size(trial_csv, tmp_path):
    out = tmp_path / "g"
    assert _run(["sensitivity", "--data", trial_csv, "--out", out, "--estimand", "NAE_co", *FAST])[0] == 0
    rows = _grid(out / "grid.csv")
    assert len(rows) == 49
    assert {r["beta"] for r in rows} == {"1.0"}


def test_sensitivity_strong_ice_varies_only_with_gamma(strong_csv, tmp_path):
    out = tmp_path / "g"
    assert _run(["sensitivity", "--data", strong_csv, "--out", out, "--mode", "strong",
                 "--estimand", "ICE_co", *FAST])[0] == 0
    rows = _grid(out / "grid.csv")
    assert {r["alpha"] for r in rows} == {"1.0"} and {r["beta"] for r in rows} == {"1.0"}
    assert len({r["estimate"] for r in rows}) == len(rows) == 7


# --- simulate / truth --------------------------------------------------------------------

def test_simulate_smoke(tmp_path):
    out = tmp_path / "s"
    code, _ = _run(["simulate", "--out", out, "--reps", "1", "--K", "4", "--estimator", "mo", "--B", "0",
                    "--population", "10000", "--L", "2", "--estimand", "NAE_co,ICE_co", "--threads", "1"])
    assert code == 0
    summary = _grid(out / "summary.csv")
    assert {r["scenario"] for r in summary} == {"a", "b", "c", "d"}
    for scen in "abcd":
        block = [r for r in summary if r["scenario"] == scen]
        assert sorted(r["estimand"] for r in block) == ["ICE_co", "NAE_co"]
    assert "NAE_co" in _read(out / "truth.json")["truths"]


def test_simulate_replay_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    args = ["--reps", "2", "--K", "30", "--scenario", "a", "--estimator", "mo,np", "--B", "0", "--learner", "glm",
            "--population", "10000", "--estimand", "NAE_co"]
    assert _run(["simulate", "--out", a, "--threads", "1", *args])[0] == 0
    assert _run(["replay", a / "manifest.json", "--out", b, "--threads", "2"])[0] == 0
    for f in ("summary.csv", "replicates.csv", "truth.json", "manifest.json"):
        assert (a / f).read_bytes() == (b / f).read_bytes(), f


def test_truth_command(tmp_path):
    out = tmp_path / "t"
    assert _run(["truth", "--out", out, "--population", "10000", "--multiplier", "nt,0,0=0.5"])[0] == 0
    t = _read(out / "truth.json")
    assert t["defiers"] == 0 and t["config"]["multipliers"] == {"nt,0,0": 0.5}


def test_bad_multiplier(tmp_path, capsys):
    code, err = _run(["truth", "--out", tmp_path / "t", "--multiplier", "nt,0,0"], capsys)
    assert code == 2
