import csv
import json
import subprocess
import sys
import time

import numpy as np
import pytest

from mnreg.cli import (EXIT_BANDS, EXIT_DATA, EXIT_OK, EXIT_USAGE, main, parse_beta, read_csv,
                       resolve_threads)
from mnreg.cli import UsageError

SECTION_BETA = "1:2,2:4,3:-3,4:-5,5:10"


def simulate(tmp_path, name="d.csv", p=100, n=200, seed=1, extra=()):
    out = tmp_path / name
    rc = main(["simulate", "--design", "toeplitz", "--rho", "0.9", "--n", str(n), "--p", str(p),
               "--family", "gaussian", "--beta", SECTION_BETA, "--intercept", "1",
               "--seed", str(seed), "--out", str(out), *extra])
    assert rc == EXIT_OK
    return out


def test_parse_beta():
    np.testing.assert_array_equal(parse_beta("1:2,3:-1.5", 4), [2.0, 0.0, -1.5, 0.0])
    for bad in ("1=2", "0:1", "5:1", "1:2,1:3", "a:b"):
        with pytest.raises(UsageError):
            parse_beta(bad, 4)


def test_resolve_threads(monkeypatch):
    monkeypatch.setenv("MNR_THREADS", "3")
    assert resolve_threads(None) == 3 and resolve_threads(2) == 2
    monkeypatch.setenv("MNR_THREADS", "x")
    with pytest.raises(UsageError):
        resolve_threads(None)


def test_simulate_outputs_and_determinism(tmp_path):
    a = simulate(tmp_path, "a.csv", p=500)
    b = simulate(tmp_path, "b.csv", p=500)
    assert a.read_bytes() == b.read_bytes()
    truth = json.loads((tmp_path / "a.truth.json").read_text())
    assert truth["model"]["beta"] == {"1": 2.0, "2": 4.0, "3": -3.0, "4": -5.0, "5": 10.0}
    assert truth["model"]["beta0"] == 1.0 and truth["cov"] == {"kind": "toeplitz", "p": 500, "rho": 0.9}
    man = json.loads((tmp_path / "a.csv.manifest.json").read_text())
    assert man["command"] == "simulate" and man["resolved"]["seed"] == 1
    header = a.read_text().splitlines()[0].split(",")
    assert header[0] == "x1" and header[-1] == "y" and len(header) == 501


@pytest.mark.parametrize("argv", [
    ["simulate", "--design", "toeplitz", "--rho", "0.9", "--n", "20", "--p", "5", "--beta", "1:1",
     "--seed", "1"],
    ["simulate", "--design", "toeplitz", "--n", "20", "--p", "5", "--beta", "1:1", "--seed", "1",
     "--out", "x.csv"],
    ["simulate", "--design", "ar2", "--n", "20", "--p", "5", "--beta", "9:1", "--seed", "1",
     "--out", "x.csv"],
    ["simulate", "--design", "cube", "--n", "20", "--p", "5", "--beta", "1:1", "--seed", "1",
     "--out", "x.csv"],
    ["infer", "--data", "x.csv", "--response", "y", "--out", "r", "--level", "1.5"],
    ["infer", "--data", "x.csv", "--response", "y", "--out", "r", "--ebic-gamma", "-1"],
    ["bogus"],
])
def test_usage_errors_exit_2(argv, tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == EXIT_USAGE
    err = capsys.readouterr().err
    assert "--" in err or "invalid choice" in err


def test_infer_outputs(tmp_path, capsys):
    data = simulate(tmp_path)
    rc = main(["infer", "--data", str(data), "--response", "y", "--out", str(tmp_path / "rep"),
               "--threads", "1"])
    assert rc == EXIT_OK
    out = capsys.readouterr().out
    assert out.count("\n") >= 11 and "x5" in out
    rows = list(csv.DictReader((tmp_path / "rep.csv").open()))
    assert list(rows[0]) == ["feature", "beta_hat", "se", "ci_low", "ci_high", "p_value", "p_holm",
                             "p_bh", "z_score", "df", "subset_size"]
    assert len(rows) == 100
    holm = {r["feature"] for r in rows if float(r["p_holm"]) < 0.05}
    assert holm == {"x1", "x2", "x3", "x4", "x5"}
    rep = json.loads((tmp_path / "rep.json").read_text())
    assert len(rep["records"]) == 100
    assert (tmp_path / "rep.manifest.json").exists()


def test_infer_desparsified_and_screen(tmp_path):
    data = simulate(tmp_path, p=40, n=120)
    for method in ("desparsified", "mnr-screen"):
        assert main(["infer", "--data", str(data), "--response", "y", "--method", method,
                     "--out", str(tmp_path / method)]) == EXIT_OK
        assert len((tmp_path / f"{method}.csv").read_text().splitlines()) == 41


def test_infer_binomial_wald(tmp_path):
    out = tmp_path / "b.csv"
    assert main(["simulate", "--design", "ar2", "--n", "300", "--p", "40", "--family", "binomial",
                 "--beta", "1:2,2:-2,3:1.5", "--case-control", "--seed", "3", "--out", str(out)]) == 0
    y = np.loadtxt(out, delimiter=",", skiprows=1)[:, -1]
    assert y.sum() == 150
    assert main(["infer", "--data", str(out), "--response", "y", "--family", "binomial",
                 "--selection", "sis_then_mcp", "--out", str(tmp_path / "rb")]) == EXIT_OK
    rows = list(csv.DictReader((tmp_path / "rb.csv").open()))
    assert all(r["df"] == "inf" for r in rows if r["p_value"] != "nan")


def test_infer_ebic_recorded_in_report(tmp_path):
    data = simulate(tmp_path, p=60, n=150)
    assert main(["infer", "--data", str(data), "--response", "y", "--screen-rounds", "10",
                 "--ebic-gamma", "1", "--out", str(tmp_path / "e")]) == EXIT_OK
    man = json.loads((tmp_path / "e.manifest.json").read_text())["resolved"]
    assert man["ebic_gamma"] == 1.0 and man["screen_rounds"] == 10
    rep = json.loads((tmp_path / "e.json").read_text())
    holm = {r["feature"] for r in rep["records"] if r["p_holm"] is not None and r["p_holm"] < 0.05}
    assert holm == {"x1", "x2", "x3", "x4", "x5"}


def test_infer_cox_requires_event(tmp_path):
    out = tmp_path / "c.csv"
    assert main(["simulate", "--design", "ar2", "--n", "150", "--p", "20", "--family", "cox",
                 "--beta", "1:1,2:-1", "--seed", "4", "--out", str(out)]) == 0
    assert main(["infer", "--data", str(out), "--response", "y", "--family", "cox",
                 "--out", str(tmp_path / "rc")]) == EXIT_USAGE
    assert main(["infer", "--data", str(out), "--response", "y", "--event", "event", "--family", "cox",
                 "--selection", "sis_then_lasso", "--out", str(tmp_path / "rc")]) == EXIT_OK


def test_malformed_csv_exit_3(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("x1,x2,y\n1,2,3\n4,oops,6\n")
    assert main(["infer", "--data", str(bad), "--response", "y", "--out", str(tmp_path / "r")]) == EXIT_DATA
    err = capsys.readouterr().err
    assert "line 3" in err and "'x2'" in err
    ragged = tmp_path / "ragged.csv"
    ragged.write_text("x1,x2,y\n1,2\n")
    assert main(["infer", "--data", str(ragged), "--response", "y", "--out", str(tmp_path / "r")]) == EXIT_DATA
    assert main(["infer", "--data", str(tmp_path / "missing.csv"), "--response", "y",
                 "--out", str(tmp_path / "r")]) == EXIT_DATA
    assert main(["infer", "--data", str(bad), "--response", "z", "--out", str(tmp_path / "r")]) == EXIT_DATA


def test_read_csv_names_and_standardization(tmp_path):
    path = tmp_path / "t.csv"
    path.write_text("a,y,b\n1,0,5\n2,1,7\n3,0,6\n")
    ds = read_csv(path, "y", "gaussian")
    assert ds.feature_names == ["a", "b"] and ds.standardized
    np.testing.assert_allclose(ds.X[:, 0], [-1, 0, 1])


def test_causal_pinned_seed(tmp_path, capsys):
    data = simulate(tmp_path, p=500, seed=1)
    assert main(["causal", "--data", str(data), "--response", "y", "--out", str(tmp_path / "c")]) == 0
    rep = json.loads((tmp_path / "c.json").read_text())
    assert rep["selected_causal"] == [1, 2, 3, 4, 5] and rep["fallback"] is False
    assert "selected_causal: x1, x2, x3, x4, x5" in capsys.readouterr().out


def test_causal_alpha_one(tmp_path):
    data = simulate(tmp_path, p=60, n=150)
    assert main(["causal", "--data", str(data), "--response", "y", "--alpha", "1.0",
                 "--out", str(tmp_path / "c")]) == 0
    rep = json.loads((tmp_path / "c.json").read_text())
    assessed = [int(r["feature"][1:]) for r in rep["records"]]
    assert sorted(rep["selected_causal"]) == sorted(assessed)


def test_causal_null_fallback(tmp_path):
    out = tmp_path / "null.csv"
    assert main(["simulate", "--design", "toeplitz", "--rho", "0.5", "--n", "100", "--p", "30",
                 "--beta", "", "--seed", "2", "--out", str(out)]) == 0
    assert main(["causal", "--data", str(out), "--response", "y", "--out", str(tmp_path / "c")]) == 0
    rep = json.loads((tmp_path / "c.json").read_text())
    if rep["records"]:
        assert rep["fallback"] is True and len(rep["selected_causal"]) == 1


def test_bench_smoke_fast_and_thread_invariant(tmp_path):
    t0 = time.perf_counter()
    assert main(["bench", "--config", "smoke", "--out", str(tmp_path / "one"), "--threads", "1"]) == 0
    assert time.perf_counter() - t0 < 10
    assert main(["bench", "--config", "smoke", "--out", str(tmp_path / "two"), "--threads", "2",
                 "--replicates", "1"]) == 0
    for ext in ("json", "csv", "md"):
        assert (tmp_path / "one" / f"smoke.{ext}").read_bytes() == (tmp_path / "two" / f"smoke.{ext}").read_bytes()
    man = json.loads((tmp_path / "one" / "smoke.manifest.json").read_text())
    assert man["config"]["name"] == "smoke" and man["bands"][0]["ok"]


def test_bench_threads_multi_replicate(tmp_path):
    args = ["bench", "--config", "smoke", "--replicates", "3", "--seed", "5"]
    assert main(args + ["--out", str(tmp_path / "a"), "--threads", "1"]) == 0
    assert main(args + ["--out", str(tmp_path / "b"), "--threads", "3"]) == 0
    assert (tmp_path / "a" / "smoke.json").read_bytes() == (tmp_path / "b" / "smoke.json").read_bytes()


def test_bench_band_failure_exit_5(tmp_path, capsys):
    cfg = json.loads(json.dumps({
        "name": "strict", "generator": {"cov": {"kind": "toeplitz", "p": 30, "rho": 0.5}, "n": 80},
        "model": {"family": "gaussian", "p": 30, "beta": {"1": 1.0}}, "replicates": 1,
        "bands": {"noise_coverage": [1.5, 2.0]}}))
    path = tmp_path / "strict.json"
    path.write_text(json.dumps(cfg))
    assert main(["bench", "--config", str(path), "--out", str(tmp_path / "o")]) == EXIT_BANDS
    assert "[FAIL] strict: noise_coverage" in capsys.readouterr().out


def test_bench_bad_config(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["bench", "--config", str(bad), "--out", str(tmp_path / "o")]) == EXIT_DATA
    assert main(["bench", "--config", "no_such_preset", "--out", str(tmp_path / "o")]) == EXIT_DATA
    (tmp_path / "inv.json").write_text('{"model": {}}')
    assert main(["bench", "--config", str(tmp_path / "inv.json"), "--out", str(tmp_path / "o")]) == EXIT_USAGE


def test_console_script(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "mnreg.cli", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and "mnreg" in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "mnreg.cli", "simulate", "--design", "ar2"],
                          capture_output=True, text=True)
    assert proc.returncode == 2
