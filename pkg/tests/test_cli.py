import csv
import json
import subprocess
import sys
from pathlib import Path

import pytest

from bmax.cli import main

SAMPLE = str(Path(__file__).resolve().parents[1] / "data" / "sample3.csv")


def run(*args):
    return main([str(a) for a in args] + ["--log-level", "WARNING"])


def summary(out):
    return json.loads((Path(out) / "summary.json").read_text())


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.mark.parametrize("method", ["bmax-exact", "gma-bmax", "gma-0", "ewma", "star", "proj"])
def test_solve_every_method(tmp_path, method):
    assert run("solve", "--input", SAMPLE, "--method", method, "--out", tmp_path) == 0
    s = summary(tmp_path)
    assert len(s["estimate"]) == 12
    assert "regret" in s and "mse" in s
    if "weights" in s:
        assert sum(s["weights"]) == pytest.approx(1.0, abs=1e-12)
    assert (tmp_path / "trace.csv").exists()


def test_solve_ewma_weights(tmp_path):
    assert run("solve", "--input", SAMPLE, "--method", "ewma", "--out", tmp_path) == 0
    s = summary(tmp_path)
    assert len(s["weights"]) == 3 and s["config"]["omega_sq"] == 1.0


def test_solve_trace_format(tmp_path):
    assert run("solve", "--input", SAMPLE, "--method", "gma-bmax", "--k", 150, "--nu", 0.5,
               "--out", tmp_path) == 0
    rows = read_rows(tmp_path / "trace.csv")
    assert len(rows) == 150
    assert all(float(r["alpha"]) == 2.0 / (int(r["k"]) + 1) for r in rows)


def test_exact_vs_long_greedy(tmp_path):
    assert run("solve", "--input", SAMPLE, "--method", "bmax-exact", "--out", tmp_path / "e") == 0
    assert run("solve", "--input", SAMPLE, "--method", "gma-bmax", "--k", 2000, "--out", tmp_path / "g") == 0
    e, g = summary(tmp_path / "e"), summary(tmp_path / "g")
    a3 = e["curvature"]["a3"]
    assert 0 <= g["final_objective"] - e["final_objective"] <= 8 * a3 / 2003 + 1e-8


def test_solve_with_cv_grid_and_prior(tmp_path):
    prior = tmp_path / "prior.csv"
    prior.write_text("prior\n0.5\n0.25\n0.25\n")
    assert run("solve", "--input", SAMPLE, "--method", "ewma", "--cv-grid", "0.1,1,10",
               "--prior", prior, "--out", tmp_path / "o") == 0
    s = summary(tmp_path / "o")
    assert s["omega_sq_tuned"] and s["omega_sq"] in (0.1, 1.0, 10.0)
    assert s["config"]["prior"] == [0.5, 0.25, 0.25]


def test_duality_check(tmp_path, capsys):
    assert run("duality-check", "--input", SAMPLE, "--out", tmp_path) == 0
    report = json.loads(capsys.readouterr().out)
    assert abs(report["gap"]) <= 1e-6
    assert summary(tmp_path)["passed"] is True


def test_duality_check_single_candidate(tmp_path, capsys):
    data = tmp_path / "one.csv"
    data.write_text("y,f1\n1.0,0.5\n-1.0,0.0\n")
    assert run("duality-check", "--input", data, "--out", tmp_path / "o") == 0
    assert json.loads(capsys.readouterr().out)["lambda_hat"] == [1.0]


def test_duality_exit_codes(tmp_path):
    assert run("duality-check", "--input", SAMPLE, "--entropy", "linear", "--out", tmp_path) == 2
    assert run("duality-check", "--input", SAMPLE, "--tolerance", 1e-30, "--out", tmp_path) == 5


def test_nonconvergence_writes_summary(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"exact": {"grad_tolerance": 1e-14, "max_iterations": 2,
                                         "method": "gradient-descent"}}))
    assert run("solve", "--config", cfg, "--input", SAMPLE, "--method", "bmax-exact",
               "--out", tmp_path / "o") == 4
    s = summary(tmp_path / "o")
    assert s["converged"] is False and s["grad_norm"] > 1e-14 and "error" in s


def test_data_and_config_errors(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("y,f1\n1,zz\n")
    assert run("solve", "--input", bad, "--out", tmp_path / "a") == 3
    assert run("solve", "--input", tmp_path / "missing.csv", "--out", tmp_path / "a") == 3
    assert run("solve", "--input", SAMPLE, "--preset", "exp1", "--out", tmp_path / "a") == 2
    assert run("solve", "--out", tmp_path / "a") == 2
    assert run("solve", "--input", SAMPLE, "--method", "gma-0", "--entropy", "kl",
               "--out", tmp_path / "a") == 2
    cfg = tmp_path / "c.json"
    cfg.write_text('{"bogus": 1}')
    assert run("solve", "--config", cfg, "--input", SAMPLE, "--out", tmp_path / "a") == 2
    cfg.write_text("{not json")
    assert run("solve", "--config", cfg, "--input", SAMPLE, "--out", tmp_path / "a") == 2
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert run("solve", "--input", SAMPLE, "--out", blocker / "sub") == 2
    with pytest.raises(SystemExit) as exc:
        run("solve", "--input", SAMPLE, "--method", "nope")
    assert exc.value.code == 2


def test_experiment_outputs_and_rerun(tmp_path):
    args = ("experiment", "--preset", "exp2", "--replicates", 1, "--seed", 7,
            "--methods", "gma-bmax,gma-0,ewma,star,proj,oracle", "--out", tmp_path)
    assert run(*args) == 0
    first = ((tmp_path / "replicates.csv").read_bytes(), (tmp_path / "summary.json").read_bytes())
    assert run(*args) == 0
    assert first == ((tmp_path / "replicates.csv").read_bytes(), (tmp_path / "summary.json").read_bytes())
    rows = read_rows(tmp_path / "replicates.csv")
    assert list(rows[0]) == ["replicate", "method", "k", "regret"]
    assert {r["method"] for r in rows} == {"gma-bmax", "gma-0", "ewma", "star", "proj", "oracle"}
    assert [r["regret"] for r in rows if r["method"] == "oracle"] == ["0.0"]
    s = summary(tmp_path)
    assert s["config"]["scenario"]["seed"] == 7
    assert s["cumulative_frequency"]["boundaries"][-1] == 0.22
    # rerun from the embedded config into the same directory
    assert run("experiment", "--config", tmp_path / "summary.json") == 0
    assert first == ((tmp_path / "replicates.csv").read_bytes(), (tmp_path / "summary.json").read_bytes())


def test_workers_env(tmp_path, monkeypatch):
    monkeypatch.setenv("BMAX_WORKERS", "x")
    assert run("experiment", "--preset", "exp1", "--replicates", 1, "--methods", "star",
               "--out", tmp_path) == 2
    monkeypatch.setenv("BMAX_WORKERS", "2")
    assert run("experiment", "--preset", "exp1", "--replicates", 2, "--methods", "star",
               "--out", tmp_path) == 0


def test_oracle_check(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"scenario": {"n": 20, "m": 10, "m1": 3, "s": 1.0, "sigma": 1.0,
                                            "misspec_scale": 0.5, "truth_kind": "f1_plus_delta"}}))
    assert run("oracle-check", "--config", cfg, "--replicates", 30, "--out", tmp_path / "o") == 0
    report = json.loads(capsys.readouterr().out)
    assert report["passed"] and report["replicates"] == 30
    assert summary(tmp_path / "o")["config"]["omega_sq"] == 2.0
    assert len(read_rows(tmp_path / "o" / "oracle.csv")) == 30


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "bmax", "solve", "--input", SAMPLE, "--method", "star",
                           "--out", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    s = summary(tmp_path)
    assert len(s["estimate"]) == 12
    assert set(s["star"]) == {"k1", "k2", "alpha"}
