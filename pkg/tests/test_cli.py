import csv
import subprocess
import sys

import numpy as np
import pytest

from hinfswitch.cli import main
from hinfswitch.evaluate import parse_report_text


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_solve_writes_outputs(tmp_path, capsys):
    assert main(["solve", "bull_bear.toml", "--gamma", "1", "--out", str(tmp_path),
                 "--plot"]) == 0
    for name in ("riccati.csv", "gains.csv", "certificates.csv", "riccati.svg",
                 "gains_ThetaHat1.svg"):
        assert (tmp_path / name).exists()
    rows = _rows(tmp_path / "riccati.csv")
    assert len(rows) == 3501 * 2
    first = [r for r in rows if r["s"] == "0.0"]
    assert float(first[0]["P_11"]) == pytest.approx(0.30469091, abs=1e-8)
    assert "min margin" in capsys.readouterr().out


def test_solve_below_threshold_exits_2(tmp_path, capsys):
    assert main(["solve", "bull_bear.toml", "--gamma", "0.05", "--out", str(tmp_path)]) == 2
    err = capsys.readouterr().err
    assert "infeasible" in err and "margin" in err and "regime" in err


def test_zero_scenario_gives_zeros(tmp_path):
    assert main(["solve", "zero.toml", "--out", str(tmp_path), "--ds", "0.01"]) == 0
    for r in _rows(tmp_path / "riccati.csv"):
        assert all(float(r[k]) == 0.0 for k in r if k.startswith(("Pi_", "P_", "eta_")))
    for r in _rows(tmp_path / "gains.csv"):
        assert all(float(r[k]) == 0.0 for k in r if k not in ("s", "regime"))


def test_evaluate_zero_state_value_zero(tmp_path):
    assert main(["evaluate", "zero.toml", "--out", str(tmp_path), "--ds", "0.01",
                 "--paths", "50"]) == 0
    rep = parse_report_text((tmp_path / "report.txt").read_text())
    assert float(rep["value_formula"]) == 0.0 and float(rep["mc.mean"]) == 0.0


def test_gamma_star_bracket(tmp_path, capsys):
    assert main(["gamma-star", "bull_bear.toml", "--lo", "0.01", "--hi", "3", "--tol", "1e-3",
                 "--out", str(tmp_path), "--sweep", "4", "--ds", "0.01"]) == 0
    rep = parse_report_text((tmp_path / "report.txt").read_text())
    lo, hi = float(rep["solvability_threshold.lo"]), float(rep["solvability_threshold.hi"])
    assert 0 < hi - lo <= 1e-3 and hi < 1.0
    assert len(_rows(tmp_path / "gamma_sweep.csv")) == 4


def test_missing_file_exits_1(tmp_path, capsys):
    assert main(["solve", str(tmp_path / "nope.toml"), "--out", str(tmp_path)]) == 1
    bad = tmp_path / "bad.toml"
    bad.write_text("dims = [")
    assert main(["solve", str(bad), "--out", str(tmp_path)]) == 1


def test_usage_errors_exit_1(capsys):
    assert main(["solve"]) == 1
    assert main(["frobnicate", "x"]) == 1
    assert main(["solve", "bull_bear.toml", "--ds", "-1"]) == 1


def test_runs_are_byte_identical(tmp_path):
    for sub in ("a", "b"):
        assert main(["simulate", "bull_bear.toml", "--out", str(tmp_path / sub), "--paths", "50",
                     "--seed", "3", "--ds", "0.01", "--threads", "1"]) == 0
    for name in ("path.csv", "chain.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_saddle_and_hinf_commands(tmp_path):
    assert main(["saddle-check", "bull_bear.toml", "--out", str(tmp_path / "s"), "--paths", "200",
                 "--eps", "0", "--ds", "0.01"]) == 0
    rep = parse_report_text((tmp_path / "s" / "report.txt").read_text())
    assert rep["saddle.all_pass"] == "True" and float(rep["saddle.0.delta"]) == 0.0
    assert main(["hinf-check", "bull_bear.toml", "--out", str(tmp_path / "h"), "--paths", "100",
                 "--ds", "0.01"]) == 0
    rep = parse_report_text((tmp_path / "h" / "report.txt").read_text())
    assert float(rep["hinf.gamma_sq"]) == 1.0 and int(rep["hinf.n_candidates"]) == 20


def test_example_command(tmp_path, monkeypatch):
    monkeypatch.setenv("HINFSWITCH_OUT", str(tmp_path))
    assert main(["example", "--paths", "100", "--ds", "0.01", "--plot"]) == 0
    for g in ("gamma_1", "gamma_2"):
        for name in ("riccati.csv", "gains.csv", "path.csv", "report.txt", "states.svg"):
            assert (tmp_path / g / name).exists()
    assert (tmp_path / "compare_ThetaHat1.svg").exists()


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "hinfswitch", "--help"], capture_output=True,
                         text=True)
    assert res.returncode == 0 and "gamma-star" in res.stdout
