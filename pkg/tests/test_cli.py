import csv
import json
import math
import subprocess
import sys

import numpy as np
import pytest
import yaml

import oracles
from rsoc import cli

SMALL_MC = {"M": 2000, "N": 100, "seed": 0}


def _write(tmp_path, name="run.yaml", **cfg):
    cfg.setdefault("output", str(tmp_path / "out"))
    path = tmp_path / name
    path.write_text(yaml.safe_dump(cfg))
    return str(path)


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


# -- examples ---------------------------------------------------------------


def test_example_list(capsys):
    assert cli.main(["example", "list"]) == cli.EXIT_OK
    out = capsys.readouterr().out
    assert [line.split()[0] for line in out.splitlines()] == ["ex31", "ex32", "ex33"]


def test_example_describe(capsys):
    assert cli.main(["example", "describe", "ex32"]) == cli.EXIT_OK
    out = capsys.readouterr().out
    assert "id: ex32" in out and "ln(ch(x))" in out


@pytest.mark.parametrize("argv", [["example", "describe", "ex99"], ["example", "describe"], ["frobnicate"], ["verify"]])
def test_usage_errors(argv, capsys):
    assert cli.main(argv) == cli.EXIT_USAGE


# -- solve ------------------------------------------------------------------


def test_solve_value_grid(tmp_path):
    grid = {"x_lo": -3.0, "x_hi": 3.0, "dx": 0.02, "dt": 0.01, "control_grid_step": 0.05}
    cfg = _write(tmp_path, problem="ex31", grid=grid, solve=["hjb"])
    assert cli.main(["solve", cfg]) == cli.EXIT_OK
    rows = _rows(tmp_path / "out" / "value.csv")
    hit = [r for r in rows if math.isclose(float(r["t"]), 0.5) and math.isclose(float(r["x"]), -1.0, abs_tol=1e-9)]
    assert len(hit) == 1 and abs(float(hit[0]["v"]) - oracles.E_MHALF) <= 1e-2
    meta = json.load(open(tmp_path / "out" / "metadata.json"))
    assert meta["status"] == "ok" and "value.csv" in meta["artifacts"]
    assert (tmp_path / "out" / "plots" / "value_t0.000.dat").exists()


def test_unstable_explicit_scheme_exits_with_guard(tmp_path, capsys):
    cfg = _write(tmp_path, problem="ex31", grid={"scheme": "explicit", "dx": 0.01, "dt": 0.01}, solve=["hjb"])
    assert cli.main(["solve", cfg]) == cli.EXIT_GUARD
    assert "stability bound" in capsys.readouterr().err
    meta = json.load(open(tmp_path / "out" / "metadata.json"))
    assert meta["status"] == "failed" and 0 < meta["stability_bound"] < 0.01


def _solve_paths(tmp_path, name, seed_args=(), env=None, monkeypatch=None, **extra):
    out = tmp_path / name
    cfg = _write(tmp_path, f"{name}.yaml", problem="ex31", x0=-1.0, policy={"constant": -1.0},
                 monte_carlo=SMALL_MC, solve=["paths", "adjoints"], output=str(out), **extra)
    assert cli.main(["solve", cfg, *seed_args]) == cli.EXIT_OK
    return {f: (out / f).read_bytes() for f in ("paths.csv", "cost.csv", "adjoints.csv")}


def test_same_seed_gives_identical_files(tmp_path):
    a = _solve_paths(tmp_path, "a")
    b = _solve_paths(tmp_path, "b")
    c = _solve_paths(tmp_path, "c", seed_args=("--seed", "1"))
    assert a == b
    assert a["paths.csv"] != c["paths.csv"]


def test_seed_precedence(tmp_path, monkeypatch):
    cfg = cli.parse_config({"problem": "ex31", "monte_carlo": {"seed": 3}})
    assert cli.effective_seed(cfg, None) == 3
    monkeypatch.setenv("RSOC_SEED", "11")
    assert cli.effective_seed(cfg, None) == 11
    assert cli.effective_seed(cfg, 4) == 4
    env_run = _solve_paths(tmp_path, "env")
    monkeypatch.delenv("RSOC_SEED")
    flag_run = _solve_paths(tmp_path, "flag", seed_args=("--seed", "11"))
    assert env_run == flag_run
    monkeypatch.setenv("RSOC_SEED", "eleven")
    with pytest.raises(cli.ConfigError):
        cli.effective_seed(cfg, None)


def test_adjoint_csv_matches_smooth_closed_form(tmp_path):
    out = tmp_path / "ex32"
    cfg = _write(tmp_path, problem="ex32", x0=0.5, policy={"constant": -2.0},
                 monte_carlo={"M": 5000, "N": 200, "seed": 0}, solve=["paths", "adjoints"], output=str(out))
    assert cli.main(["solve", cfg]) == cli.EXIT_OK
    X = {(r["path"], r["step"]): float(r["X"]) for r in _rows(out / "paths.csv")}
    adj = [r for r in _rows(out / "adjoints.csv") if 0 < int(r["step"]) < 200]
    err = np.array([float(r["p"]) - math.tanh(X[(r["path"], r["step"])]) for r in adj])
    assert np.sqrt(np.mean(err**2)) <= 3e-2
    assert json.load(open(out / "metadata.json"))["monte_carlo"]["N"] == 200


# -- verify -----------------------------------------------------------------


def test_verify_passes_on_kink(tmp_path, capsys):
    cfg = _write(tmp_path, problem="ex31", x0=0.0, policy={"constant": 1.0}, monte_carlo=SMALL_MC)
    assert cli.main(["verify", cfg, "--suite", "thm31,thm33"]) == cli.EXIT_OK
    out = capsys.readouterr().out
    assert "thm31" in out and "thm33" in out and "min margin" in out
    rep = json.load(open(tmp_path / "out" / "reports" / "thm33.json"))
    assert rep["schema"] == "rsoc-report/1" and rep["status"] in ("pass", "vacuous-pass")


def test_verify_fails_on_suboptimal_control(tmp_path, capsys):
    cfg = _write(tmp_path, problem="ex31", x0=-1.0, policy="suboptimal", monte_carlo=SMALL_MC)
    assert cli.main(["verify", cfg, "--suite", "thm31,mp"]) == cli.EXIT_FAIL
    assert "FAIL: worst violation" in capsys.readouterr().out
    meta = json.load(open(tmp_path / "out" / "metadata.json"))
    assert meta["status"] == {"thm31": "fail", "mp": "fail"}


def test_checks_without_closed_form_are_not_applicable(tmp_path):
    problem = {"b": "u", "sigma": "0.5", "f": "-0.5*u^2", "phi": "x", "controls": [[-2, 2]]}
    cfg = _write(tmp_path, problem=problem, x0=0.5, policy={"constant": 1.0}, value="grid",
                 grid={"x_lo": -3, "x_hi": 4, "dx": 0.05, "dt": 0.02}, monte_carlo=SMALL_MC)
    assert cli.main(["verify", cfg, "--suite", "thm31,smooth,strict-gap"]) == cli.EXIT_OK
    rep = json.load(open(tmp_path / "out" / "reports" / "smooth.json"))
    assert rep["status"] == "not-applicable"


# -- configuration errors ---------------------------------------------------


@pytest.mark.parametrize(
    "cfg",
    [
        {"problem": "ex31", "colour": "red"},
        {"problem": "ex99"},
        {"x0": 1.0},
        {"problem": "ex31", "policy": "best"},
        {"problem": "ex31", "grid": {"dz": 0.1}},
        {"problem": "ex31", "monte_carlo": {"M": 10, "paths": 3}},
        {"problem": "ex31", "checks": ["thm99"]},
        {"problem": {"b": "u", "sigma": "1", "f": "0", "phi": "x"}},
        {"problem": {"b": "u", "sigma": "1", "f": "0", "phi": "x", "controls": [[-1, 1]]}},
        {"problem": "ex31", "tolerances": {"jet": "loose"}},
        {"problem": "ex31", "grid": {"dx": -1.0}},
    ],
)
def test_config_errors_exit_before_computing(tmp_path, cfg, capsys):
    path = tmp_path / "bad.yaml"
    path.write_text(yaml.safe_dump(cfg))
    code = cli.main(["solve", str(path), "--out", str(tmp_path / "o")])
    assert code == cli.EXIT_USAGE
    assert "error" in capsys.readouterr().err
    assert not (tmp_path / "o" / "value.csv").exists()


def test_missing_and_malformed_files(tmp_path):
    assert cli.main(["solve", str(tmp_path / "nope.yaml")]) == cli.EXIT_USAGE
    bad = tmp_path / "bad.yaml"
    bad.write_text("problem: [ex31\n")
    assert cli.main(["solve", str(bad)]) == cli.EXIT_USAGE


def test_unknown_suite_entry(tmp_path):
    cfg = _write(tmp_path, problem="ex31", monte_carlo=SMALL_MC)
    assert cli.main(["verify", cfg, "--suite", "thm31,nonsense"]) == cli.EXIT_USAGE


def test_policy_outside_control_set(tmp_path):
    cfg = _write(tmp_path, problem="ex31", policy={"constant": 0.5}, monte_carlo=SMALL_MC, solve=["paths"])
    assert cli.main(["solve", cfg]) == cli.EXIT_USAGE


def test_shipped_configs_parse():
    from pathlib import Path

    for path in sorted((Path(__file__).parent.parent / "configs").glob("*.yaml")):
        cli.load_config(path)


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "rsoc", "example", "list"], capture_output=True, text=True, timeout=120)
    assert res.returncode == 0 and "ex33" in res.stdout
