import json
import subprocess
import sys

import pytest

from convexflow.cli import ConfigError, build_config, main
from convexflow.io import read_json

SMALL = {
    "n": 41,
    "T": 1.0,
    "snapshot_dt": 0.05,
    "flow": {"t_end": 3.0, "dt_ode": 0.02},
    "mc": {"n_paths": 500, "dt_mc": 0.01, "t": 0.5, "exit_paths": 2000, "exit_ts": [1, 2], "facet_horizon": 3.0},
}


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(SMALL))
    return path


def test_precedence_defaults_file_flags_env():
    cfg = build_config({"n": 61, "seed": 4, "out": "a"}, {"n": 81}, env={})
    assert cfg.n == 81 and cfg.raw["seed"] == 4 and str(cfg.out) == "a"
    cfg = build_config({"out": "a"}, {"out": "b"}, env={"CONVEXFLOW_OUT": "c"})
    assert str(cfg.out) == "c"
    assert build_config({}, {}, env={}).raw["safety"] == 0.9


def test_recorded_config_ignores_output_dir():
    a = build_config(SMALL, {"out": "x"}, env={})
    b = build_config(SMALL, {"out": "y"}, env={})
    assert a.recorded() == b.recorded()


@pytest.mark.parametrize(
    "file_cfg,match",
    [
        ({"safety": 1.5}, "CFL"),
        ({"dt": 1.0}, "CFL"),
        ({"problem": "nope"}, "double_well_1d"),
        ({"bogus": 1}, "unknown config keys"),
        ({"lower": -1.01, "upper": 1.01, "n": 41}, "B_R0"),
        ({"T": 1.0, "mc": {"t": 2.0}}, "exceeds"),
        ({"snapshot_times": [0.0, 0.5, 0.2]}, "increasing"),
        ({"flow": {"x0": [[5.0]]}}, "not inside"),
        ({"problem": {"coefficients": [0.0, 1.0]}}, "even degree"),
    ],
)
def test_config_validation_errors(file_cfg, match):
    with pytest.raises(ConfigError, match=match):
        build_config(file_cfg, {}, env={})


def test_custom_polynomial_problem_accepted():
    cfg = build_config({"problem": {"coefficients": [1.0, 0.0, -2.0, 0.0, 1.0], "name": "dw"}, "n": 41}, {}, env={})
    assert cfg.problem.name == "dw" and cfg.problem.hessian_bound_M == pytest.approx(44.0)


def test_bad_flags_exit_2(tmp_path, capsys):
    assert main(["solve", "--safety", "1.5", "--out", str(tmp_path)]) == 2
    assert "CFL" in capsys.readouterr().err
    assert main(["solve", "--problem", "triple_well", "--out", str(tmp_path)]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["solve", "--config", str(bad)]) == 2


def test_all_runs_and_writes_manifest(tmp_path, small_config, monkeypatch):
    monkeypatch.delenv("CONVEXFLOW_OUT", raising=False)
    out = tmp_path / "run"
    assert main(["all", "--config", str(small_config), "--out", str(out)]) == 0
    m = read_json(out / "manifest.json")
    assert m["exit_code"] == 0 and m["failures"] == []
    for rel in ("envelope.csv", "audit.json", "rates/rates.json", "rates/errors.gp", "flow/summary.json",
                "mc/report.json", "snapshots/snapshots.json", "config.json"):
        assert rel in m["artifacts"]
    assert read_json(out / "config.json")["n"] == 41


def test_determinism_and_env_override(tmp_path, small_config, monkeypatch):
    a, b = tmp_path / "a", tmp_path / "b"
    monkeypatch.setenv("CONVEXFLOW_OUT", str(a))
    assert main(["all", "--config", str(small_config), "--out", str(tmp_path / "ignored")]) == 0
    assert not (tmp_path / "ignored").exists()
    monkeypatch.setenv("CONVEXFLOW_OUT", str(b))
    assert main(["all", "--config", str(small_config)]) == 0
    ma, mb = read_json(a / "manifest.json"), read_json(b / "manifest.json")
    assert ma["artifacts"] == mb["artifacts"]
    assert ma["config_hash"] == mb["config_hash"]


def test_seed_changes_mc_report(tmp_path, small_config, monkeypatch):
    monkeypatch.delenv("CONVEXFLOW_OUT", raising=False)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["mc-validate", "--config", str(small_config), "--out", str(a), "--seed", "1"]) == 0
    assert main(["mc-validate", "--config", str(small_config), "--out", str(b), "--seed", "2"]) == 0
    ma, mb = read_json(a / "manifest.json"), read_json(b / "manifest.json")
    assert ma["artifacts"]["mc/report.json"] != mb["artifacts"]["mc/report.json"]


def test_invariant_failure_exit_1(tmp_path, monkeypatch):
    # too few snapshots above the rate floor: the fit refuses and the run reports an invariant failure
    monkeypatch.delenv("CONVEXFLOW_OUT", raising=False)
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"n": 41, "T": 1.0, "snapshot_times": [0.0, 0.5, 1.0]}))
    assert main(["rates", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
    m = read_json(tmp_path / "o" / "manifest.json")
    assert m["exit_code"] == 1 and any("converged-too-fast" in f for f in m["failures"])


def test_numerical_abort_exit_3(tmp_path, monkeypatch):
    import convexflow.cli as cli
    from convexflow.solver import NumericalAbort

    def boom(*args, **kwargs):
        raise NumericalAbort("non-finite values at step 7")

    monkeypatch.delenv("CONVEXFLOW_OUT", raising=False)
    monkeypatch.setattr(cli, "solve", boom)
    assert main(["solve", "--n", "41", "--out", str(tmp_path)]) == 3
    assert read_json(tmp_path / "manifest.json")["exit_code"] == 3


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "convexflow", "envelope", "--n", "41", "--out", str(tmp_path)],
                          capture_output=True, text=True, env={"PATH": "/usr/bin:/bin"})
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "envelope.json").exists()
