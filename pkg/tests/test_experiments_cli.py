import json
import math
import subprocess
import sys

import numpy as np
import pytest

from squeezelab.analysis import PipelineAbort
from squeezelab.cli import EXIT_CONFIG, EXIT_FIT, EXIT_OK, EXIT_ORACLE, main, run
from squeezelab.config import SEED_ENV, ConfigError, RunConfig, load_config, parse_text
from squeezelab.experiments import hold_grid, oracle_grid, r_sweep, time_sweep
from squeezelab.measurement import NoiseSpec
from squeezelab.phasespace import PhysicalParams
from squeezelab.protocol import analytic_variance

P = PhysicalParams()
W0 = P.omega0
# Twenty holds over a bit more than one period of V(hold).
SMALL = ["hold_stop=4e-6", "hold_step=2e-7"]


# --- config -----------------------------------------------------------------


def test_parse_text():
    text = "# comment\nr = 0.4  # inline\n\nn_trials=100\n"
    assert parse_text(text) == {"r": "0.4", "n_trials": "100"}
    with pytest.raises(ConfigError):
        parse_text("just words")
    with pytest.raises(ConfigError):
        parse_text("= 3")


def test_load_config_precedence(tmp_path):
    f = tmp_path / "run.cfg"
    f.write_text("master_seed = 3\nr = 0.4\nn_trials = 100\nnoise.lattice_jitter_variance = 0.1\n")
    cfg = load_config("time-sweep", f, ["n_trials=200"], environ={})
    assert (cfg.master_seed, cfg.r, cfg.n_trials) == (3, 0.4, 200)
    assert cfg.noise.lattice_jitter_variance == 0.1
    cfg = load_config("time-sweep", f, ["master_seed=4"], environ={SEED_ENV: "9"})
    assert cfg.master_seed == 9


def test_load_config_types_and_nested():
    cfg = load_config("r-sweep", None, ["master_seed=1", "r_values=0,0.5,1.0", "heating=true",
                                        "params.t_tof=40e-6", "budget.timing_jitter=5e-9"], environ={})
    assert cfg.r_values == (0.0, 0.5, 1.0)
    assert cfg.heating is True
    assert cfg.params.t_tof == 40e-6
    assert cfg.budget.params.t_tof == 40e-6
    assert cfg.budget.timing_jitter == 5e-9


@pytest.mark.parametrize("overrides", [
    [],
    ["master_seed=1", "bogus=3"],
    ["master_seed=1", "noise.bogus=3"],
    ["master_seed=1", "n_trials=many"],
    ["master_seed=1", "heating=maybe"],
    ["master_seed=-1"],
    ["master_seed=1", "params.mass=0"],
    ["master_seed=1", "hold_stop=0"],
    ["noequals"],
])
def test_load_config_errors(overrides):
    with pytest.raises(ConfigError):
        load_config("time-sweep", None, overrides, environ={})


def test_unknown_experiment_and_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config("warp-drive", None, ["master_seed=1"], environ={})
    with pytest.raises(ConfigError):
        load_config("time-sweep", tmp_path / "absent.cfg", ["master_seed=1"], environ={})


def test_config_hash_ignores_workers_and_output():
    a = RunConfig("time-sweep", 1)
    b = RunConfig("time-sweep", 1, output_dir="elsewhere", workers=4)
    c = RunConfig("time-sweep", 2)
    assert a.config_hash() == b.config_hash() != c.config_hash()
    assert "noise.lattice_jitter_variance" in a.echo()
    assert list(a.echo()) == sorted(a.echo())


# --- experiments ------------------------------------------------------------


def test_hold_grid():
    g = hold_grid(0.0, 8e-6, 1e-7)
    assert g.size == 80
    assert g[-1] == pytest.approx(7.9e-6)
    with pytest.raises(ValueError):
        hold_grid(0.0, 1e-6, 0.0)
    with pytest.raises(ValueError):
        hold_grid(1e-6, 1e-6, 1e-7)


def test_time_sweep_recovers_model():
    holds = hold_grid(0, 4e-6, 1e-7)
    sweep = time_sweep(P, 0.4, holds, n_trials=1000, master_seed=2, include_cross_term=True)
    a = analytic_variance(0.4, 0.0, P, 2.96)
    assert sweep.fit["V1"] == pytest.approx(a.v1_tilde, abs=4 * sweep.fit.error("V1"))
    assert sweep.fit["V2"] == pytest.approx(a.v2_tilde, abs=4 * sweep.fit.error("V2"))
    assert sweep.n_dropped == 0
    assert all(p.ok for p in sweep.points)


def test_time_sweep_reports_unfittable_grid():
    sweep = time_sweep(P, 0.4, hold_grid(0, 5e-7, 1e-7), n_trials=200, master_seed=0)
    assert sweep.fit is None
    assert "half an oscillation" in sweep.error


def test_time_sweep_aborts_when_points_fail():
    with pytest.raises(PipelineAbort):
        # Eight samples per point cannot be histogrammed.
        time_sweep(P, 0.4, hold_grid(0, 4e-6, 2e-7), n_trials=8)


def test_r_sweep_needs_three_values():
    with pytest.raises(ValueError):
        r_sweep(P, [0.85, 0.85, 0.4], hold_grid(0, 4e-6, 2e-7), n_trials=50)


def test_oracle_grid_small():
    pts = oracle_grid(P, [0.0, 0.85], [0.0, 1e-6], n_trials=20000, master_seed=1)
    assert len(pts) == 4
    for p in pts:
        assert p.model == pytest.approx(p.analytic, rel=1e-9)
        assert p.deviation < 5 * math.sqrt(2 / 20000)


def test_oracle_heating_excess_positive():
    pts = oracle_grid(P, [0.85], [0.0], n_trials=20000, master_seed=1, heating=True)
    assert pts[0].model > pts[0].analytic


# --- command line -----------------------------------------------------------


def _run(tmp_path, experiment, *extra, name="out"):
    out = tmp_path / name
    code = main([experiment, "--output-dir", str(out), "--set", "master_seed=5", *extra])
    return code, out


def test_time_sweep_cli_outputs(tmp_path, capsys):
    args = [a for s in SMALL for a in ("--set", s)]
    code, out = _run(tmp_path, "time-sweep", *args)
    assert code == EXIT_OK
    lines = (out / "fig2.csv").read_text().splitlines()
    assert lines[0] == "hold_s,v_tilde,err,v_tilde_model,fit_ok"
    assert len(lines) == 21
    fit = json.loads((out / "time-sweep-fit.json").read_text())
    assert set(fit["fits"]["variance_evolution"]["parameters"]) == {"V1", "V2", "C"}
    report = json.loads((out / "report.json").read_text())
    assert report["provenance"]["master_seed"] == 5
    assert "timestamp" in report["provenance"]
    assert "timestamp" not in (out / "time-sweep-fit.json").read_text()
    printed = capsys.readouterr().out
    assert "squeezing_db" in printed and "config_hash" in printed


def test_byte_identical_across_runs_and_workers(tmp_path):
    args = [a for s in SMALL for a in ("--set", s)]
    _, a = _run(tmp_path, "time-sweep", *args, name="a")
    _, b = _run(tmp_path, "time-sweep", *args, name="b")
    _, c = _run(tmp_path, "time-sweep", *args, "--set", "workers=2", name="c")
    for f in ("fig2.csv", "time-sweep-fit.json"):
        assert (a / f).read_bytes() == (b / f).read_bytes() == (c / f).read_bytes()


def test_seed_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(SEED_ENV, "11")
    out = tmp_path / "env"
    assert main(["noise-budget", "--output-dir", str(out)]) == EXIT_OK
    assert json.loads((out / "report.json").read_text())["provenance"]["master_seed"] == 11


def test_missing_seed_is_config_error(tmp_path, monkeypatch, capsys):
    monkeypatch.delenv(SEED_ENV, raising=False)
    assert main(["noise-budget", "--output-dir", str(tmp_path)]) == EXIT_CONFIG
    assert "master_seed" in capsys.readouterr().err


def test_single_r_sweep_is_config_error(tmp_path):
    code, _ = _run(tmp_path, "r-sweep", "--set", "r_values=0.85")
    assert code == EXIT_CONFIG


def test_fit_failure_exit_code(tmp_path):
    code, out = _run(tmp_path, "time-sweep", "--set", "hold_stop=5e-7")
    assert code == EXIT_FIT
    assert json.loads((out / "report.json").read_text())["exit_code"] == EXIT_FIT


def test_oracle_exit_code_and_low_n(tmp_path):
    code, out = _run(tmp_path, "oracle-check", "--set", "oracle_n_trials=2000", "--set", "oracle_threshold=0.001")
    assert code == EXIT_ORACLE
    summary = json.loads((out / "report.json").read_text())["summary"]
    assert summary["low_n"] is True
    assert summary["threshold"] == pytest.approx(0.001 * math.sqrt(50))
    code, out = _run(tmp_path, "oracle-check", "--set", "oracle_n_trials=2000", name="ok")
    assert code == EXIT_OK
    rows = (out / "oracle.csv").read_text().splitlines()
    assert len(rows) == 1 + 5 * 8


def test_r_sweep_cli(tmp_path):
    args = [a for s in SMALL for a in ("--set", s)]
    code, out = _run(tmp_path, "r-sweep", *args)
    assert code == EXIT_OK
    fig3 = (out / "fig3.csv").read_text().splitlines()
    assert fig3[0] == "r,v1_tilde,v1_err,v2_tilde,v2_err,v1_model,v2_model"
    assert len(fig3) == 6
    assert len((out / "figS-varVp.csv").read_text().splitlines()) == 1 + 5 * 20
    summary = json.loads((out / "report.json").read_text())["summary"]
    assert summary["vn"] == pytest.approx(0.21, abs=5 * summary["vn_err"])


def test_calibration_cli(tmp_path):
    code, out = _run(tmp_path, "calib-tof")
    assert code == EXIT_OK
    assert (out / "figS-tof.csv").read_text().startswith("n_z,")
    code, out = _run(tmp_path, "calib-lattice", name="lat")
    assert code == EXIT_OK
    summary = json.loads((out / "report.json").read_text())["summary"]
    assert summary["agree_within_2_percent"] is True
    assert (out / "fig4c.csv").exists() and (out / "fig4d.csv").exists()


def test_calibration_from_points_csv(tmp_path):
    pts = tmp_path / "lattice.csv"
    pts.write_text("dOmega_hz,value_volts\n0,0\n200000,0.0343\n400000,0.0687\n")
    code, out = _run(tmp_path, "calib-lattice", "--set", f"points_csv={pts}")
    assert code == EXIT_OK
    fit = json.loads((out / "calib-lattice-fit.json").read_text())["fits"]["lattice_shift"]
    assert fit["volts_per_meter"] == pytest.approx(1e9, rel=0.01)
    assert fit["n_excluded"] == 1
    bad = tmp_path / "bad.csv"
    bad.write_text("x,y\n1,2\n")
    assert _run(tmp_path, "calib-lattice", "--set", f"points_csv={bad}", name="bad")[0] == EXIT_CONFIG


def test_noise_budget_cli(tmp_path):
    code, out = _run(tmp_path, "noise-budget", "--defaults", "paper")
    assert code == EXIT_OK
    rows = (out / "budget.csv").read_text().splitlines()
    assert rows[0] == "label,value,kind"
    assert rows[-1].startswith("total,")
    summary = json.loads((out / "report.json").read_text())["summary"]
    assert summary["consistent_with_fitted_vn"] is False
    code, out = _run(tmp_path, "noise-budget", "--set", "budget.tilt_stability=0", name="flat")
    assert json.loads((out / "report.json").read_text())["summary"]["consistent_with_fitted_vn"] is True


def test_run_dispatch():
    rep = run(RunConfig("noise-budget", 0))
    assert rep.exit_code == EXIT_OK
    assert "budget.csv" in rep.tables


def test_console_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "squeezelab.cli", "noise-budget", "--set", "master_seed=0",
                          "--output-dir", str(tmp_path)], capture_output=True, text=True)
    assert res.returncode == 0
    assert "total:" in res.stdout
    assert np.isfinite(float(res.stdout.split("total:")[1].split()[0]))


def test_noise_spec_passthrough():
    cfg = load_config("time-sweep", None, ["master_seed=0", "noise.detector_noise_density=1e-3"], environ={})
    assert cfg.noise == NoiseSpec(detector_noise_density=1e-3, lattice_jitter_variance=0.21)
