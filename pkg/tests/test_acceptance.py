"""Acceptance criteria: one PASS/FAIL line per check, printed even under capture."""

import math

import numpy as np
import pytest

from squeezelab.analysis import fit_velocity_distribution, squeezing_db, velocity_histogram
from squeezelab.cli import EXIT_OK, main, run
from squeezelab.config import load_config
from squeezelab.noise_budget import budget
from squeezelab.phasespace import (
    PhysicalParams,
    add_heating,
    displace,
    evolve_harmonic,
    free_flight,
    ground_state,
    harmonic_map,
    thermal_state,
)
from squeezelab.protocol import velocity_fraction

pytestmark = pytest.mark.acceptance

P = PhysicalParams()
W0 = P.omega0
RED = "not attainable with the stated inputs; see README, known failures"


@pytest.fixture
def report(capsys):
    def _report(criterion, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}")
        assert ok, detail

    return _report


def _info(capsys, text):
    with capsys.disabled():
        print(f"\nINFO {text}")


def _cfg(experiment, seed, *overrides):
    return load_config(experiment, None, [f"master_seed={seed}", *overrides], environ={})


def test_c1_oracle_equivalence(report):
    rep = run(_cfg("oracle-check", 0, "heating=false"))
    s = rep.summary
    ok = rep.exit_code == EXIT_OK and s["n_points"] == 40 and s["max_rel_deviation"] < 0.02
    report(1, ok, f"max relative deviation {s['max_rel_deviation']:.4f} < 0.02 over {s['n_points']} points, "
                  f"{s['n_trials']} trials each")


def test_c2_squeeze_operator(report):
    rng = np.random.default_rng(2)
    worst = 0.0
    for r in rng.uniform(0, 1.2, 20):
        w1 = W0 * math.exp(-2 * r)
        cov = evolve_harmonic(ground_state(P), w1, math.pi / (2 * w1)).cov
        target = np.diag([math.exp(4 * r), math.exp(-4 * r)])
        rel = np.abs(np.diag(cov) / np.diag(target) - 1).max()
        off = abs(cov[0, 1]) / math.sqrt(target[0, 0] * target[1, 1])
        worst = max(worst, rel, off)
    report(2, worst < 1e-10, f"max relative error {worst:.2e} < 1e-10 over 20 random r in [0, 1.2]")


def test_c3_time_sweep_reproduction(report, capsys):
    # Seed fixed before the result was seen; replication statistics are in the ledger.
    rep = run(_cfg("time-sweep", 0))
    fit = rep.fits["variance_evolution"]
    v1, e1 = fit["parameters"]["V1"], fit["errors"]["V1"]
    db = squeezing_db(v1)
    ok = len(rep.tables["fig2.csv"].rows) == 80 and 0.28 <= v1 <= 0.36 and abs(db + 4.9) <= 0.4
    _info(capsys, f"criterion 3 expected V1 {rep.summary['v1_expected']:.4f}; "
                  f"100-seed replication: mean 0.3255, sd 0.018, 98% in window")
    report(3, ok, f"V1 = {v1:.4f} +/- {e1:.4f} in [0.28, 0.36]; {db:.2f} dB within -4.9 +/- 0.4")


@pytest.mark.slow
def test_c4_r_sweep_recovery(report, capsys):
    vn, vn_err, vi, vi_err = [], [], [], []
    for seed in range(100):
        s = run(_cfg("r-sweep", seed)).summary
        vn.append(s["vn"])
        vn_err.append(s["vn_err"])
        vi.append(s["v_ini"])
        vi_err.append(s["v_ini_err"])
    vn, vn_err, vi, vi_err = map(np.array, (vn, vn_err, vi, vi_err))
    cov_n = np.mean(np.abs(vn - 0.21) <= 2 * vn_err)
    cov_i = np.mean(np.abs(vi - 2.96) <= 2 * vi_err)
    within = np.mean((np.abs(vn - 0.21) <= 0.03) & (np.abs(vi - 2.96) <= 0.3))
    _info(capsys, f"criterion 4 per-replication recovery within tolerance: {within:.0%}")
    ok = abs(vn.mean() - 0.21) <= 0.03 and abs(vi.mean() - 2.96) <= 0.3 and cov_n >= 0.9 and cov_i >= 0.9
    report(4, ok, f"Vn {vn.mean():.4f} (sd {vn.std():.4f}), coverage {cov_n:.0%}; "
                  f"Vini {vi.mean():.3f} (sd {vi.std():.3f}), coverage {cov_i:.0%}; 100 replications")


def test_c5_velocity_fraction(report):
    f = velocity_fraction(0.85, 80.75)
    report(5, abs(f - 0.87) <= 0.01, f"velocity fraction {f:.4f} = 0.87 +/- 0.01")


def test_c6_calibration_agreement(report):
    ratios = []
    for seed in range(100):
        ratios.append(run(_cfg("calib-lattice", seed)).summary["k_ratio_lattice_over_tof"])
    worst = float(np.max(np.abs(np.array(ratios) - 1)))
    report(6, worst < 0.02, f"max |k_lattice/k_tof - 1| = {worst:.4f} < 0.02 over 100 replications")


def test_c7_timing_jitter(report):
    g = budget()["g"].value
    report("7g", abs(g / 2.5e-2 - 1) <= 0.1, f"item (g) = {g:.5f} within 10% of 2.5e-2")


def test_c7_table_tilt_formula(report):
    d = budget()["d"]
    v = 9.80665 * P.t_tof * 0.1 / 2 * math.pi / 180
    ok = d.intermediate["velocity_m_per_s"] == v and d.value == v**2 / P.v0
    report("7d", ok, f"item (d) = {d.value:.5f} equals the stated formula (v = {v:.4e} m/s)")


def test_c7_lattice_phase_noise_intermediate(report):
    dz = budget()["b"].intermediate["dz_m_per_rtHz"]
    report("7b", abs(dz / 8.6e-17 - 1) <= 0.02, f"item (b) dz = {dz:.4e} m/rtHz within 2% of 8.6e-17")


@pytest.mark.xfail(strict=True, reason=RED)
def test_c7_drift_velocity_intermediate(report):
    v = budget()["c"].intermediate["velocity_m_per_s"]
    report("7c", abs(v / 3e-14 - 1) <= 0.02, f"item (c) v = {v:.4e} m/s within 2% of 3e-14")


@pytest.mark.xfail(strict=True, reason=RED)
def test_c7_total(report):
    total = budget().total
    report("7total", total < 0.19, f"budget total {total:.4f} < 0.19")


def test_c8_properties(report):
    rng = np.random.default_rng(8)
    # det M = 1 for trap and flight maps.
    det_m = 0.0
    for _ in range(1000):
        w, dt = rng.uniform(2 * math.pi * 5e3, 2 * math.pi * 600e3), rng.uniform(0, 1e-4)
        for m in (harmonic_map(w, dt, W0), np.array([[1.0, W0 * dt], [0.0, 1.0]])):
            det_m = max(det_m, abs(m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0] - 1))
    # det(cov) under the protocol sequence: a squeeze at omega1 (r <= 1.2), then a hold at omega0.
    det_c = 0.0
    for _ in range(2000):
        s = thermal_state(P, rng.uniform(0, 5))
        d0 = s.det
        s = evolve_harmonic(s, W0 * math.exp(-2 * rng.uniform(0, 1.2)), rng.uniform(0, 2e-5))
        s = evolve_harmonic(s, W0, rng.uniform(0, 2e-5))
        det_c = max(det_c, abs(s.det / d0 - 1))
    # Heisenberg bound after random compositions including heating and flight.
    heis = math.inf
    for _ in range(500):
        s = ground_state(P)
        for _ in range(6):
            k = rng.integers(4)
            dt = rng.uniform(0, 2e-5)
            if k == 0:
                s = evolve_harmonic(s, rng.uniform(2 * math.pi * 5e3, 2 * math.pi * 600e3), dt, heating=True)
            elif k == 1:
                s = free_flight(s, dt)
            elif k == 2:
                s = add_heating(s, dt)
            else:
                s = displace(s, dz=dt)
        heis = min(heis, s.det)
    # Bin-width rule and scale equivariance.
    exact, equiv = True, 0.0
    for n in (30, 300, 3000):
        v = rng.normal(0, 1, n)
        exact &= velocity_histogram(v).bin_width == 1.75 * np.std(v, ddof=1) / n ** (1 / 3)
        a = fit_velocity_distribution(velocity_histogram(v))["dv"]
        b = fit_velocity_distribution(velocity_histogram(1e-6 * v))["dv"]
        equiv = max(equiv, abs(b / (1e-6 * a) - 1))
    ok = det_m < 1e-12 and det_c < 1e-12 and heis >= 1 - 1e-9 and exact and equiv < 1e-3
    report(8, ok, f"det M err {det_m:.1e}, det cov err {det_c:.1e} (< 1e-12); min det {heis:.4f} >= 1; "
                  f"bin width exact {exact}; scale equivariance {equiv:.1e}")


def test_c8_byte_determinism(report, tmp_path):
    outs = []
    for workers in (1, 2):
        out = tmp_path / f"w{workers}"
        code = main(["time-sweep", "--output-dir", str(out), "--set", "master_seed=0",
                     "--set", f"workers={workers}"])
        assert code == EXIT_OK
        outs.append(((out / "fig2.csv").read_bytes(), (out / "time-sweep-fit.json").read_bytes()))
    report("8det", outs[0] == outs[1], "time-sweep CSV and fit JSON byte-identical for 1 and 2 workers")
