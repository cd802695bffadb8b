"""
Batch runner: one experiment per invocation, CSV tables for plotting plus a
JSON report.

    squeezelab time-sweep run.cfg --set n_trials=1000
    SQUEEZELAB_SEED=7 squeezelab oracle-check
    squeezelab noise-budget --defaults paper --set master_seed=0

Exit status: 0 success, 2 fit failure, 3 oracle deviation, 4 config error.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import io
import json
import math
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__
from .analysis import FitError, PipelineAbort, squeezing_db
from .calibration import (
    LatticeGeometry,
    lattice_calibration,
    simulate_lattice_calibration,
    simulate_lattice_tau_scan,
    simulate_tof_calibration,
    tof_calibration,
)
from .config import EXPERIMENTS, ConfigError, RunConfig, load_config
from .experiments import hold_grid, oracle_grid, r_sweep, time_sweep
from .noise_budget import NoiseInputs, budget
from .protocol import analytic_variance

__all__ = [
    "RunReport",
    "run_time_sweep",
    "run_r_sweep",
    "run_oracle_check",
    "run_calib_tof",
    "run_calib_lattice",
    "run_noise_budget",
    "run",
    "main",
]

EXIT_OK, EXIT_FIT, EXIT_ORACLE, EXIT_CONFIG = 0, 2, 3, 4
# Trial count at which the oracle threshold applies unscaled.
ORACLE_REFERENCE_TRIALS = 100_000


@dataclass
class Table:
    columns: list[str]
    rows: list[list[Any]] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for row in self.rows:
            w.writerow([_cell(x) for x in row])
        return buf.getvalue()


def _cell(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


@dataclass
class RunReport:
    config: RunConfig
    tables: dict[str, Table] = field(default_factory=dict)
    fits: dict[str, Any] = field(default_factory=dict)
    summary: dict[str, Any] = field(default_factory=dict)
    exit_code: int = EXIT_OK
    message: str = ""

    def provenance(self, timestamp: str | None = None) -> dict:
        return {
            "version": __version__,
            "master_seed": self.config.master_seed,
            "config_hash": self.config.config_hash(),
            "timestamp": timestamp or _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        }

    def fits_json(self) -> str:
        body = {"experiment": self.config.experiment, "config_hash": self.config.config_hash(),
                "master_seed": self.config.master_seed, "fits": self.fits, "summary": self.summary}
        return json.dumps(_jsonable(body), indent=2, sort_keys=True) + "\n"

    def report_json(self, timestamp: str | None = None) -> str:
        body = {
            "experiment": self.config.experiment,
            "exit_code": self.exit_code,
            "message": self.message,
            "config": self.config.echo(),
            "provenance": self.provenance(timestamp),
            "tables": sorted(self.tables),
            "fits": self.fits,
            "summary": self.summary,
        }
        return json.dumps(_jsonable(body), indent=2, sort_keys=True) + "\n"

    def write(self, output_dir: str | Path | None = None) -> Path:
        out = Path(output_dir or self.config.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, table in self.tables.items():
            (out / name).write_text(table.to_csv())
        (out / f"{self.config.experiment}-fit.json").write_text(self.fits_json())
        (out / "report.json").write_text(self.report_json())
        return out


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else None
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


# ---------------------------------------------------------------------------
# Experiments


def _holds(cfg: RunConfig) -> np.ndarray:
    base = cfg.n_half_periods * math.pi / cfg.params.omega0
    return base + hold_grid(cfg.hold_start, cfg.hold_stop, cfg.hold_step)


def _sweep_kwargs(cfg: RunConfig) -> dict:
    return dict(n_trials=cfg.n_trials, master_seed=cfg.master_seed, noise=cfg.noise,
                n_initial=cfg.n_initial, heating=cfg.heating,
                include_cross_term=cfg.fit_cross_term, workers=cfg.workers, reweight=cfg.reweight)


def _points_table(sweeps, with_r: bool) -> Table:
    cols = (["r"] if with_r else []) + ["hold_s", "v_tilde", "err", "v_tilde_model", "fit_ok"]
    t = Table(cols)
    for s in sweeps:
        for p in s.points:
            t.rows.append(([p.r] if with_r else []) + [p.hold, p.v_tilde, p.std_error, p.analytic, p.ok])
    return t


def run_time_sweep(cfg: RunConfig) -> RunReport:
    rep = RunReport(cfg)
    try:
        sweep = time_sweep(cfg.params, cfg.r, _holds(cfg), **_sweep_kwargs(cfg))
    except PipelineAbort as exc:
        rep.exit_code, rep.message = EXIT_FIT, str(exc)
        return rep
    rep.tables["fig2.csv"] = _points_table([sweep], with_r=False)
    a = analytic_variance(cfg.r, 0.0, cfg.params, 2 * cfg.n_initial + 1)
    vn = cfg.noise.lattice_jitter_variance
    rep.summary = {"r": cfg.r, "n_points": len(sweep.points), "n_dropped": sweep.n_dropped,
                   "v1_expected": a.v1_tilde + vn, "v2_expected": a.v2_tilde + vn}
    if sweep.fit is None:
        rep.exit_code, rep.message = EXIT_FIT, sweep.error
        return rep
    rep.fits["variance_evolution"] = sweep.fit.to_dict(sweep.n_dropped)
    v1 = sweep.fit["V1"]
    rep.summary["squeezing_db"] = squeezing_db(v1) if v1 > 0 else None
    return rep


def run_r_sweep(cfg: RunConfig) -> RunReport:
    rep = RunReport(cfg)
    if len(set(cfg.r_values)) < 3:
        raise ConfigError("r-sweep needs at least three distinct r_values")
    try:
        res = r_sweep(cfg.params, cfg.r_values, _holds(cfg), position_term=cfg.fit_position_term,
                      **_sweep_kwargs(cfg))
    except PipelineAbort as exc:
        rep.exit_code, rep.message = EXIT_FIT, str(exc)
        return rep
    rep.tables["figS-varVp.csv"] = _points_table(res.sweeps, with_r=True)
    vn = cfg.noise.lattice_jitter_variance
    fig3 = Table(["r", "v1_tilde", "v1_err", "v2_tilde", "v2_err", "v1_model", "v2_model"])
    for s in res.sweeps:
        a = analytic_variance(s.r, 0.0, cfg.params, 2 * cfg.n_initial + 1)
        if s.fit is None:
            fig3.rows.append([s.r, math.nan, math.nan, math.nan, math.nan, a.v1_tilde + vn, a.v2_tilde + vn])
        else:
            fig3.rows.append([s.r, s.fit["V1"], s.fit.error("V1"), s.fit["V2"], s.fit.error("V2"),
                              a.v1_tilde + vn, a.v2_tilde + vn])
    rep.tables["fig3.csv"] = fig3
    rep.fits["time_sweeps"] = {repr(s.r): (s.fit.to_dict(s.n_dropped) if s.fit else None) for s in res.sweeps}
    if res.minima is None:
        rep.exit_code, rep.message = EXIT_FIT, res.error
        return rep
    rep.fits["minima"] = res.minima.to_dict()
    rep.fits["maxima"] = res.maxima.to_dict()
    rep.summary = {"vn": res.minima["Vn"], "vn_err": res.minima.error("Vn"),
                   "v_ini": res.minima["Vini"], "v_ini_err": res.minima.error("Vini"),
                   "v_ini_maxima": res.maxima["Vini"], "v_ini_maxima_err": res.maxima.error("Vini")}
    return rep


def run_oracle_check(cfg: RunConfig) -> RunReport:
    rep = RunReport(cfg)
    period = 2 * math.pi / cfg.params.omega0
    holds = cfg.oracle_hold_offset_periods * period + period * np.arange(cfg.oracle_n_holds) / cfg.oracle_n_holds
    pts = oracle_grid(cfg.params, cfg.r_values, holds, n_trials=cfg.oracle_n_trials,
                      master_seed=cfg.master_seed, n_initial=cfg.n_initial, heating=cfg.heating)
    t = Table(["r", "hold_s", "v_tilde_mc", "v_tilde_analytic", "v_tilde_model", "rel_deviation",
               "heating_excess"])
    for p in pts:
        t.rows.append([p.r, p.hold, p.monte_carlo, p.analytic, p.model, p.deviation, p.monte_carlo - p.analytic])
    rep.tables["oracle.csv"] = t
    low_n = cfg.oracle_n_trials < ORACLE_REFERENCE_TRIALS
    threshold = cfg.oracle_threshold * max(1.0, math.sqrt(ORACLE_REFERENCE_TRIALS / cfg.oracle_n_trials))
    worst = max(p.deviation for p in pts)
    rep.summary = {"max_rel_deviation": worst, "threshold": threshold, "low_n": low_n,
                   "n_points": len(pts), "n_trials": cfg.oracle_n_trials, "heating": cfg.heating}
    if worst > threshold:
        rep.exit_code = EXIT_ORACLE
        rep.message = f"max relative deviation {worst:.4f} exceeds {threshold:.4f}"
    return rep


def _read_points(path: str, key_column: str) -> list[tuple[float, float]]:
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            return [(float(row[key_column]), float(row["value_volts"])) for row in reader]
    except (OSError, KeyError, ValueError) as exc:
        raise ConfigError(f"cannot read calibration points from {path}: {exc}") from None


def _calibration_text(factor) -> str:
    d = factor.to_dict()
    return "".join(f"{k}: {_cell(v)}\n" for k, v in d.items())


def _tof(cfg: RunConfig):
    if cfg.points_csv and cfg.experiment == "calib-tof":
        pts = _read_points(cfg.points_csv, "n_z")
        factor = tof_calibration([v for _, v in pts], [n for n, _ in pts], cfg.params,
                                 systematic=cfg.temperature_systematic)
        rows = [{"n_z": n, "width_volts": v} for n, v in pts]
        return factor, rows
    return simulate_tof_calibration(
        cfg.params, cfg.k_true, cfg.temperatures, n_trials=cfg.calib_n_trials,
        master_seed=cfg.master_seed, area_noise=cfg.area_noise,
        low_n_broadening=cfg.low_n_broadening, systematic=cfg.temperature_systematic)


def _rows_table(rows: list[dict]) -> Table:
    cols = list(rows[0]) if rows else []
    return Table(cols, [[r[c] for c in cols] for r in rows])


def run_calib_tof(cfg: RunConfig) -> RunReport:
    rep = RunReport(cfg)
    try:
        factor, rows = _tof(cfg)
    except FitError as exc:
        rep.exit_code, rep.message = EXIT_FIT, str(exc)
        return rep
    rep.tables["figS-tof.csv"] = _rows_table(rows)
    rep.fits["tof_thermometry"] = factor.to_dict()
    rep.summary = {"calibration_report": _calibration_text(factor)}
    return rep


def run_calib_lattice(cfg: RunConfig) -> RunReport:
    rep = RunReport(cfg)
    geom = LatticeGeometry(cfg.lattice_distance, cfg.wavelength)
    try:
        if cfg.points_csv:
            pts = _read_points(cfg.points_csv, "dOmega_hz")
            factor = lattice_calibration([(2 * math.pi * f, v) for f, v in pts], geom)
            rows = [{"delta_f_hz": f, "amplitude_volts": v} for f, v in pts]
        else:
            factor, rows = simulate_lattice_calibration(
                cfg.params, cfg.k_true, geom, cfg.shifts_hz, n_traces=cfg.n_traces,
                n_initial=cfg.n_initial, readout_noise_volts=cfg.readout_noise_volts,
                intensity_droop=cfg.intensity_droop, master_seed=cfg.master_seed)
            tau_fit, tau_rows = simulate_lattice_tau_scan(
                cfg.params, geom, cfg.tau_scan_shift_hz, n_traces=cfg.n_traces,
                n_initial=cfg.n_initial, master_seed=cfg.master_seed)
            rep.tables["fig4c.csv"] = _rows_table(tau_rows)
            rep.fits["tau_scan"] = tau_fit.to_dict()
    except FitError as exc:
        rep.exit_code, rep.message = EXIT_FIT, str(exc)
        return rep
    rep.tables["fig4d.csv"] = _rows_table(rows)
    rep.fits["lattice_shift"] = factor.to_dict()
    rep.summary = {"calibration_report": _calibration_text(factor)}
    if cfg.cross_check and not cfg.points_csv:
        try:
            tof, _ = _tof(cfg)
        except FitError as exc:
            rep.exit_code, rep.message = EXIT_FIT, f"cross-check failed: {exc}"
            return rep
        rep.fits["tof_thermometry"] = tof.to_dict()
        ratio = factor.volts_per_meter / tof.volts_per_meter
        rep.summary.update({"k_ratio_lattice_over_tof": ratio, "agree_within_2_percent": abs(ratio - 1) < 0.02})
    return rep


def run_noise_budget(cfg: RunConfig, paper_defaults: bool = False) -> RunReport:
    rep = RunReport(cfg)
    inputs = NoiseInputs(params=cfg.params) if paper_defaults else cfg.budget
    rpt = budget(inputs)
    t = Table(["label", "value", "kind"], [[e.label, e.value, e.kind] for e in rpt.entries])
    t.rows.append(["total", rpt.total, "sum"])
    rep.tables["budget.csv"] = t
    rep.fits["budget"] = rpt.to_dict()
    rep.summary = {"total": rpt.total, "vn_fitted": cfg.vn_fitted,
                   "consistent_with_fitted_vn": rpt.consistent_with(cfg.vn_fitted)}
    return rep


_RUNNERS = {
    "time-sweep": run_time_sweep,
    "r-sweep": run_r_sweep,
    "oracle-check": run_oracle_check,
    "calib-tof": run_calib_tof,
    "calib-lattice": run_calib_lattice,
    "noise-budget": run_noise_budget,
}


def run(cfg: RunConfig, **kwargs) -> RunReport:
    return _RUNNERS[cfg.experiment](cfg, **kwargs)


# ---------------------------------------------------------------------------
# Command line


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="squeezelab", description="Squeezing digital-twin experiments")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="experiment", required=True)
    for name in EXPERIMENTS:
        s = sub.add_parser(name)
        s.add_argument("config", nargs="?", help="flat key = value configuration file")
        s.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override one configuration key (repeatable)")
        s.add_argument("--output-dir", help="directory for CSV and JSON outputs")
        if name == "noise-budget":
            s.add_argument("--defaults", choices=["paper"], help="use the published input values")
    return p


def _print_summary(rep: RunReport, out_dir: Path) -> None:
    print(f"experiment: {rep.config.experiment}")
    print(f"master_seed: {rep.config.master_seed}")
    print(f"config_hash: {rep.config.config_hash()}")
    for k, v in rep.summary.items():
        if k == "calibration_report":
            print(v, end="")
        else:
            print(f"{k}: {_cell(v) if v is not None else 'null'}")
    for name in sorted(rep.tables):
        print(f"wrote: {out_dir / name}")
    if rep.message:
        print(f"status: {rep.message}", file=sys.stderr)


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = load_config(args.experiment, args.config, args.overrides)
        if args.output_dir:
            cfg = replace(cfg, output_dir=args.output_dir)
        extra = {"paper_defaults": args.defaults == "paper"} if args.experiment == "noise-budget" else {}
        rep = run(cfg, **extra)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out_dir = rep.write()
    _print_summary(rep, out_dir)
    return rep.exit_code


if __name__ == "__main__":
    sys.exit(main())
