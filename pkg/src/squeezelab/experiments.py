"""
Synthetic versions of the squeezing measurements: hold-time sweeps at fixed r,
sweeps over r, and the Monte Carlo versus analytic oracle grid.

Every point of a sweep owns a disjoint block of global trial indices, so a
point's random numbers depend only on (master_seed, block) and the outcome is
the same for any number of worker processes.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .analysis import (
    FitError,
    FitResult,
    PipelineAbort,
    amplitudes_from_traces,
    fit_r_dependence,
    fit_variance_evolution,
    normalized_variance_point,
)
from .measurement import NoiseSpec, ensemble, recapture_variance
from .phasespace import PhysicalParams, free_flight, thermal_state
from .protocol import analytic_variance, canonical_schedule, run_protocol

__all__ = [
    "SweepPoint",
    "TimeSweep",
    "RSweep",
    "OraclePoint",
    "hold_grid",
    "measure_point",
    "time_sweep",
    "r_sweep",
    "oracle_grid",
]


@dataclass(frozen=True)
class SweepPoint:
    r: float
    hold: float
    v_tilde: float
    std_error: float
    analytic: float
    ok: bool = True


@dataclass(frozen=True)
class TimeSweep:
    r: float
    points: tuple[SweepPoint, ...]
    fit: FitResult | None
    n_dropped: int
    error: str | None = None


@dataclass(frozen=True)
class RSweep:
    sweeps: tuple[TimeSweep, ...]
    minima: FitResult | None
    maxima: FitResult | None
    error: str | None = None


@dataclass(frozen=True)
class OraclePoint:
    r: float
    hold: float
    monte_carlo: float
    analytic: float
    model: float

    @property
    def deviation(self) -> float:
        return abs(self.monte_carlo / self.model - 1)


def hold_grid(start: float, stop: float, step: float) -> np.ndarray:
    """Hold times start, start+step, ... strictly below ``stop``, free of float drift."""
    if not step > 0:
        raise ValueError("hold step must be positive")
    n = int(math.ceil((stop - start) / step - 1e-9))
    if n < 1:
        raise ValueError("empty hold grid")
    return start + step * np.arange(n)


@dataclass(frozen=True)
class _PointTask:
    params: PhysicalParams
    r: float
    hold: float
    n_trials: int
    master_seed: int
    offset: int
    noise: NoiseSpec
    n_initial: float
    heating: bool


def _velocities(task: _PointTask) -> tuple[np.ndarray, int]:
    p = task.params
    sched = canonical_schedule(p, task.r, heating=task.heating).with_hold(task.hold)
    ens = ensemble(thermal_state(p, task.n_initial), sched, task.noise, task.n_trials,
                   task.master_seed, offset=task.offset)
    if ens.traces is None:
        return ens.velocity, 0
    amps, _, dropped = amplitudes_from_traces(ens.traces, p.omega0 / (2 * math.pi),
                                              calibration=task.noise.calibration)
    return amps / sched.t_tof, dropped


def measure_point(task: _PointTask) -> tuple[float, float, int, bool]:
    """(V, error, traces dropped, ok) for one hold time; ``ok`` is False when the histogram fit fails."""
    vel, dropped = _velocities(task)
    try:
        v, err = normalized_variance_point(vel, task.params)
    except (FitError, ValueError):
        return math.nan, math.nan, dropped, False
    return v, err, dropped, True


def _map(fn, tasks, workers: int):
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        # map() preserves submission order, so results never depend on completion order.
        return list(pool.map(fn, tasks, chunksize=max(1, len(tasks) // (4 * workers))))


def _analytic(params, r, hold, n_initial, vn):
    return analytic_variance(r, hold, params, 2 * n_initial + 1).v_tilde + vn


def _model(fit: FitResult, phi: np.ndarray) -> np.ndarray:
    m = fit["V1"] * np.cos(phi) ** 2 + fit["V2"] * np.sin(phi) ** 2
    return m + fit["C"] * np.sin(2 * phi) if "C" in fit.names else m


def _reweighted_fit(points, omega0, cross, rounds):
    h = np.array([p.hold for p in points])
    v = np.array([p.v_tilde for p in points])
    err = np.array([p.std_error for p in points])
    rel = err / v
    fit = fit_variance_evolution(h, v, err, omega0, include_cross_term=cross)
    for _ in range(rounds):
        model = _model(fit, omega0 * h)
        if np.any(model <= 0):
            break
        err = rel * model
        fit = fit_variance_evolution(h, v, err, omega0, include_cross_term=cross)
    return _birge_scaled(fit, (v - _model(fit, omega0 * h)) / err)


def _birge_scaled(fit: FitResult, pulls: np.ndarray) -> FitResult:
    # Inflate the covariance by chi2/dof when the scatter exceeds the quoted point errors.
    dof = fit.n_points - len(fit.names)
    chi2 = float(np.sum(pulls**2)) / max(dof, 1)
    if dof < 1 or chi2 <= 1:
        return fit
    return replace(fit, covariance=fit.covariance * chi2, std_errors=fit.std_errors * math.sqrt(chi2),
                   flags=fit.flags + ("birge_scaled",))


def time_sweep(
    params: PhysicalParams,
    r: float,
    holds,
    *,
    n_trials: int = 300,
    master_seed: int = 0,
    noise: NoiseSpec | None = None,
    n_initial: float = 0.98,
    heating: bool = False,
    include_cross_term: bool = False,
    block: int = 0,
    workers: int = 1,
    max_drop_fraction: float = 0.05,
    reweight: int = 3,
) -> TimeSweep:
    """Measured V(hold) at fixed r and its cos^2/sin^2 fit.

    ``reweight`` rounds of reweighting replace each point's error by its
    relative error times the fitted model value. Weighting by the measured
    errors alone favours points that fluctuated low and biases V1, V2 down.

    Points whose histogram fit fails are dropped from the fit; losing more
    than ``max_drop_fraction`` of them raises PipelineAbort. A failing
    variance fit is reported in ``error`` with the points kept.
    """
    noise = noise or NoiseSpec()
    holds = np.asarray(holds, dtype=float)
    if holds.size == 0:
        raise ValueError("hold grid is empty")
    base = block * holds.size * n_trials
    tasks = [_PointTask(params, r, float(h), n_trials, master_seed, base + j * n_trials, noise,
                        n_initial, heating) for j, h in enumerate(holds)]
    results = _map(measure_point, tasks, workers)
    vn = noise.lattice_jitter_variance
    points = tuple(
        SweepPoint(r, float(h), v, e, _analytic(params, r, float(h), n_initial, vn), ok)
        for h, (v, e, _, ok) in zip(holds, results)
    )
    n_bad = sum(not p.ok for p in points)
    if n_bad / len(points) > max_drop_fraction:
        raise PipelineAbort(f"{n_bad} of {len(points)} sweep points could not be fitted")
    good = [p for p in points if p.ok]
    try:
        fit = _reweighted_fit(good, params.omega0, include_cross_term, reweight)
        error = None
    except FitError as exc:
        fit, error = None, str(exc)
    return TimeSweep(r, points, fit, n_bad + sum(res[2] for res in results), error)


def r_sweep(
    params: PhysicalParams,
    r_values,
    holds,
    *,
    n_trials: int = 300,
    master_seed: int = 0,
    noise: NoiseSpec | None = None,
    n_initial: float = 0.98,
    heating: bool = False,
    include_cross_term: bool = False,
    workers: int = 1,
    reweight: int = 3,
    position_term: bool = False,
) -> RSweep:
    """Time sweeps at each r, then V1(r) fitted for (Vn, Vini) and V2(r) with Vn held at that value.

    ``position_term`` fits the r dependence with the finite-TOF position
    contribution included (see ``fit_r_dependence``).
    """
    r_values = [float(r) for r in r_values]
    if len(set(r_values)) < 3:
        raise ValueError("an r sweep needs at least three distinct r values")
    sweeps = tuple(
        time_sweep(params, r, holds, n_trials=n_trials, master_seed=master_seed, noise=noise,
                   n_initial=n_initial, heating=heating, include_cross_term=include_cross_term,
                   block=i, workers=workers, reweight=reweight)
        for i, r in enumerate(r_values)
    )
    failed = [s for s in sweeps if s.fit is None]
    if failed:
        return RSweep(sweeps, None, None, f"time-sweep fit failed at r={failed[0].r}: {failed[0].error}")
    r = np.array([s.r for s in sweeps])
    v1 = np.array([s.fit["V1"] for s in sweeps])
    e1 = np.array([s.fit.error("V1") for s in sweeps])
    v2 = np.array([s.fit["V2"] for s in sweeps])
    e2 = np.array([s.fit.error("V2") for s in sweeps])
    try:
        wt = params.omega_t_tof if position_term else None
        minima = fit_r_dependence(r, v1, e1, "minima", omega_t_tof=wt)
        maxima = fit_r_dependence(r, v2, e2, "maxima", fixed_vn=minima["Vn"], omega_t_tof=wt)
    except FitError as exc:
        return RSweep(sweeps, None, None, str(exc))
    return RSweep(sweeps, minima, maxima)


def oracle_grid(
    params: PhysicalParams,
    r_values,
    holds,
    *,
    n_trials: int = 100_000,
    master_seed: int = 0,
    n_initial: float = 0.0,
    heating: bool = False,
) -> list[OraclePoint]:
    """Ensemble variance against the closed-form variance on an (r, hold) grid.

    ``model`` is the exact propagated expectation of the same configuration
    (with heating if enabled), ``analytic`` the heating-free closed form, so
    ``monte_carlo - analytic`` isolates the heating contribution.
    """
    out = []
    initial = thermal_state(params, n_initial)
    holds = np.asarray(holds, dtype=float)
    for i, r in enumerate(r_values):
        for j, h in enumerate(holds):
            sched = canonical_schedule(params, float(r), heating=heating).with_hold(float(h))
            ens = ensemble(initial, sched, NoiseSpec(), n_trials, master_seed,
                           offset=(i * holds.size + j) * n_trials)
            model = recapture_variance(free_flight(run_protocol(initial, sched), sched.t_tof))
            analytic = analytic_variance(float(r), float(h), params, 2 * n_initial + 1).v_tilde
            out.append(OraclePoint(float(r), float(h), ens.normalized_variance(), analytic, model))
    return out
