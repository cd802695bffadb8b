"""
Position-signal calibration: volts per metre of the recapture readout.

Two independent routes are implemented and can be cross-checked:

* TOF thermometry: velocity widths (in volts) measured at several occupation
  numbers, the latter obtained from PSD areas with and without cooling.
* Lattice shift: a laser frequency step moves the standing wave by a known
  distance; half an oscillation later the particle swings with twice that
  amplitude.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import integrate, optimize, signal
from scipy.constants import c as C_LIGHT
from scipy.constants import k as K_B

from .analysis import FitError, FitResult, _result, fit_velocity_distribution, velocity_histogram
from .measurement import NoiseSpec, Trace, ensemble, recapture_amplitude, release_samples
from .phasespace import GaussianState, PhysicalParams, displace, evolve_harmonic, thermal_state
from .seeding import counter_normals, trial_seeds

__all__ = [
    "CalibrationFactor",
    "LatticeGeometry",
    "psd_temperature_ratio",
    "psd_area",
    "occupation_from_temperature",
    "tof_width_model",
    "tof_calibration",
    "lattice_shift_displacement",
    "lattice_shift_oscillation",
    "lattice_shift_state",
    "lattice_calibration",
    "fit_lattice_oscillation",
    "simulate_tof_calibration",
    "simulate_lattice_calibration",
    "simulate_lattice_tau_scan",
]

N_MIN_DEFAULT = 1.5
T_REFERENCE = 293.0
# Cooled temperatures of the synthetic TOF calibration, 18 uK to 400 uK.
DEFAULT_TEMPERATURES = tuple(float(t) for t in np.geomspace(18e-6, 400e-6, 10))


@dataclass(frozen=True)
class CalibrationFactor:
    volts_per_meter: float
    std_error: float
    method: str
    n_points: int = 0
    n_excluded: int = 0

    def __post_init__(self):
        if not self.volts_per_meter > 0:
            raise ValueError("calibration factor must be positive")
        if self.method not in ("tof_thermometry", "lattice_shift"):
            raise ValueError(f"unknown calibration method {self.method!r}")

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "volts_per_meter": self.volts_per_meter,
            "std_error": self.std_error,
            "n_points": self.n_points,
            "n_excluded": self.n_excluded,
        }


@dataclass(frozen=True)
class LatticeGeometry:
    """Particle-to-mirror optical path ``L`` and laser wavelength."""

    L: float = 16.6e-3
    wavelength: float = 1551.38e-9

    @property
    def laser_omega(self) -> float:
        """Omega0 + Omega1: angular frequency of the trapping laser."""
        return 2 * math.pi * C_LIGHT / self.wavelength


# ---------------------------------------------------------------------------
# TOF thermometry


def psd_temperature_ratio(area_cooled: float, area_uncooled: float, t_reference: float = T_REFERENCE) -> float:
    """Temperature from PSD areas, assuming the uncooled mode sits at ``t_reference``."""
    if not (area_cooled > 0 and area_uncooled > 0):
        raise ValueError("PSD areas must be positive")
    return t_reference * area_cooled / area_uncooled


def psd_area(
    trace: Trace,
    band: tuple[float, float],
    noise_floor: float | None = None,
    nperseg: int = 1024,
) -> float:
    """Area of the Welch PSD over ``band`` (Hz), optionally after subtracting a flat floor."""
    f, pxx = signal.welch(trace.signal, fs=trace.sample_rate, nperseg=min(nperseg, trace.signal.size))
    sel = (f >= band[0]) & (f <= band[1])
    if np.count_nonzero(sel) < 2:
        raise ValueError("band contains fewer than two PSD bins")
    y = pxx[sel]
    if noise_floor is not None:
        y = y - noise_floor
    return float(integrate.trapezoid(y, f[sel]))


def occupation_from_temperature(temperature: float, params: PhysicalParams) -> float:
    """n with kB T = hbar omega0 (n + 1/2), consistent with the Maxwell-Boltzmann width."""
    return K_B * temperature / (params.hbar * params.omega0) - 0.5


def tof_width_model(occupations, params: PhysicalParams) -> np.ndarray:
    """Displacement width [m] after the TOF: t_tof * sqrt(hbar omega0 (n + 1/2) / m)."""
    n = np.asarray(occupations, dtype=float)
    return params.t_tof * np.sqrt(params.hbar * params.omega0 * (n + 0.5) / params.mass)


def tof_calibration(
    widths_in_volts: Sequence[float],
    occupations: Sequence[float],
    params: PhysicalParams,
    std_errors: Sequence[float] | None = None,
    *,
    n_min: float = N_MIN_DEFAULT,
    systematic: float = 0.0,
) -> CalibrationFactor:
    """Fit widths (volts) = k * tof_width_model(n) using only points with n > ``n_min``.

    ``systematic`` is a relative temperature uncertainty; it enters the
    reported error of k as systematic/2 in quadrature (k scales as T^-1/2).
    """
    w = np.asarray(widths_in_volts, dtype=float)
    n = np.asarray(occupations, dtype=float)
    if w.shape != n.shape:
        raise ValueError("widths and occupations must have the same length")
    use = n > n_min
    if np.count_nonzero(use) < 3:
        raise ValueError(f"need at least three points with n_z > {n_min}")
    x = tof_width_model(n[use], params)
    y = w[use]
    if std_errors is None:
        wt = np.ones_like(y)
    else:
        wt = 1.0 / np.asarray(std_errors, dtype=float)[use] ** 2
    k = float(np.sum(wt * x * y) / np.sum(wt * x * x))
    resid = y - k * x
    dof = y.size - 1
    if std_errors is None:
        var_k = float(np.sum(resid**2) / dof / np.sum(x * x))
    else:
        var_k = float(1.0 / np.sum(wt * x * x))
    err = math.sqrt(var_k + (k * systematic / 2) ** 2)
    return CalibrationFactor(k, err, "tof_thermometry", int(y.size), int(np.count_nonzero(~use)))


# ---------------------------------------------------------------------------
# Lattice shift


def lattice_shift_displacement(geom: LatticeGeometry, d_omega: float) -> float:
    """Shift of the standing wave [m] for a laser frequency step ``d_omega`` [rad/s]."""
    return geom.L * d_omega / (geom.laser_omega + d_omega)


def lattice_shift_oscillation(delta: float, omega0_prime: float, tau: float) -> float:
    """Amplitude after oscillating for ``tau`` about a trap centre displaced by ``delta``."""
    if delta < 0:
        raise ValueError("delta must be non-negative")
    return 2 * delta * abs(math.sin(omega0_prime * tau / 2))


def lattice_shift_state(
    state: GaussianState, delta: float, tau: float, omega0_prime: float | None = None
) -> GaussianState:
    """Move the trap by ``delta`` for ``tau`` (at ``omega0_prime``), then restore it."""
    w = state.params.omega0 if omega0_prime is None else omega0_prime
    moved = displace(state, dz=-delta)
    moved = evolve_harmonic(moved, w, tau)
    return displace(moved, dz=delta)


def lattice_calibration(points: Sequence[tuple[float, float]], geom: LatticeGeometry) -> CalibrationFactor:
    """k = mean of measured volts / (2 delta) over the non-zero frequency shifts."""
    pts = [(float(d), float(v)) for d, v in points]
    used = [(d, v) for d, v in pts if d != 0]
    if len(used) < 2:
        raise ValueError("need at least two non-zero frequency shifts")
    ratios = np.array([v / (2 * lattice_shift_displacement(geom, d)) for d, v in used])
    k = float(ratios.mean())
    err = float(ratios.std(ddof=1) / math.sqrt(ratios.size))
    return CalibrationFactor(k, err, "lattice_shift", len(used), len(pts) - len(used))


def fit_lattice_oscillation(taus: Sequence[float], amplitudes: Sequence[float],
                            omega_guess: float, std_errors: Sequence[float] | None = None) -> FitResult:
    """Fit z(tau) = 2 delta |sin(omega tau / 2)|; returns ``delta`` and ``omega0_prime``."""
    tau = np.asarray(taus, dtype=float)
    y = np.asarray(amplitudes, dtype=float)
    if tau.size < 3:
        raise FitError("need at least three delays")

    def model(t, delta, w):
        return 2 * delta * np.abs(np.sin(w * t / 2))

    p0 = [max(y.max() / 2, 1e-30), omega_guess]
    try:
        popt, pcov = optimize.curve_fit(model, tau, y, p0=p0, sigma=std_errors,
                                        absolute_sigma=std_errors is not None, maxfev=10000)
    except RuntimeError as exc:
        raise FitError(str(exc)) from exc
    return _result(("delta", "omega0_prime"), popt, pcov, y - model(tau, *popt))


# ---------------------------------------------------------------------------
# Synthetic calibration runs


def simulate_tof_calibration(
    params: PhysicalParams,
    k_true: float,
    temperatures: Sequence[float] | None = None,
    *,
    n_trials: int = 5000,
    master_seed: int = 0,
    area_noise: float = 0.015,
    t_reference: float = T_REFERENCE,
    low_n_broadening: float = 0.0,
    systematic: float = 0.0,
) -> tuple[CalibrationFactor, list[dict]]:
    """TOF-thermometry calibration on synthetic data with a known ``k_true``.

    Each temperature gets a PSD-area temperature estimate with relative noise
    ``area_noise`` and a TOF ensemble of ``n_trials`` from which the width in
    volts is fitted. ``low_n_broadening`` widens the distributions of points
    with n <= 1.5 to mimic the extra low-occupation spread.
    """
    if temperatures is None:
        temperatures = DEFAULT_TEMPERATURES
    temps = np.asarray(temperatures, dtype=float)
    area_normals = counter_normals(trial_seeds(master_seed ^ 0x5A5A, temps.size), 1)[:, 0]
    rows, widths, errs, occ = [], [], [], []
    for i, temp in enumerate(temps):
        n_true = occupation_from_temperature(temp, params)
        uncooled = 1.0
        cooled = uncooled * temp / t_reference * (1 + area_noise * area_normals[i])
        n_meas = occupation_from_temperature(psd_temperature_ratio(cooled, uncooled, t_reference), params)
        ens = ensemble(thermal_state(params, max(n_true, 0.0)), None, NoiseSpec(), n_trials,
                       master_seed, offset=i * n_trials)
        volts = ens.velocity * params.t_tof * k_true
        if n_true <= N_MIN_DEFAULT and low_n_broadening:
            volts = volts * (1 + low_n_broadening)
        fit = fit_velocity_distribution(velocity_histogram(volts))
        widths.append(fit["dv"])
        # The PSD temperature error moves the model abscissa by area_noise/2 in relative terms.
        errs.append(math.hypot(fit.error("dv"), fit["dv"] * area_noise / 2))
        occ.append(n_meas)
        rows.append({"n_z": n_meas, "n_z_true": n_true, "temperature_K": float(temp),
                     "width_volts": fit["dv"], "width_err_volts": fit.error("dv"),
                     "used_in_fit": bool(n_meas > N_MIN_DEFAULT)})
    factor = tof_calibration(widths, occ, params, errs, systematic=systematic)
    return factor, rows


def _lattice_amplitudes(state, geom, d_omega, tau, omega0_prime, n_traces, master_seed, offset):
    after = lattice_shift_state(state, lattice_shift_displacement(geom, d_omega), tau, omega0_prime)
    seeds = trial_seeds(master_seed, n_traces, offset)
    z, v = release_samples(after, counter_normals(seeds, 2))
    return recapture_amplitude(z, v, state.params.omega0), seeds


def simulate_lattice_calibration(
    params: PhysicalParams,
    k_true: float,
    geom: LatticeGeometry | None = None,
    shifts_hz: Sequence[float] | None = None,
    *,
    n_traces: int = 120,
    n_initial: float = 0.98,
    readout_noise_volts: float = 0.0,
    intensity_droop: bool = False,
    master_seed: int = 0,
) -> tuple[CalibrationFactor, list[dict]]:
    """Lattice-shift calibration on synthetic data: amplitude at tau = pi/omega0' per shift.

    With ``intensity_droop`` shifts of 1.4 MHz and above lower the trap
    frequency by the square root of a 3 % intensity drop.
    """
    geom = geom or LatticeGeometry()
    if shifts_hz is None:
        shifts_hz = np.arange(1, 8) * 0.2e6
    state = thermal_state(params, n_initial)
    readout = counter_normals(trial_seeds(master_seed ^ 0xA5A5, len(shifts_hz) * n_traces), 1)[:, 0]
    points, rows = [], []
    for i, f in enumerate(shifts_hz):
        d_omega = 2 * math.pi * f
        w = params.omega0 * (math.sqrt(0.97) if intensity_droop and f >= 1.4e6 else 1.0)
        amps, _ = _lattice_amplitudes(state, geom, d_omega, math.pi / w, w, n_traces,
                                      master_seed, i * n_traces)
        volts = k_true * amps + readout_noise_volts * readout[i * n_traces:(i + 1) * n_traces]
        mean_v = float(volts.mean())
        points.append((d_omega, mean_v))
        rows.append({"delta_f_hz": float(f), "amplitude_volts": mean_v,
                     "amplitude_err_volts": float(volts.std(ddof=1) / math.sqrt(n_traces)),
                     "predicted_m": 2 * lattice_shift_displacement(geom, d_omega)})
    return lattice_calibration(points, geom), rows


def simulate_lattice_tau_scan(
    params: PhysicalParams,
    geom: LatticeGeometry | None = None,
    shift_hz: float = 1e6,
    taus: Sequence[float] | None = None,
    *,
    n_traces: int = 120,
    n_initial: float = 0.98,
    master_seed: int = 0,
) -> tuple[FitResult, list[dict]]:
    """Mean oscillation amplitude versus shift duration tau, fitted with 2 delta |sin(omega tau/2)|."""
    geom = geom or LatticeGeometry()
    if taus is None:
        taus = np.linspace(0, 3 * 2 * math.pi / params.omega0, 61)
    state = thermal_state(params, n_initial)
    d_omega = 2 * math.pi * shift_hz
    rows, means, errs = [], [], []
    for i, tau in enumerate(taus):
        amps, _ = _lattice_amplitudes(state, geom, d_omega, float(tau), None, n_traces,
                                      master_seed, i * n_traces)
        means.append(float(amps.mean()))
        errs.append(float(amps.std(ddof=1) / math.sqrt(n_traces)))
        rows.append({"tau_s": float(tau), "amplitude_m": means[-1], "amplitude_std_m": float(amps.std(ddof=1))})
    fit = fit_lattice_oscillation(taus, means, params.omega0, errs)
    return fit, rows
