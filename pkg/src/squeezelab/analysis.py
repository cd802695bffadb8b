"""
Data reduction for TOF runs: trace filtering and sinusoid fits, velocity
histograms with Gaussian fits, and the two-level variance fits (hold-time
evolution, then dependence on the squeezing parameter).
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy import optimize, signal

from .measurement import Trace
from .phasespace import PhysicalParams

__all__ = [
    "FitError",
    "PipelineAbort",
    "FilterSpec",
    "Histogram",
    "FitResult",
    "design_bandpass",
    "fir_bandpass",
    "fit_sinusoid",
    "trace_amplitude",
    "amplitudes_from_traces",
    "velocity_histogram",
    "fit_velocity_distribution",
    "ml_width",
    "normalized_variance_point",
    "fit_variance_evolution",
    "fit_r_dependence",
    "squeezing_db",
    "occupation_from_width",
]

logger = logging.getLogger(__name__)

# Minimum half-range of the velocity histogram, in sample standard deviations.
HISTOGRAM_SPAN_SIGMA = 6.0


class FitError(RuntimeError):
    """A fit did not converge or its input was unusable."""


class PipelineAbort(RuntimeError):
    """Too many trials were dropped for the run to be trusted."""


@dataclass(frozen=True)
class FilterSpec:
    order: int = 10
    center: float = 253e3
    bandwidth: float = 20e3

    def __post_init__(self):
        if self.order < 2 or self.order % 2:
            raise ValueError("FIR order must be even and >= 2 (linear phase, integer delay)")
        if not 0 < self.bandwidth < 2 * self.center:
            raise ValueError("bandwidth must be positive and below twice the center")


@dataclass(frozen=True)
class Histogram:
    bin_edges: np.ndarray
    counts: np.ndarray
    bin_width: float

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.bin_edges[1:] + self.bin_edges[:-1])

    @property
    def n(self) -> int:
        return int(self.counts.sum())


@dataclass(frozen=True)
class FitResult:
    names: tuple[str, ...]
    values: np.ndarray
    std_errors: np.ndarray
    covariance: np.ndarray
    residual_rms: float
    n_points: int = 0
    flags: tuple[str, ...] = field(default=())

    def __getitem__(self, name: str) -> float:
        return float(self.values[self.names.index(name)])

    def error(self, name: str) -> float:
        return float(self.std_errors[self.names.index(name)])

    def to_dict(self, n_dropped: int = 0) -> dict:
        return {
            "parameters": {k: float(v) for k, v in zip(self.names, self.values)},
            "errors": {k: float(v) for k, v in zip(self.names, self.std_errors)},
            "residual_rms": float(self.residual_rms),
            "n_dropped": int(n_dropped),
            "flags": list(self.flags),
        }

    def to_json(self, n_dropped: int = 0) -> str:
        return json.dumps(self.to_dict(n_dropped), indent=2, sort_keys=True)


def _result(names, values, cov, resid, flags=()) -> FitResult:
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    if not np.all(np.isfinite(cov)):
        raise FitError("parameter covariance is not finite")
    errs = np.sqrt(np.clip(np.diag(cov), 0, None))
    resid = np.asarray(resid, dtype=float)
    return FitResult(tuple(names), np.asarray(values, dtype=float), errs, cov,
                     float(np.sqrt(np.mean(resid**2))) if resid.size else 0.0,
                     int(resid.size), tuple(flags))


# ---------------------------------------------------------------------------
# Traces


def design_bandpass(spec: FilterSpec, sample_rate: float) -> np.ndarray:
    """Linear-phase band-pass taps with unit gain at ``spec.center`` and an exact zero at DC."""
    if sample_rate <= 2 * (spec.center + spec.bandwidth / 2):
        raise ValueError(f"sample rate {sample_rate:g} Hz too low for a band at {spec.center:g} Hz")
    band = [spec.center - spec.bandwidth / 2, spec.center + spec.bandwidth / 2]
    taps = signal.firwin(spec.order + 1, band, pass_zero=False, fs=sample_rate, window="hamming")
    # A short window leaks DC; removing the tap mean puts a zero there while keeping symmetry.
    taps = taps - taps.mean()
    _, h = signal.freqz(taps, worN=[spec.center], fs=sample_rate)
    return taps / abs(h[0])


def fir_bandpass(trace: Trace, spec: FilterSpec | None = None) -> Trace:
    """Band-pass filter a trace with the group delay removed."""
    spec = spec or FilterSpec()
    taps = design_bandpass(spec, trace.sample_rate)
    # Odd-length symmetric taps: 'same' convolution aligns the output with the input.
    y = np.convolve(trace.signal, taps, mode="same")
    return Trace(trace.sample_rate, y)


def fit_sinusoid(trace: Trace, f0_guess: float, noise_floor_snr: float = 3.0) -> FitResult:
    """Least-squares fit of ``A sin(2 pi f t + phi) + c``; returns amplitude, frequency, phase, offset.

    The amplitude is non-negative with the phase in [0, 2 pi). If the amplitude
    is not distinguishable from noise the linear estimate at ``f0_guess`` is
    returned with the flag ``below_noise_floor``.
    """
    y = np.asarray(trace.signal, dtype=float)
    n = y.size
    if n * f0_guess / trace.sample_rate < 5:
        raise FitError("trace shorter than five periods")
    t = trace.t
    w0 = 2 * np.pi * f0_guess
    basis = np.column_stack([np.sin(w0 * t), np.cos(w0 * t), np.ones(n)])
    (a, b, c), *_ = np.linalg.lstsq(basis, y, rcond=None)
    amp, phase = math.hypot(a, b), math.atan2(b, a)
    resid = y - basis @ np.array([a, b, c])
    sigma = float(np.std(resid))
    floor = sigma * math.sqrt(2.0 / n)
    if sigma == 0 or amp > noise_floor_snr * floor:
        flags: tuple[str, ...] = ()
    else:
        cov = np.diag([floor**2, 0.0, (floor / max(amp, floor)) ** 2, sigma**2 / n])
        return _result(("amplitude", "frequency", "phase", "offset"),
                       [amp, f0_guess, phase % (2 * np.pi), c], cov, resid, ("below_noise_floor",))

    tc = t - t.mean()
    phase_c = phase + w0 * t.mean()

    def model(p):
        return p[0] * np.sin(2 * np.pi * p[1] * tc + p[2]) + p[3]

    def jac(p):
        arg = 2 * np.pi * p[1] * tc + p[2]
        s, co = np.sin(arg), np.cos(arg)
        return np.column_stack([s, p[0] * co * 2 * np.pi * tc, p[0] * co, np.ones(n)])

    res = optimize.least_squares(lambda p: model(p) - y, [amp, f0_guess, phase_c, c], jac=jac,
                                 method="lm", x_scale="jac")
    if not res.success:
        raise FitError(f"sinusoid fit did not converge: {res.message}")
    A, f, ph, off = res.x
    if A < 0:
        A, ph = -A, ph + np.pi
    # Refer the phase back to t = 0.
    ph = (ph - 2 * np.pi * f * t.mean()) % (2 * np.pi)
    dof = max(n - 4, 1)
    s2 = float(res.fun @ res.fun) / dof
    J = jac([A, f, (ph + 2 * np.pi * f * t.mean()), off])
    try:
        cov_c = np.linalg.inv(J.T @ J) * s2
    except np.linalg.LinAlgError as exc:
        raise FitError("singular sinusoid fit") from exc
    # phase(t=0) = phase(centre) - 2 pi f tbar
    T = np.eye(4)
    T[2, 1] = -2 * np.pi * t.mean()
    cov = T @ cov_c @ T.T
    return _result(("amplitude", "frequency", "phase", "offset"), [A, f, ph, off], cov, res.fun, flags)


def trace_amplitude(trace: Trace, f0_guess: float, spec: FilterSpec | None = None) -> FitResult:
    """Filter, drop the filter's edge transients and fit the sinusoid.

    The amplitude is divided by the filter gain at the fitted frequency.
    """
    spec = spec or FilterSpec()
    filt = fir_bandpass(trace, spec)
    k = spec.order // 2
    fit = fit_sinusoid(Trace(trace.sample_rate, filt.signal[k:-k]), f0_guess)
    _, h = signal.freqz(design_bandpass(spec, trace.sample_rate), worN=[fit["frequency"]],
                        fs=trace.sample_rate)
    scale = np.ones(4)
    scale[0] = 1.0 / abs(h[0])
    return replace(fit, values=fit.values * scale, std_errors=fit.std_errors * scale,
                   covariance=fit.covariance * np.outer(scale, scale))


def amplitudes_from_traces(
    traces: Sequence[Trace],
    f0_guess: float,
    spec: FilterSpec | None = None,
    *,
    calibration: float = 1.0,
    max_drop_fraction: float = 0.05,
) -> tuple[np.ndarray, np.ndarray, int]:
    """Signed displacement amplitudes [m] from raw traces.

    Returns (signed_amplitudes, kept_index, n_dropped). The sign is that of
    sin(phase), i.e. of the displacement at recapture. Trials whose fit fails
    are dropped; more than ``max_drop_fraction`` dropped aborts the run.
    """
    amps, kept, dropped = [], [], 0
    # The edge trim shifts the time origin by order/2 samples; undo it in the phase.
    spec = spec or FilterSpec()
    for i, tr in enumerate(traces):
        try:
            fit = trace_amplitude(tr, f0_guess, spec)
        except FitError:
            dropped += 1
            continue
        shift = 2 * np.pi * fit["frequency"] * (spec.order // 2) / tr.sample_rate
        phase = fit["phase"] - shift
        sign = 1.0 if math.sin(phase) >= 0 else -1.0
        amps.append(sign * fit["amplitude"] / calibration)
        kept.append(i)
    if traces and dropped / len(traces) > max_drop_fraction:
        raise PipelineAbort(f"{dropped} of {len(traces)} trace fits failed")
    return np.array(amps), np.array(kept, dtype=int), dropped


# ---------------------------------------------------------------------------
# Velocity distributions


def velocity_histogram(velocities: Sequence[float], span: float = HISTOGRAM_SPAN_SIGMA) -> Histogram:
    """Histogram with bin width 1.75*sigma/N^(1/3) (half of Scott's rule), bins centred on the mean.

    The bins cover at least mean +/- ``span`` sigma. The empty bins beyond the
    extreme samples matter: without them a fit is free to widen the tails.
    """
    v = np.asarray(velocities, dtype=float)
    n = v.size
    if n < 10:
        raise ValueError(f"need at least 10 samples, got {n}")
    sigma = float(np.std(v, ddof=1))
    if not sigma > 0:
        raise ValueError("degenerate sample: zero spread")
    h = 1.75 * sigma / n ** (1 / 3)
    mu = float(v.mean())
    lo = min(float(v.min()), mu - span * sigma)
    hi = max(float(v.max()), mu + span * sigma)
    kmin = math.floor((lo - mu) / h + 0.5)
    kmax = math.ceil((hi - mu) / h - 0.5)
    while True:
        edges = mu + (np.arange(kmin, kmax + 2) - 0.5) * h
        counts, _ = np.histogram(v, bins=edges)
        if counts.sum() == n:
            break
        # Rounding left an extreme sample outside; widen by one bin.
        if v.min() < edges[0]:
            kmin -= 1
        else:
            kmax += 1
    return Histogram(edges, counts, h)


def _gauss(v, a, v0, dv):
    return a * np.exp(-((v - v0) ** 2) / (2 * dv**2))


def fit_velocity_distribution(hist: Histogram, reweight: int = 3) -> FitResult:
    """Gaussian fit of the histogram counts: centre ``v0`` and width ``dv``.

    An unweighted fit seeds ``reweight`` rounds with Poisson errors taken from
    the fitted model (Pearson weighting). Weights from the observed counts
    would bias the width low; unit weights leave the quoted errors too small.
    """
    x, y = hist.centers, hist.counts.astype(float)
    if np.count_nonzero(y) < 5:
        raise FitError("fewer than five non-empty bins")
    mu = float(np.sum(x * y) / y.sum())
    sd = float(np.sqrt(np.sum(y * (x - mu) ** 2) / y.sum()))
    p = np.array([y.max(), mu, sd])
    sigma, absolute = None, False
    try:
        for _ in range(reweight + 1):
            p, pcov = optimize.curve_fit(_gauss, x, y, p0=p, sigma=sigma, absolute_sigma=absolute,
                                         maxfev=10000)
            # Floor of one count keeps empty far-tail bins from dominating.
            sigma, absolute = np.sqrt(np.maximum(_gauss(x, *p), 1.0)), True
    except (RuntimeError, optimize.OptimizeWarning) as exc:
        raise FitError(f"Gaussian fit failed: {exc}") from exc
    p[2] = abs(p[2])
    resid = y - _gauss(x, *p)
    return _result(("amplitude", "v0", "dv"), p, pcov, resid)


def ml_width(velocities: Sequence[float]) -> FitResult:
    """Maximum-likelihood Gaussian centre and width of raw samples, for binning-bias checks."""
    v = np.asarray(velocities, dtype=float)
    n = v.size
    mu, sd = float(v.mean()), float(v.std())
    cov = np.diag([sd**2 / n, sd**2 / (2 * n)])
    return _result(("v0", "dv"), [mu, sd], cov, v - mu)


def normalized_variance_point(velocities: Sequence[float], params: PhysicalParams) -> tuple[float, float]:
    """(V/V0, standard error) from a histogram fit of the velocities."""
    fit = fit_velocity_distribution(velocity_histogram(velocities))
    dv, err = fit["dv"], fit.error("dv")
    vt = dv**2 / params.v0
    return vt, 2 * vt * err / dv


# ---------------------------------------------------------------------------
# Variance models


def _weighted_linear_fit(design, y, err, names, lower=None, flags=()):
    design = np.asarray(design, dtype=float)
    y = np.asarray(y, dtype=float)
    absolute = err is not None
    if absolute:
        err = np.asarray(err, dtype=float)
        if not np.all(np.isfinite(err)) or np.any(err <= 0):
            raise FitError("standard errors must be positive and finite")
    w = 1.0 / err if absolute else np.ones_like(y)
    a = design * w[:, None]
    b = y * w
    lb = -np.inf * np.ones(design.shape[1]) if lower is None else np.asarray(lower, dtype=float)
    res = optimize.lsq_linear(a, b, bounds=(lb, np.inf), method="bvls", lsmr_tol=None)
    if not res.success:
        raise FitError(f"linear fit failed: {res.message}")
    try:
        cov = np.linalg.inv(a.T @ a)
    except np.linalg.LinAlgError as exc:
        raise FitError("degenerate design matrix") from exc
    resid = y - design @ res.x
    if not absolute:
        dof = max(y.size - design.shape[1], 1)
        cov = cov * float(resid @ resid) / dof
    return _result(names, res.x, cov, resid, flags)


def fit_variance_evolution(
    holds: Sequence[float],
    v_tilde: Sequence[float],
    std_errors: Sequence[float] | None,
    omega0: float,
    *,
    include_cross_term: bool = False,
) -> FitResult:
    """Fit V(hold) = V1 cos^2(omega0 hold) + V2 sin^2(omega0 hold) with V1, V2 >= 0.

    ``include_cross_term`` adds a free ``C sin(2 omega0 hold)`` term, the
    shape of the position-velocity correlation left by a finite TOF.
    """
    h = np.asarray(holds, dtype=float)
    if h.size < 4:
        raise FitError("need at least four hold times")
    if (h.max() - h.min()) * omega0 < np.pi / 2 * (1 - 1e-9):
        raise FitError("hold times must span at least half an oscillation of V(hold)")
    phi = omega0 * h
    cols = [np.cos(phi) ** 2, np.sin(phi) ** 2]
    names = ["V1", "V2"]
    lower = [0.0, 0.0]
    if include_cross_term:
        cols.append(np.sin(2 * phi))
        names.append("C")
        lower.append(-np.inf)
    return _weighted_linear_fit(np.column_stack(cols), v_tilde, std_errors, names, lower)


def fit_r_dependence(
    r: Sequence[float],
    v: Sequence[float],
    std_errors: Sequence[float] | None,
    branch: str = "minima",
    *,
    fixed_vn: float | None = None,
    omega_t_tof: float | None = None,
) -> FitResult:
    """Fit V1 = Vn + Vini exp(-4r) (minima) or V2 = Vn + Vini exp(4r) (maxima).

    With ``fixed_vn`` only ``Vini`` is free; the result still lists ``Vn``
    with zero error. Passing ``omega_t_tof`` adds the finite-TOF position
    term Vini exp(4r)/(omega0 t_tof)^2 to either branch.
    """
    r = np.asarray(r, dtype=float)
    v = np.asarray(v, dtype=float)
    if np.unique(r).size < 3:
        raise FitError("need at least three distinct squeezing parameters")
    if branch not in ("minima", "maxima"):
        raise ValueError(f"branch must be 'minima' or 'maxima', got {branch!r}")
    shape = np.exp(-4 * r) if branch == "minima" else np.exp(4 * r)
    flags: tuple[str, ...] = ()
    if omega_t_tof is not None:
        shape = shape + np.exp(4 * r) / omega_t_tof**2
        flags = ("position_term",)
    if fixed_vn is None:
        return _weighted_linear_fit(np.column_stack([np.ones_like(r), shape]), v, std_errors,
                                    ("Vn", "Vini"), flags=flags)
    sub = _weighted_linear_fit(shape[:, None], v - fixed_vn, std_errors, ("Vini",))
    cov = np.zeros((2, 2))
    cov[1, 1] = sub.covariance[0, 0]
    return FitResult(("Vn", "Vini"), np.array([fixed_vn, sub.values[0]]),
                     np.array([0.0, sub.std_errors[0]]), cov, sub.residual_rms, sub.n_points,
                     flags + ("vn_fixed",))


def squeezing_db(v_tilde: float) -> float:
    if not v_tilde > 0:
        raise ValueError(f"normalized variance must be positive, got {v_tilde}")
    return 10 * math.log10(v_tilde)


def occupation_from_width(dv: float, params: PhysicalParams) -> float:
    """Occupation n from a velocity width, inverting dv = sqrt(hbar omega0 (n + 1/2) / m).

    Widths below the ground state give n < 0; this is returned as-is.
    """
    n = params.mass * dv**2 / (params.hbar * params.omega0) - 0.5
    if n < 0:
        logger.debug("width %.3g m/s is below the ground-state width (n=%.3f)", dv, n)
    return n
