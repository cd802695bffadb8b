"""
Monte Carlo time-of-flight measurements and synthetic photodetector traces.

A trial draws a (z, v) sample from the Wigner distribution of the state at
release, lets it fly ballistically for ``t_tof``, and records the amplitude of
the oscillation once the particle is recaptured in the omega0 trap. The sign of
the displacement is recovered from the oscillation phase, so the measured
velocity of a trial is ``sign(z_f) * amplitude / t_tof``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import signal

from .phasespace import GaussianState, PhysicalParams
from .protocol import ProtocolSchedule, run_protocol
from .seeding import counter_normals, trial_generator, trial_seeds

__all__ = [
    "NoiseSpec",
    "Trace",
    "TofTrial",
    "TofEnsemble",
    "sample_release",
    "release_samples",
    "recapture_amplitude",
    "recapture_variance",
    "run_tof_trial",
    "synthesize_trace",
    "ensemble",
]

FILTER_CENTER_HZ = 253e3
FILTER_BANDWIDTH_HZ = 20e3
# Columns of the per-trial normal stream.
_COL_Z, _COL_V, _COL_JITTER = 0, 1, 2
_N_COLS = 3


@dataclass(frozen=True)
class NoiseSpec:
    """Technical noise and acquisition settings of the TOF readout.

    ``lattice_jitter_variance`` is a hold-independent velocity noise in units
    of V0; it adds directly to the measured normalized variance.
    """

    detector_noise_density: float = 0.0
    sample_rate: float = 3.2e6
    trace_duration: float = 1e-3
    lattice_jitter_variance: float = 0.0
    drift_velocity: float = 0.0
    calibration: float = 1e9
    flicker_density: float = 0.0
    synthesize_traces: bool = False
    highpass: bool = False

    def __post_init__(self):
        nyquist_min = 2 * (FILTER_CENTER_HZ + FILTER_BANDWIDTH_HZ)
        if self.sample_rate <= nyquist_min:
            raise ValueError(
                f"sample_rate {self.sample_rate:g} Hz must exceed {nyquist_min:g} Hz"
            )
        if self.trace_duration <= 0:
            raise ValueError("trace_duration must be positive")
        if min(self.detector_noise_density, self.lattice_jitter_variance, self.flicker_density) < 0:
            raise ValueError("noise levels must be non-negative")
        if not self.calibration > 0:
            raise ValueError("calibration must be positive")


@dataclass(frozen=True)
class Trace:
    sample_rate: float
    signal: np.ndarray

    @property
    def t(self) -> np.ndarray:
        return np.arange(self.signal.size) / self.sample_rate

    def to_csv(self, path: str | Path | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t_seconds", "signal"])
        for ti, si in zip(self.t, self.signal):
            w.writerow([repr(float(ti)), repr(float(si))])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text


@dataclass(frozen=True)
class TofTrial:
    seed: int
    release_state_sample: tuple[float, float]
    recapture_amplitude: float
    phase: float
    velocity: float
    final_sample: tuple[float, float]
    trace: Trace | None = None


@dataclass(frozen=True)
class TofEnsemble:
    """Outcome of ``n_trials`` independent TOF cycles (arrays indexed by trial)."""

    master_seed: int
    schedule: ProtocolSchedule | None
    params: PhysicalParams
    seeds: np.ndarray
    z_release: np.ndarray
    v_release: np.ndarray
    z_final: np.ndarray
    v_final: np.ndarray
    amplitude: np.ndarray
    phase: np.ndarray
    velocity: np.ndarray
    traces: list[Trace] | None = None
    offset: int = 0

    @property
    def n_trials(self) -> int:
        return int(self.seeds.size)

    @property
    def trials(self) -> list[TofTrial]:
        out = []
        for i in range(self.n_trials):
            out.append(
                TofTrial(
                    seed=int(self.seeds[i]),
                    release_state_sample=(float(self.z_release[i]), float(self.v_release[i])),
                    recapture_amplitude=float(self.amplitude[i]),
                    phase=float(self.phase[i]),
                    velocity=float(self.velocity[i]),
                    final_sample=(float(self.z_final[i]), float(self.v_final[i])),
                    trace=None if self.traces is None else self.traces[i],
                )
            )
        return out

    def normalized_variance(self) -> float:
        """Sample variance of the measured velocity in units of V0."""
        return float(np.var(self.velocity, ddof=1) / self.params.v0)

    def to_csv(self, path: str | Path | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["trial", "seed", "amplitude_m", "velocity_m_per_s"])
        for i in range(self.n_trials):
            w.writerow([self.offset + i, int(self.seeds[i]), repr(float(self.amplitude[i])),
                        repr(float(self.velocity[i]))])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text


def release_samples(state: GaussianState, normals: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Map standard normal pairs (n, 2) to physical (z [m], v [m/s]) samples of ``state``."""
    # Eigen-decomposition rather than Cholesky: stays defined as cov -> 0.
    w, u = np.linalg.eigh(state.cov)
    root = u * np.sqrt(np.clip(w, 0, None))
    x = state.mean + normals @ root.T
    p = state.params
    return x[:, 0] * p.position_scale, x[:, 1] * p.velocity_scale


def sample_release(state: GaussianState, rng: np.random.Generator | int) -> tuple[float, float]:
    """One (z, v) draw from the state; an integer ``rng`` is treated as a trial seed."""
    if isinstance(rng, (int, np.integer)):
        normals = counter_normals(np.array([rng], dtype=np.uint64), 2)
    else:
        normals = rng.standard_normal((1, 2))
    z, v = release_samples(state, normals)
    return float(z[0]), float(v[0])


def recapture_amplitude(z: np.ndarray, v: np.ndarray, omega0: float) -> np.ndarray:
    return np.sqrt(z**2 + (v / omega0) ** 2)


def recapture_variance(state_after_flight: GaussianState) -> float:
    """Expected squared recapture amplitude, as a velocity variance in units of V0.

    This is the exact quantity whose trial-average the TOF ensemble estimates:
    <z^2 + (v/omega0)^2> / t_tof^2 / V0 for a zero-mean state.
    """
    p = state_after_flight.params
    c = state_after_flight.cov
    return float((c[0, 0] + c[1, 1]) / p.omega_t_tof**2)


def synthesize_trace(
    amplitude: float,
    phase: float,
    params: PhysicalParams,
    noise: NoiseSpec,
    seed: int | np.random.Generator,
) -> Trace:
    """Photodetector record of the recaptured oscillation plus detector noise."""
    if amplitude < 0:
        raise ValueError("amplitude must be non-negative")
    rng = seed if isinstance(seed, np.random.Generator) else trial_generator(seed)
    fs = noise.sample_rate
    n = int(round(noise.trace_duration * fs))
    t = np.arange(n) / fs
    y = noise.calibration * amplitude * np.sin(params.omega0 * t + phase)
    if noise.detector_noise_density > 0:
        y = y + rng.normal(0.0, noise.detector_noise_density * math.sqrt(fs / 2), n)
    if noise.flicker_density > 0:
        y = y + _flicker(n, fs, noise.flicker_density, rng)
    if noise.highpass:
        y = _analog_highpass(y, fs)
    return Trace(fs, y)


def _flicker(n: int, fs: float, density_at_1khz: float, rng: np.random.Generator) -> np.ndarray:
    # 1/f power spectrum, amplitude density ``density_at_1khz`` at 1 kHz, shaped in frequency domain.
    f = np.fft.rfftfreq(n, 1 / fs)
    shape = np.zeros_like(f)
    shape[1:] = np.sqrt(1e3 / f[1:])
    white = np.fft.rfft(rng.normal(0.0, density_at_1khz * math.sqrt(fs / 2), n))
    return np.fft.irfft(white * shape, n)


def _analog_highpass(y: np.ndarray, fs: float) -> np.ndarray:
    # Two fourth-order high-pass stages at 105 kHz and 150 kHz, as in the acquisition chain.
    for fc in (105e3, 150e3):
        sos = signal.butter(4, fc, btype="highpass", fs=fs, output="sos")
        y = signal.sosfilt(sos, y)
    return y


def _release_state(state: GaussianState, schedule: ProtocolSchedule | None) -> GaussianState:
    return state if schedule is None else run_protocol(state, schedule)


def _simulate(release: GaussianState, t_tof: float, noise: NoiseSpec, seeds: np.ndarray):
    p = release.params
    normals = counter_normals(seeds, _N_COLS)
    z0, v0 = release_samples(release, normals[:, [_COL_Z, _COL_V]])
    zf = z0 + v0 * t_tof + noise.drift_velocity * t_tof
    if noise.lattice_jitter_variance > 0:
        kick = normals[:, _COL_JITTER] * math.sqrt(noise.lattice_jitter_variance * p.v0)
        zf = zf + kick * t_tof
    vf = v0
    amp = recapture_amplitude(zf, vf, p.omega0)
    phase = np.mod(np.arctan2(zf, vf / p.omega0), 2 * np.pi)
    vel = np.where(zf < 0, -amp, amp) / t_tof if t_tof > 0 else np.zeros_like(amp)
    return z0, v0, zf, vf, amp, phase, vel


def run_tof_trial(
    state: GaussianState,
    schedule: ProtocolSchedule | None,
    noise: NoiseSpec,
    seed: int,
) -> TofTrial:
    """Single TOF cycle. ``state`` is the state before the protocol; ``schedule=None`` releases it directly."""
    release = _release_state(state, schedule)
    t_tof = state.params.t_tof if schedule is None else schedule.t_tof
    seeds = np.array([seed], dtype=np.uint64)
    z0, v0, zf, vf, amp, phase, vel = _simulate(release, t_tof, noise, seeds)
    trace = None
    if noise.synthesize_traces:
        trace = synthesize_trace(float(amp[0]), float(phase[0]), state.params, noise, int(seed))
    return TofTrial(
        seed=int(seed),
        release_state_sample=(float(z0[0]), float(v0[0])),
        recapture_amplitude=float(amp[0]),
        phase=float(phase[0]),
        velocity=float(vel[0]),
        final_sample=(float(zf[0]), float(vf[0])),
        trace=trace,
    )


def ensemble(
    state: GaussianState,
    schedule: ProtocolSchedule | None,
    noise: NoiseSpec | None = None,
    n_trials: int = 300,
    master_seed: int = 0,
    *,
    offset: int = 0,
    chunk_size: int | None = None,
) -> TofEnsemble:
    """``n_trials`` TOF cycles; trial ``offset + i`` is seeded from ``master_seed`` in counter mode.

    ``chunk_size`` only changes how the work is batched, never the result.
    """
    if n_trials < 1:
        raise ValueError("n_trials must be at least 1")
    noise = noise or NoiseSpec()
    release = _release_state(state, schedule)
    t_tof = state.params.t_tof if schedule is None else schedule.t_tof
    seeds = trial_seeds(master_seed, n_trials, offset)
    step = chunk_size or n_trials
    parts = [_simulate(release, t_tof, noise, seeds[i:i + step]) for i in range(0, n_trials, step)]
    cols = [np.concatenate(c) for c in zip(*parts)]
    traces = None
    if noise.synthesize_traces:
        traces = [synthesize_trace(float(a), float(ph), state.params, noise, int(s))
                  for a, ph, s in zip(cols[4], cols[5], seeds)]
    return TofEnsemble(master_seed, schedule, state.params, seeds, *cols, traces=traces, offset=offset)
