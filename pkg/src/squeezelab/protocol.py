"""
The frequency-jump squeezing sequence and its closed-form predictions.

Sequence: at t=0 the trap intensity drops from I0 to I1 (omega0 -> omega1),
the particle evolves for a quarter period ``t1`` at omega1, the intensity is
restored and the particle is held at omega0 for ``hold = t2 - t1`` before the
trap is switched off for the time of flight.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from scipy.optimize import minimize_scalar

from .phasespace import GaussianState, PhysicalParams, evolve_harmonic, ground_state

__all__ = [
    "ProtocolSchedule",
    "AnalyticPrediction",
    "squeezing_parameter_from_intensity",
    "omega1_for",
    "canonical_schedule",
    "optimal_t1",
    "run_protocol",
    "analytic_variance",
    "velocity_fraction",
    "min_tof_for_fraction",
]


@dataclass(frozen=True)
class ProtocolSchedule:
    r: float
    omega1: float
    t1: float
    hold: float
    t_tof: float
    heating_enabled: bool = False

    def __post_init__(self):
        if min(self.t1, self.hold, self.t_tof) < 0:
            raise ValueError("schedule durations must be non-negative")
        if not self.omega1 > 0:
            raise ValueError("omega1 must be positive")

    def with_hold(self, hold: float) -> ProtocolSchedule:
        return ProtocolSchedule(self.r, self.omega1, self.t1, hold, self.t_tof, self.heating_enabled)


@dataclass(frozen=True)
class AnalyticPrediction:
    v_tilde: float
    v1_tilde: float
    v2_tilde: float
    velocity_fraction: float


def squeezing_parameter_from_intensity(i0: float, i1: float) -> float:
    """r = ln(I0/I1)/4, since the trap frequency scales as sqrt(intensity)."""
    if not (i0 > 0 and i1 > 0):
        raise ValueError("intensities must be positive")
    if i1 > i0:
        raise ValueError("intensity increase (i1 > i0) is not a squeezing drop")
    return math.log(i0 / i1) / 4


def omega1_for(r: float, omega0: float) -> float:
    return omega0 * math.exp(-2 * r)


def optimal_t1(initial: GaussianState, omega1: float, heating: bool = False) -> float:
    """Duration at omega1 that minimizes the momentum variance.

    Without heating and for an isotropic state this is exactly pi/(2 omega1).
    """
    quarter = math.pi / (2 * omega1)

    def pp(t):
        return evolve_harmonic(initial, omega1, t, heating=heating).cov[1, 1]

    res = minimize_scalar(pp, bounds=(0.5 * quarter, 1.5 * quarter), method="bounded",
                          options={"xatol": quarter * 1e-10})
    return float(res.x)


def canonical_schedule(
    params: PhysicalParams,
    r: float,
    n_half_periods: int = 0,
    *,
    heating: bool = False,
    t_tof: float | None = None,
    optimize_t1: bool = False,
    initial: GaussianState | None = None,
) -> ProtocolSchedule:
    """Schedule with omega1*t1 = pi/2 and omega0*hold = N*pi.

    ``optimize_t1`` replaces the quarter period by the numerically optimal
    duration for ``initial`` (defaults to the ground state), which only
    differs when heating is on.
    """
    if r < 0:
        raise ValueError(f"squeezing parameter must be non-negative, got {r}")
    if n_half_periods < 0:
        raise ValueError("number of half periods must be non-negative")
    omega1 = omega1_for(r, params.omega0)
    t1 = math.pi / (2 * omega1)
    if optimize_t1:
        t1 = optimal_t1(initial or ground_state(params), omega1, heating=heating)
    hold = n_half_periods * math.pi / params.omega0
    return ProtocolSchedule(
        r=r,
        omega1=omega1,
        t1=t1,
        hold=hold,
        t_tof=params.t_tof if t_tof is None else t_tof,
        heating_enabled=heating,
    )


def run_protocol(initial: GaussianState, schedule: ProtocolSchedule) -> GaussianState:
    """Propagate ``initial`` through the sequence up to the moment of release."""
    h = schedule.heating_enabled
    state = evolve_harmonic(initial, schedule.omega1, schedule.t1, heating=h)
    return evolve_harmonic(state, initial.params.omega0, schedule.hold, heating=h)


def velocity_fraction(r: float, omega_t_tof: float) -> float:
    """Share of the measured variance due to the velocity quadrature at a minimum."""
    vel = math.exp(-4 * r)
    pos = math.exp(4 * r) / omega_t_tof**2
    return vel / (vel + pos)


def analytic_variance(
    r: float, hold: float, params: PhysicalParams, v_ini: float
) -> AnalyticPrediction:
    """Normalized variance of the TOF velocity for an isotropic initial state.

    ``v_tilde`` keeps every term, including the cross term in sin(2 omega0 hold)
    that vanishes at integer half periods. ``v1_tilde``/``v2_tilde`` are the
    simplified extrema used by the cos^2/sin^2 fit model.
    """
    if not v_ini > 0:
        raise ValueError(f"initial variance must be positive, got {v_ini}")
    wt = params.omega_t_tof
    phi = params.omega0 * hold
    e4, em4 = math.exp(4 * r), math.exp(-4 * r)
    v = v_ini * (
        2 * math.cosh(4 * r) / wt**2
        - 2 * math.sin(2 * phi) * math.sinh(4 * r) / wt
        + e4 * math.sin(phi) ** 2
        + em4 * math.cos(phi) ** 2
    )
    v1 = v_ini * (em4 + e4 / wt**2)
    v2 = v_ini * (e4 + e4 / wt**2)
    return AnalyticPrediction(v, v1, v2, velocity_fraction(r, wt))


def min_tof_for_fraction(r: float, params: PhysicalParams, fraction: float) -> float:
    """Shortest time of flight for which ``velocity_fraction`` reaches ``fraction``."""
    if not 0 < fraction < 1:
        raise ValueError(f"fraction must lie in (0, 1), got {fraction}")
    return math.exp(4 * r) * math.sqrt(fraction / (1 - fraction)) / params.omega0
