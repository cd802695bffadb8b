"""
Gaussian motional state of a single trapped mode and its exact propagation.

States live in a fixed frame normalized to the unperturbed trap frequency
``omega0``: position in units of ``sqrt(hbar/2 m omega0)`` and momentum in
units of ``sqrt(hbar m omega0/2)``. The motional ground state has identity
covariance in this frame, and the momentum variance equals the velocity
variance divided by ``V0 = hbar omega0 / 2m``.

Every operation returns a new state; nothing is mutated in place.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np
from scipy.constants import hbar as HBAR

__all__ = [
    "HBAR",
    "PhysicalParams",
    "GaussianState",
    "NormalizedVariance",
    "ground_state",
    "thermal_state",
    "harmonic_map",
    "heating_increment",
    "evolve_harmonic",
    "free_flight",
    "add_heating",
    "displace",
    "normalized_velocity_variance",
]


@dataclass(frozen=True)
class PhysicalParams:
    """Particle and trap constants. Defaults are those of the squeezing run."""

    mass: float = 2.4e-17
    omega0: float = 2 * math.pi * 252e3
    t_tof: float = 51e-6
    gamma_qba: float = 2 * math.pi * 2.1e3
    gamma_bg: float = 2 * math.pi * 0.10e3
    hbar: float = HBAR

    def __post_init__(self):
        if not self.mass > 0:
            raise ValueError(f"mass must be positive, got {self.mass}")
        if not self.omega0 > 0:
            raise ValueError(f"omega0 must be positive, got {self.omega0}")
        if not self.t_tof > 0:
            raise ValueError(f"t_tof must be positive, got {self.t_tof}")
        if self.gamma_qba < 0 or self.gamma_bg < 0:
            raise ValueError("decoherence rates must be non-negative")

    @property
    def gamma_total(self) -> float:
        return self.gamma_qba + self.gamma_bg

    @property
    def position_scale(self) -> float:
        """Ground-state position spread sqrt(hbar / 2 m omega0) in metres."""
        return math.sqrt(self.hbar / (2 * self.mass * self.omega0))

    @property
    def velocity_scale(self) -> float:
        """Ground-state velocity spread sqrt(hbar omega0 / 2 m) in m/s."""
        return math.sqrt(self.hbar * self.omega0 / (2 * self.mass))

    @property
    def v0(self) -> float:
        """Ground-state velocity variance hbar omega0 / 2m in m^2/s^2."""
        return self.hbar * self.omega0 / (2 * self.mass)

    @property
    def omega_t_tof(self) -> float:
        return self.omega0 * self.t_tof


def _as_cov(cov) -> np.ndarray:
    cov = np.array(cov, dtype=float)
    if cov.shape != (2, 2):
        raise ValueError(f"covariance must be 2x2, got shape {cov.shape}")
    # Exact symmetry by construction.
    return 0.5 * (cov + cov.T)


def _congruence(m: np.ndarray, c: np.ndarray) -> np.ndarray:
    """M C M^T with each entry correctly rounded.

    Exact rational arithmetic on the float inputs; plain float products
    lose ~eps * c00 c11 / det of the determinant on stretched states.
    """
    mf = [[Fraction(float(x)) for x in row] for row in m]
    cf = [[Fraction(float(x)) for x in row] for row in c]
    mc = [[mf[i][0] * cf[0][j] + mf[i][1] * cf[1][j] for j in range(2)] for i in range(2)]
    return np.array([[float(mc[i][0] * mf[j][0] + mc[i][1] * mf[j][1]) for j in range(2)] for i in range(2)])


@dataclass(frozen=True)
class GaussianState:
    """Mean and covariance of (position, momentum) in the omega0 frame."""

    mean: np.ndarray
    cov: np.ndarray
    params: PhysicalParams = field(default_factory=PhysicalParams)

    def __post_init__(self):
        mean = np.array(self.mean, dtype=float).reshape(2)
        cov = _as_cov(self.cov)
        if np.linalg.eigvalsh(cov)[0] <= 0:
            raise ValueError("covariance must be positive definite")
        mean.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def det(self) -> float:
        c = self.cov
        # Exact 2x2 form of the stored entries, rounded once; c00 c11 - c01^2 cancels on stretched states.
        f = [Fraction(float(x)) for x in (c[0, 0], c[1, 1], c[0, 1], c[1, 0])]
        return float(f[0] * f[1] - f[2] * f[3])

    def transformed(self, matrix: np.ndarray, added_cov=None) -> GaussianState:
        """Apply a linear phase-space map (plus optional diffusion)."""
        cov = _congruence(np.asarray(matrix, dtype=float), self.cov)
        if added_cov is not None:
            cov = cov + added_cov
        return replace(self, mean=matrix @ self.mean, cov=cov)

    def physical_mean(self) -> tuple[float, float]:
        """Mean (z [m], v [m/s])."""
        return (
            float(self.mean[0] * self.params.position_scale),
            float(self.mean[1] * self.params.velocity_scale),
        )


@dataclass(frozen=True)
class NormalizedVariance:
    value: float
    std_error: float = 0.0

    def __post_init__(self):
        if not self.value > 0:
            raise ValueError(f"normalized variance must be positive, got {self.value}")

    @property
    def is_squeezed(self) -> bool:
        return self.value < 1.0


def ground_state(params: PhysicalParams | None = None) -> GaussianState:
    params = params or PhysicalParams()
    return GaussianState(np.zeros(2), np.eye(2), params)


def thermal_state(params: PhysicalParams | None = None, n: float = 0.0) -> GaussianState:
    """Thermal state with mean occupation ``n``: covariance (2n+1) * identity."""
    if n < 0:
        raise ValueError(f"occupation number must be non-negative, got {n}")
    params = params or PhysicalParams()
    return GaussianState(np.zeros(2), (2 * n + 1) * np.eye(2), params)


def harmonic_map(omega: float, dt: float, omega0: float) -> np.ndarray:
    """Phase-space map of a harmonic trap at ``omega`` expressed in the omega0 frame."""
    if not omega > 0:
        raise ValueError(f"trap frequency must be positive, got {omega}")
    if dt < 0:
        raise ValueError(f"duration must be non-negative, got {dt}")
    theta = omega * dt
    c, s = math.cos(theta), math.sin(theta)
    k = omega0 / omega
    return np.array([[c, k * s], [-s / k, c]])


def heating_increment(omega: float, dt: float, omega0: float, gamma: float) -> np.ndarray:
    """Covariance added by isotropic diffusion 2*gamma while evolving at ``omega``.

    This is the exact integral of M(s) (2 gamma I) M(s)^T over the segment, so
    diffusion and rotation commute correctly even when omega != omega0.
    """
    if gamma == 0 or dt == 0:
        return np.zeros((2, 2))
    theta = omega * dt
    k = omega0 / omega
    s2 = math.sin(2 * theta) / (4 * omega)
    int_cc = dt / 2 + s2
    int_ss = dt / 2 - s2
    int_cs = math.sin(theta) ** 2 / (2 * omega)
    zz = int_cc + k * k * int_ss
    pp = int_ss / (k * k) + int_cc
    zp = (k - 1 / k) * int_cs
    return 2 * gamma * np.array([[zz, zp], [zp, pp]])


def evolve_harmonic(
    state: GaussianState, omega: float, dt: float, heating: bool = False
) -> GaussianState:
    """Evolve for ``dt`` in a harmonic trap of angular frequency ``omega``.

    With ``heating`` the state also diffuses at rate 2*(gamma_qba + gamma_bg)
    per quadrature (in omega0 units) throughout the segment.
    """
    p = state.params
    m = harmonic_map(omega, dt, p.omega0)
    added = heating_increment(omega, dt, p.omega0, p.gamma_total) if heating else None
    return state.transformed(m, added)


def free_flight(state: GaussianState, dt: float) -> GaussianState:
    """Ballistic expansion with the trap off: z -> z + omega0*dt*p."""
    if dt < 0:
        raise ValueError(f"duration must be non-negative, got {dt}")
    m = np.array([[1.0, state.params.omega0 * dt], [0.0, 1.0]])
    return state.transformed(m)


def add_heating(state: GaussianState, dt: float) -> GaussianState:
    """Isotropic diffusion for ``dt`` without any coherent evolution."""
    if dt < 0:
        raise ValueError(f"duration must be non-negative, got {dt}")
    inc = 2 * state.params.gamma_total * dt
    return replace(state, cov=state.cov + inc * np.eye(2))


def displace(state: GaussianState, dz: float = 0.0, dv: float = 0.0) -> GaussianState:
    """Shift the mean by a physical displacement ``dz`` [m] and velocity ``dv`` [m/s]."""
    p = state.params
    shift = np.array([dz / p.position_scale, dv / p.velocity_scale])
    return replace(state, mean=state.mean + shift)


def normalized_velocity_variance(state: GaussianState) -> NormalizedVariance:
    return NormalizedVariance(float(state.cov[1, 1]))
