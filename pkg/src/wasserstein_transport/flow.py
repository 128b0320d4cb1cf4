"""
Deterministic flows of circle diffeomorphisms driven by gradient velocities.

A curve of measures c_t = (X_t)_# (rho0 dx) is generated by the flow
dX_t = d/dx phi_t(X_t) dt. The Jacobian J_t = d/dx X_t is carried along as a
separate variational equation, and the pushed-forward density is recovered
from the transport identity rho_t(X_t) J_t = rho0.
"""
import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from src.wasserstein_transport.errors import DiffeomorphismError
from src.wasserstein_transport.torus_field import (
    GridField,
    LiftedMap,
    differentiate,
    grid,
    integrate,
    interpolate_values,
    invert_monotone,
    trapezoid,
)

logger = logging.getLogger(__name__)

DENSITY_FLOOR = 1e-12
JACOBIAN_FLOOR = 1e-10
MASS_TOL = 1e-8

TIME_PROFILES: Dict[str, Callable[[float], float]] = {
    "constant": lambda t: 1.0,
    "ramp": lambda t: t,
    "pulse": lambda t: math.sin(math.pi * t),
}


@dataclass(frozen=True, eq=False)
class VelocityPotential:
    """
    phi_t(x) = w(t) * (shift * x + sum_k a_k cos(kx) + b_k sin(kx)), k = 1..K.

    ``shift`` is a constant velocity (rigid rotation); ``profile`` names the
    continuous time weight w.
    """
    cos_coeffs: np.ndarray
    sin_coeffs: np.ndarray
    shift: float = 0.0
    profile: str = "constant"

    def __post_init__(self):
        a = np.atleast_1d(np.array(self.cos_coeffs, dtype=float))
        b = np.atleast_1d(np.array(self.sin_coeffs, dtype=float))
        size = max(a.size, b.size)
        a = np.pad(a, (0, size - a.size))
        b = np.pad(b, (0, size - b.size))
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b)) and math.isfinite(self.shift)):
            raise ValueError("VelocityPotential coefficients must be finite")
        if self.profile not in TIME_PROFILES:
            raise ValueError(f"Unknown time profile '{self.profile}'; choose from {sorted(TIME_PROFILES)}")
        object.__setattr__(self, "cos_coeffs", a)
        object.__setattr__(self, "sin_coeffs", b)

    @classmethod
    def zero(cls) -> "VelocityPotential":
        return cls([], [])

    @classmethod
    def rotation(cls, c: float) -> "VelocityPotential":
        return cls([], [], shift=c)

    @classmethod
    def from_grid(cls, psi: GridField, profile: str = "constant") -> "VelocityPotential":
        """Fourier coefficients of a band-limited field (mean and Nyquist mode dropped)."""
        coeffs = np.fft.rfft(psi.values) / psi.n
        return cls(2.0 * coeffs.real[1:-1], -2.0 * coeffs.imag[1:-1], profile=profile)

    @property
    def bandwidth(self) -> int:
        nonzero = np.flatnonzero((self.cos_coeffs != 0.0) | (self.sin_coeffs != 0.0))
        return int(nonzero[-1]) + 1 if nonzero.size else 0

    def scaled(self, factor: float) -> "VelocityPotential":
        return VelocityPotential(self.cos_coeffs * factor, self.sin_coeffs * factor,
                                 self.shift * factor, self.profile)

    def weight(self, t: float) -> float:
        return TIME_PROFILES[self.profile](t)

    def evaluate_at(self, t: float, x: np.ndarray, order: int) -> np.ndarray:
        """Spatial derivative of the given order (0..3) of phi_t at arbitrary points."""
        if order not in (0, 1, 2, 3):
            raise ValueError(f"order must be in 0..3, got {order}")
        x = np.asarray(x, dtype=float)
        w = self.weight(t)
        out = np.zeros_like(x)
        if order == 0:
            out += self.shift * x
        elif order == 1:
            out += self.shift
        k = np.arange(1, self.cos_coeffs.size + 1, dtype=float)
        if k.size:
            kx = x[..., None] * k
            c, s = np.cos(kx), np.sin(kx)
            a, b = self.cos_coeffs, self.sin_coeffs
            if order == 0:
                out += c @ a + s @ b
            elif order == 1:
                out += (c * (k * b) - s * (k * a)).sum(axis=-1)
            elif order == 2:
                out -= (c * (k ** 2 * a) + s * (k ** 2 * b)).sum(axis=-1)
            else:
                out += (s * (k ** 3 * a) - c * (k ** 3 * b)).sum(axis=-1)
        return w * out

    def evaluate(self, t: float, n: int) -> Tuple[GridField, GridField, GridField, GridField]:
        """phi_t, d phi_t, d2 phi_t, d3 phi_t on the n-point grid."""
        if self.bandwidth >= n // 2:
            raise ValueError(f"Potential bandwidth {self.bandwidth} is not below n/2 = {n // 2}")
        x = grid(n)
        phi = self.evaluate_at(t, x, 0) - self.weight(t) * self.shift * x
        return (GridField(phi),) + tuple(GridField(self.evaluate_at(t, x, order)) for order in (1, 2, 3))


def floor_and_normalize(values: np.ndarray, normalize: bool = True) -> np.ndarray:
    """
    Floor at DENSITY_FLOOR (with a warning) and rescale to unit mass. Rescaling
    can push floored nodes below the floor again, so they are floored once more;
    the mass then exceeds 1 by at most 2*pi*DENSITY_FLOOR.
    """
    values = np.array(values, dtype=float)
    low = values < DENSITY_FLOOR
    if np.any(low):
        logger.warning("Density floored at %.0e on %d of %d nodes", DENSITY_FLOOR, int(low.sum()), values.size)
        values[low] = DENSITY_FLOOR
        normalize = True
    if normalize:
        values /= trapezoid(values)
        np.maximum(values, DENSITY_FLOOR, out=values)
    return values


@dataclass(frozen=True, eq=False)
class Density:
    """Strictly positive probability density with respect to Lebesgue measure on [0, 2*pi)."""
    values: GridField

    def __post_init__(self):
        if not isinstance(self.values, GridField):
            object.__setattr__(self, "values", GridField(self.values))
        if np.min(self.values.values) < DENSITY_FLOOR:
            raise ValueError(f"Density must be >= {DENSITY_FLOOR} everywhere")
        mass = integrate(self.values)
        if abs(mass - 1.0) > MASS_TOL:
            raise ValueError(f"Density must have unit mass, got {mass:.12g}")

    @property
    def n(self) -> int:
        return self.values.n

    @property
    def array(self) -> np.ndarray:
        return self.values.values

    @classmethod
    def from_values(cls, values, normalize: bool = True) -> "Density":
        if isinstance(values, GridField):
            values = values.values
        return cls(GridField(floor_and_normalize(values, normalize)))

    @classmethod
    def uniform(cls, n: int) -> "Density":
        return cls(GridField.constant(1.0 / (2.0 * np.pi), n))

    @classmethod
    def from_fourier(cls, cos_coeffs: Sequence[float], sin_coeffs: Sequence[float], n: int) -> "Density":
        """Density proportional to 1 + sum_k a_k cos(kx) + b_k sin(kx)."""
        x = grid(n)
        values = np.ones(n)
        for k, a in enumerate(cos_coeffs, start=1):
            values += a * np.cos(k * x)
        for k, b in enumerate(sin_coeffs, start=1):
            values += b * np.sin(k * x)
        if np.min(values) <= 0.0:
            raise ValueError("Fourier density descriptor is not strictly positive")
        return cls.from_values(values)

    def log(self) -> GridField:
        return GridField(np.log(self.array))


@dataclass(frozen=True, eq=False)
class FlowState:
    """The flow map X_t (as a lift) and its Jacobian J_t = d/dx X_t."""
    t: float
    X: LiftedMap
    J: GridField

    def __post_init__(self):
        if self.X.n != self.J.n:
            raise ValueError(f"Grid sizes differ: X has {self.X.n}, J has {self.J.n}")
        if np.min(self.J.values) <= 0.0:
            raise DiffeomorphismError(f"Jacobian lost positivity at t={self.t:.6g}")

    @property
    def n(self) -> int:
        return self.X.n

    @classmethod
    def identity(cls, n: int, t: float = 0.0) -> "FlowState":
        return cls(t, LiftedMap.identity(n), GridField.constant(1.0, n))


def rk4_step(rhs: Callable[..., Tuple[np.ndarray, ...]], t: float,
             y: Tuple[np.ndarray, ...], dt: float) -> Tuple[np.ndarray, ...]:
    """Classical RK4 on a tuple of arrays."""
    k1 = rhs(t, *y)
    k2 = rhs(t + 0.5 * dt, *(a + 0.5 * dt * b for a, b in zip(y, k1)))
    k3 = rhs(t + 0.5 * dt, *(a + 0.5 * dt * b for a, b in zip(y, k2)))
    k4 = rhs(t + dt, *(a + dt * b for a, b in zip(y, k3)))
    return tuple(a + dt / 6.0 * (b1 + 2.0 * b2 + 2.0 * b3 + b4)
                 for a, b1, b2, b3, b4 in zip(y, k1, k2, k3, k4))


def flow_rhs(V: VelocityPotential) -> Callable[[float, np.ndarray, np.ndarray], Tuple[np.ndarray, np.ndarray]]:
    def rhs(t, X, J):
        return V.evaluate_at(t, X, 1), V.evaluate_at(t, X, 2) * J
    return rhs


def check_jacobian(J: np.ndarray, t: float) -> None:
    low = float(np.min(J))
    if low <= JACOBIAN_FLOOR:
        raise DiffeomorphismError(f"Jacobian underflow ({low:.3e}) at t={t:.6g}")


def advance_flow(state: FlowState, V: VelocityPotential, dt: float) -> FlowState:
    """One RK4 step of dX = d phi_t(X) dt, dJ = d2 phi_t(X) J dt."""
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    X, J = rk4_step(flow_rhs(V), state.t, (state.X.lift, state.J.values), dt)
    check_jacobian(J, state.t + dt)
    return FlowState(state.t + dt, LiftedMap(X), GridField(J))


def step_plan(t_start: float, t_end: float, dt: float) -> Tuple[int, float]:
    steps = max(1, int(math.ceil((t_end - t_start) / dt - 1e-9)))
    return steps, (t_end - t_start) / steps


def integrate_flow(V: VelocityPotential, n: int, t_end: float, dt: float,
                   state: FlowState = None) -> FlowState:
    """Advance from ``state`` (identity at t=0 by default) to t_end with equal steps <= dt."""
    state = FlowState.identity(n) if state is None else state
    if t_end <= state.t:
        return state
    steps, h = step_plan(state.t, t_end, dt)
    for _ in range(steps):
        state = advance_flow(state, V, h)
    return state


def flow_trajectory(V: VelocityPotential, n: int, t_end: float, dt: float) -> List[FlowState]:
    states = [FlowState.identity(n)]
    steps, h = step_plan(0.0, t_end, dt)
    for _ in range(steps):
        states.append(advance_flow(states[-1], V, h))
    return states


def push_density(rho0: Density, state: FlowState, method: str = "spectral") -> Density:
    """
    rho_t on the uniform grid: rho_t(X_t(x_j)) = rho0(x_j) / J(x_j), resampled through X_t^{-1}.
    """
    if rho0.n != state.n:
        raise ValueError(f"Grid sizes differ: density has {rho0.n}, flow has {state.n}")
    inverse = invert_monotone(state.X)
    values = interpolate_values(rho0.array / state.J.values, inverse.lift, method)
    mass = trapezoid(values)
    if abs(mass - 1.0) > MASS_TOL:
        logger.warning("Pushed density has mass %.12g; renormalizing", mass)
        return Density.from_values(values, normalize=True)
    return Density.from_values(values, normalize=False)


def inverse_jacobian_density(state: FlowState) -> GridField:
    """K_t, the density of (X_t^{-1})_# dx; on the circle it is J_t on the original grid."""
    return GridField(state.J.values)


def jacobian_consistency_gap(state: FlowState) -> float:
    """Max gap between the variational J and the spectral derivative of the lift."""
    return float(np.max(np.abs(state.X.jacobian().values - state.J.values)))


def continuity_residual(V: VelocityPotential, rho0: Density, psi: GridField,
                        t: float, h: float, dt: float) -> float:
    """|d/dt int psi rho_t dx - int psi' phi_t' rho_t dx| with a centered difference in t."""
    if t - h < 0.0:
        raise ValueError("t - h must be non-negative")
    n = rho0.n

    def pairing(tt: float) -> float:
        return integrate(psi * push_density(rho0, integrate_flow(V, n, tt, dt)).values)

    lhs = (pairing(t + h) - pairing(t - h)) / (2.0 * h)
    rho_t = push_density(rho0, integrate_flow(V, n, t, dt))
    _, velocity, _, _ = V.evaluate(t, n)
    rhs = integrate(differentiate(psi) * velocity * rho_t.values)
    return abs(lhs - rhs)


def trajectory_rows(states: Sequence[FlowState]) -> List[Tuple[float, float, float, float]]:
    """Rows (t, x_j, X_t(x_j), J_t(x_j)) for CSV export."""
    rows = []
    for state in states:
        for x, X, J in zip(grid(state.n), state.X.lift, state.J.values):
            rows.append((state.t, float(x), float(X), float(J)))
    return rows
