"""
Deterministic parallel translation along regular curves c_t = (X_t)_# (rho0 dx).

The Eulerian field g_t is pulled back to f_t = g_t(X_t), which solves the
globally Lipschitz linear ODE

    df/dt = Lambda(t, f) = -(int f a_t rho0 dx) * rho_hat_t(X_t),
    a_t = (phi_t'' / rho_t)(X_t).

f is advanced by RK4 together with the flow; g_t is materialized only at output
times.
"""
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple, Union

import numpy as np

from src.wasserstein_transport.flow import (
    Density,
    FlowState,
    VelocityPotential,
    check_jacobian,
    push_density,
    rk4_step,
    step_plan,
)
from src.wasserstein_transport.tangent import (
    TANGENT_TOL,
    TangentField,
    complement,
    hat_density,
    project,
    witten_laplacian,
)
from src.wasserstein_transport.torus_field import (
    GridField,
    LiftedMap,
    compose,
    differentiate,
    integrate,
    interpolate_values,
    invert_monotone,
    trapezoid,
)

logger = logging.getLogger(__name__)

TIME_MATCH_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class LagrangianField:
    """f_t = g_t(X_t), an element of L^2(rho0 dx)."""
    values: GridField

    def norm(self, rho0: Density) -> float:
        return float(np.sqrt(integrate(self.values * self.values * rho0.values)))


@dataclass(frozen=True, eq=False)
class TransportContext:
    """Everything Lambda needs at time t; rho_t is optional (recovered from J when absent)."""
    V: VelocityPotential
    rho0: Density
    flow: FlowState
    rho_t: Optional[Density] = None


def lagrangian_lambda(v2_at_X: np.ndarray, J: np.ndarray, rho0: np.ndarray, f: np.ndarray) -> np.ndarray:
    """
    Lambda evaluated through rho_t(X_t) = rho0 / J.

    Works on (n,) arrays or on path batches (paths, n).
    """
    ratio = np.asarray(trapezoid(f * v2_at_X * J) / trapezoid(J ** 2 / rho0))
    return -ratio[..., None] * J / rho0


def lambda_det(t: float, f: LagrangianField, ctx: TransportContext) -> LagrangianField:
    X = ctx.flow.X.lift
    v2 = ctx.V.evaluate_at(t, X, 2)
    if ctx.rho_t is None:
        values = lagrangian_lambda(v2, ctx.flow.J.values, ctx.rho0.array, f.values.values)
        return LagrangianField(GridField(values))
    # Eulerian route: interpolate rho_t and rho_hat_t at X_t
    rho_at_X = interpolate_values(ctx.rho_t.array, X)
    hat_at_X = interpolate_values(hat_density(ctx.rho_t).values, X)
    weight = integrate(f.values * (v2 / rho_at_X) * ctx.rho0.values)
    return LagrangianField(GridField(-weight * hat_at_X))


def lipschitz_ratio(t: float, f: LagrangianField, ctx: TransportContext) -> float:
    """||Lambda(t, f)|| / (sup |phi_t''| * ||f||), at most one."""
    v2 = ctx.V.evaluate_at(t, ctx.flow.X.lift, 2)
    bound = float(np.max(np.abs(v2))) * f.norm(ctx.rho0)
    if bound == 0.0:
        return 0.0
    return lambda_det(t, f, ctx).norm(ctx.rho0) / bound


@dataclass
class TransportTrajectory:
    times: List[float] = field(default_factory=list)
    f: List[LagrangianField] = field(default_factory=list)
    g: List[TangentField] = field(default_factory=list)
    rho: List[Density] = field(default_factory=list)
    flows: List[FlowState] = field(default_factory=list)
    norms: List[float] = field(default_factory=list)
    means: List[float] = field(default_factory=list)
    lagrangian_norms: List[float] = field(default_factory=list)

    @property
    def norm_drift_rel(self) -> float:
        norms = np.asarray(self.norms)
        scale = norms[0] if norms[0] > 0.0 else 1.0
        return float(np.max(np.abs(norms - norms[0])) / scale)

    @property
    def max_abs_mean_g(self) -> float:
        return float(np.max(np.abs(self.means)))

    def index_of(self, t: float) -> int:
        times = np.asarray(self.times)
        idx = int(np.argmin(np.abs(times - t)))
        if abs(times[idx] - t) > TIME_MATCH_TOL:
            raise ValueError(f"t={t} is not a stored time in [{times[0]}, {times[-1]}]")
        return idx

    def rows(self) -> List[Tuple[float, float, float]]:
        return list(zip(self.times, self.norms, self.means))


def _record(traj: TransportTrajectory, t: float, X: np.ndarray, J: np.ndarray,
            f: np.ndarray, rho0: Density, method: str) -> None:
    flow = FlowState(t, LiftedMap(X), GridField(J))
    rho_t = push_density(rho0, flow, method)
    g = compose(GridField(f), invert_monotone(flow.X), method)
    traj.times.append(t)
    traj.f.append(LagrangianField(GridField(f)))
    traj.g.append(TangentField(g))
    traj.rho.append(rho_t)
    traj.flows.append(flow)
    traj.norms.append(integrate(g * g * rho_t.values))
    traj.means.append(integrate(g))
    traj.lagrangian_norms.append(trapezoid(f ** 2 * rho0.array))


def integrate_parallel_det(g0: Union[TangentField, GridField], V: VelocityPotential, rho0: Density,
                           dt: float, t_end: float = 1.0, output_every: Optional[int] = None,
                           method: str = "spectral") -> TransportTrajectory:
    """
    Parallel translation of g0 along the curve generated by V, started at rho0.

    RK4 advances (X, J, f) as one system; outputs are stored every
    ``output_every`` steps (about ten outputs by default) and at the end.
    """
    g0 = g0.values if isinstance(g0, TangentField) else g0
    if abs(integrate(g0)) > TANGENT_TOL:
        raise ValueError("Initial field must have zero mean to be tangent")
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    n = rho0.n
    steps, h = step_plan(0.0, t_end, dt)
    output_every = max(1, steps // 10) if output_every is None else output_every
    rho0_values = rho0.array

    def rhs(t, X, J, f):
        v2 = V.evaluate_at(t, X, 2)
        return V.evaluate_at(t, X, 1), v2 * J, lagrangian_lambda(v2, J, rho0_values, f)

    X, J, f = LiftedMap.identity(n).lift, np.ones(n), np.array(g0.values)
    traj = TransportTrajectory()
    _record(traj, 0.0, X, J, f, rho0, method)
    for step in range(1, steps + 1):
        t = (step - 1) * h
        X, J, f = rk4_step(rhs, t, (X, J, f), h)
        check_jacobian(J, t + h)
        if step % output_every == 0 or step == steps:
            _record(traj, step * h, X, J, f, rho0, method)
    logger.info("Deterministic transport: %d steps, relative norm drift %.3e",
                steps, traj.norm_drift_rel)
    return traj


def _test_pairing(test: GridField, X: np.ndarray, f: LagrangianField, rho0: Density) -> float:
    return trapezoid(interpolate_values(test.values, X) * f.values.values * rho0.array)


def weak_form_residual(traj: TransportTrajectory, V: VelocityPotential, testfn: GridField,
                       t: float, h: float) -> float:
    """
    |d/dt int f' g_t rho_t dx - int f'' phi_t' g_t rho_t dx| with f = testfn,
    the time derivative taken by centered differences over stored times.
    """
    i_minus, i, i_plus = traj.index_of(t - h), traj.index_of(t), traj.index_of(t + h)
    d1, d2 = differentiate(testfn), differentiate(testfn, 2)
    lhs = (_test_pairing(d1, traj.flows[i_plus].X.lift, traj.f[i_plus], traj.rho[0])
           - _test_pairing(d1, traj.flows[i_minus].X.lift, traj.f[i_minus], traj.rho[0])) / (2.0 * h)
    X = traj.flows[i].X.lift
    weights = V.evaluate_at(t, X, 1) * traj.f[i].values.values
    rhs = trapezoid(interpolate_values(d2.values, X) * weights * traj.rho[0].array)
    return abs(lhs - rhs)


def directional_pairing_residual(traj: TransportTrajectory, V: VelocityPotential, Z: GridField,
                                 t: float, h: float) -> float:
    """
    d/dt int Z g_t rho_t dx against
    -int (Delta phi_t) Pi_perp Z g_t rho_t dx + int phi_t' (Pi Z)' g_t rho_t dx.
    """
    i_minus, i, i_plus = traj.index_of(t - h), traj.index_of(t), traj.index_of(t + h)
    rho0 = traj.rho[0]
    lhs = (_test_pairing(Z, traj.flows[i_plus].X.lift, traj.f[i_plus], rho0)
           - _test_pairing(Z, traj.flows[i_minus].X.lift, traj.f[i_minus], rho0)) / (2.0 * h)
    rho_t, g = traj.rho[i], traj.g[i].values
    phi, velocity, _, _ = V.evaluate(t, rho_t.n)
    laplacian = witten_laplacian(rho_t, phi) + differentiate(rho_t.log()) * (V.weight(t) * V.shift)
    first = -integrate(laplacian * complement(rho_t, Z) * g * rho_t.values)
    second = integrate(velocity * differentiate(project(rho_t, Z).values) * g * rho_t.values)
    return abs(lhs - (first + second))
