"""
Stochastic parallel translation along mu_t = (X_t)_# (rho0 dx).

In Lagrangian form f_t = g_t(X_t) solves a linear SDE on L^2(rho0 dx):

    df = sum_c alpha_c^-1 Lambda_c(f) o dB^c                          (Stratonovich)
       = sum_c alpha_c^-1 Lambda_c(f) dB^c + sum_c (2 alpha_c^2)^-1 Theta_c(f) dt   (Ito)

with, writing rho_hat = rho_hat_t(X_t), v_c = d phi_c,

    Lambda_c(f) = -A_c rho_hat,                 A_c = int f a_c rho0 dx,
    Theta_c(f)  = -A_c v_c'(X) rho_hat - B_c rho_hat + 3 A_c D_c rho_hat,
    B_c = int f b_c rho0 dx,  D_c = int phi_c'' rho_hat_t dx.

Everything is evaluated through rho_t(X_t) = rho0 / J, so no Eulerian
resampling is needed while stepping.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.wasserstein_transport.analysis import ConvergenceReport, build_report, map_path_chunks
from src.wasserstein_transport.flow import Density, FlowState
from src.wasserstein_transport.stochastic_flow import (
    SCHEMES,
    BrownianDriver,
    NoiseBasis,
    StochFlowState,
    _scaled_increments,
    check_levels,
    flow_step,
    noise_combination,
    sample_driver,
)
from src.wasserstein_transport.tangent import TANGENT_TOL, TangentField, hat_density
from src.wasserstein_transport.torus_field import (
    GridField,
    differentiate,
    integrate,
    invert_lifts,
    trapezoid,
    trig_interpolate,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class DriftCoefficients:
    """
    a_c = (phi_c''/rho_t)(X_t) and b_c = ((phi_c'' phi_c')'/rho_t)(X_t),
    arrays of shape (channels, paths, n).
    """
    a: np.ndarray
    b: np.ndarray

    def channel(self, c: int, path: int = 0) -> Tuple[GridField, GridField]:
        return GridField(self.a[c, path]), GridField(self.b[c, path])


def _as_batch(state: Union[StochFlowState, FlowState]) -> Tuple[np.ndarray, np.ndarray]:
    if isinstance(state, FlowState):
        return state.X.lift[None, :], state.J.values[None, :]
    return state.X, state.J


def drift_coefficients(basis: NoiseBasis, flow_state: Union[StochFlowState, FlowState],
                       rho0: Density) -> DriftCoefficients:
    """a and b per active channel; rho_t(X_t) is taken as rho0 / J."""
    X, J = _as_batch(flow_state)
    F = basis.fields(X)
    scale = J / rho0.array
    return DriftCoefficients(F.dv * scale, F.dvv * scale)


def hat_at_flow(J: np.ndarray, rho0: np.ndarray) -> np.ndarray:
    """rho_hat_t(X_t) = J / ((int J^2/rho0 dx) rho0) for (paths, n) arrays."""
    C = trapezoid(J ** 2 / rho0)
    return J / (np.asarray(C)[..., None] * rho0)


def lambda_theta(k: int, f: GridField, coeffs: DriftCoefficients,
                 rho0: Density, flow_state: Union[StochFlowState, FlowState],
                 path: int = 0) -> Tuple[GridField, GridField]:
    """Lambda and Theta of one channel (position k among the active channels) for one path."""
    _, J = _as_batch(flow_state)
    J = J[path]
    rho0_values = rho0.array
    a, b = coeffs.a[k, path], coeffs.b[k, path]
    C = trapezoid(J ** 2 / rho0_values)
    hat = J / (C * rho0_values)
    v2 = a * rho0_values / J
    f_values = f.values
    A = trapezoid(f_values * a * rho0_values)
    B = trapezoid(f_values * b * rho0_values)
    D = trapezoid(a * J) / C
    lam = -A * hat
    theta = (-A * v2 - B + 3.0 * A * D) * hat
    return GridField(lam), GridField(theta)


def channel_terms(basis: NoiseBasis, X: np.ndarray, J: np.ndarray, f: np.ndarray,
                  rho0: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Lambda_c and Theta_c for every active channel and path, shape (channels, paths, n),
    plus the fields v_c(X) used by the flow.
    """
    F = basis.fields(X)
    hat = hat_at_flow(J, rho0)
    C = trapezoid(J ** 2 / rho0)
    A = trapezoid(f * F.dv * J)
    B = trapezoid(f * F.dvv * J)
    D = trapezoid(F.dv * J ** 2 / rho0) / C
    lam = -A[..., None] * hat
    theta = (-A[..., None] * F.dv - B[..., None] + 3.0 * (A * D)[..., None]) * hat
    return lam, theta, F


def _lambda_combination(basis: NoiseBasis, scaled: np.ndarray, X: np.ndarray, J: np.ndarray,
                        f: np.ndarray, rho0: np.ndarray) -> np.ndarray:
    """sum_c scaled_c Lambda_c without forming Theta."""
    F = basis.fields(X)
    A = trapezoid(f * F.dv * J)
    weight = np.einsum("pc,cp->p", scaled, A)
    return -weight[:, None] * hat_at_flow(J, rho0)


def stoch_transport_step(basis: NoiseBasis, scaled: np.ndarray, dt: float, state: StochFlowState,
                         f: np.ndarray, rho0: np.ndarray, scheme: str) -> Tuple[StochFlowState, np.ndarray]:
    """One step of the joint (X, J, f) system for a batch of paths."""
    step = flow_step(basis, scaled, dt, state, scheme)
    if scheme == "strat-heun":
        df0 = _lambda_combination(basis, scaled, state.X, state.J, f, rho0)
        df1 = _lambda_combination(basis, scaled, step.X1, step.J1, f + df0, rho0)
        f_new = f + 0.5 * (df0 + df1)
    else:
        lam, theta, _ = channel_terms(basis, state.X, state.J, f, rho0)
        drift = np.einsum("c,cpn->pn", 0.5 * basis.weights ** -2.0, theta)
        f_new = f + noise_combination(scaled, lam) + dt * drift
    return step.state, f_new


@dataclass
class StochTransportPath:
    """
    Diagnostics for a batch of paths. ``norm`` and ``mean_g`` have shape
    (paths, steps + 1) and use the change of variables
    int g^2 rho_t dx = int f^2 rho0 dx, int g dx = int f J dx; the Eulerian
    fields g_t are materialized at ``output_times``.
    """
    seed: int
    times: np.ndarray
    norm: np.ndarray
    mean_g: np.ndarray
    output_times: List[float] = field(default_factory=list)
    f: List[np.ndarray] = field(default_factory=list)
    g: List[np.ndarray] = field(default_factory=list)
    eulerian_norm: List[np.ndarray] = field(default_factory=list)
    eulerian_mean: List[np.ndarray] = field(default_factory=list)
    final_state: Optional[StochFlowState] = None

    @property
    def norm_drift_rel(self) -> np.ndarray:
        """Per-path max_t |norm_t - norm_0| / norm_0."""
        base = self.norm[:, :1]
        return np.max(np.abs(self.norm - base), axis=1) / base[:, 0]

    @property
    def max_abs_mean(self) -> np.ndarray:
        return np.max(np.abs(self.mean_g), axis=1)

    def tangent_field(self, output: int, path: int = 0) -> TangentField:
        return TangentField(GridField(self.g[output][path]))

    def rows(self, path: int = 0) -> List[Tuple[float, float, float]]:
        return [(float(t), float(a), float(b)) for t, a, b in zip(self.times, self.norm[path], self.mean_g[path])]


def eulerian_fields(X: np.ndarray, J: np.ndarray, f: np.ndarray,
                    rho0: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """g_t = f_t(X_t^-1) and rho_t for a batch of paths."""
    inverse = invert_lifts(X)
    return trig_interpolate(f, inverse), trig_interpolate(rho0 / J, inverse)


def integrate_stoch_parallel(g0: Union[TangentField, GridField], basis: NoiseBasis, driver: BrownianDriver,
                             rho0: Density, scheme: str = "strat-heun", dt: Optional[float] = None,
                             output_every: Optional[int] = None) -> StochTransportPath:
    """Pathwise translation of g0 for every path of ``driver``."""
    g0 = g0.values if isinstance(g0, TangentField) else g0
    if abs(integrate(g0)) > TANGENT_TOL:
        raise ValueError("Initial field must have zero mean to be tangent")
    if scheme not in SCHEMES:
        raise ValueError(f"Unknown scheme '{scheme}'; choose from {SCHEMES}")
    if dt is not None and not np.isclose(dt, driver.dt, rtol=1e-12, atol=0.0):
        raise ValueError(f"dt={dt} does not match the driver step {driver.dt}")
    if g0.n != rho0.n:
        raise ValueError(f"Grid sizes differ: g0 has {g0.n}, rho0 has {rho0.n}")
    steps = driver.steps
    output_every = max(1, steps // 10) if output_every is None else output_every
    rho0_values = rho0.array
    state = StochFlowState.identity(rho0.n, driver.paths)
    f = np.tile(g0.values, (driver.paths, 1))
    norm = np.empty((driver.paths, steps + 1))
    mean = np.empty((driver.paths, steps + 1))
    path = StochTransportPath(driver.seed, driver.dt * np.arange(steps + 1), norm, mean)

    def record(j: int) -> None:
        norm[:, j] = trapezoid(f ** 2 * rho0_values)
        mean[:, j] = trapezoid(f * state.J)
        if j % output_every == 0 or j == steps:
            g, rho_t = eulerian_fields(state.X, state.J, f, rho0_values)
            path.output_times.append(j * driver.dt)
            path.f.append(f.copy())
            path.g.append(g)
            path.eulerian_norm.append(trapezoid(g ** 2 * rho_t))
            path.eulerian_mean.append(trapezoid(g))

    record(0)
    for j in range(steps):
        scaled = _scaled_increments(basis, driver, j)
        state, f = stoch_transport_step(basis, scaled, driver.dt, state, f, rho0_values, scheme)
        record(j + 1)
    path.final_state = state
    logger.info("Stochastic transport (%s): worst relative norm drift %.3e over %d paths",
                scheme, float(np.max(path.norm_drift_rel)), driver.paths)
    return path


def envelope_check(basis: NoiseBasis, X: np.ndarray, J: np.ndarray, f: np.ndarray,
                   rho0: Density) -> Dict[str, float]:
    """
    Largest ratios ||Lambda_c|| / (k ||f||) and ||Theta_c|| / (3 k^2 ||f||) in L^2(rho0 dx)
    over channels and paths.
    """
    lam, theta, _ = channel_terms(basis, X, J, f, rho0.array)
    f_norm = np.sqrt(trapezoid(f ** 2 * rho0.array))
    k = basis.wavenumbers[:, None]
    lam_norm = np.sqrt(trapezoid(lam ** 2 * rho0.array))
    theta_norm = np.sqrt(trapezoid(theta ** 2 * rho0.array))
    with np.errstate(divide="ignore", invalid="ignore"):
        lam_ratio = np.where(f_norm > 0.0, lam_norm / (k * f_norm), 0.0)
        theta_ratio = np.where(f_norm > 0.0, theta_norm / (3.0 * k ** 2 * f_norm), 0.0)
    return {"max_lambda_ratio": float(np.max(lam_ratio)), "max_theta_ratio": float(np.max(theta_ratio))}


def rs_terms(rho_t: Density, phi: GridField, psi: GridField) -> Dict[str, GridField]:
    """
    The eight terms of the R + S expansion for the field Psi' = psi' along phi.
    The Witten-Laplacian term splits into J1 (phi'') and J2 ((log rho)' phi'),
    and the centring term into J3 and J4 the same way. Since rho_hat is
    proportional to 1/rho, (log rho)' rho_hat = -rho_hat', and J2, J4 are formed
    from the same differentiated rho_hat as the consolidated expression.
    """
    rh = hat_density(rho_t)
    drh = differentiate(rh)
    dphi, d2phi = differentiate(phi), differentiate(phi, 2)
    u = differentiate(psi, 2) * dphi
    du = differentiate(u)
    G = integrate(u)
    return {
        "I1": du * dphi,
        "I2": -G * drh * dphi,
        "I3": -integrate(du * dphi) * rh,
        "I4": G * integrate(drh * dphi) * rh,
        "J1": G * d2phi * rh,
        "J2": -G * drh * dphi,
        "J3": -G * integrate(d2phi * rh) * rh,
        "J4": G * integrate(drh * dphi) * rh,
    }


def rs_consolidated(rho_t: Density, phi: GridField, psi: GridField) -> GridField:
    rh = hat_density(rho_t)
    drh = differentiate(rh)
    dphi, d2phi = differentiate(phi), differentiate(phi, 2)
    u = differentiate(psi, 2) * dphi
    du = differentiate(u)
    G = integrate(u)
    return (du * dphi - integrate(du * dphi) * rh
            + G * d2phi * rh - G * integrate(d2phi * rh) * rh
            - 2.0 * G * dphi * drh + 2.0 * G * integrate(dphi * drh) * rh)


def rs_identity_check(rho_t: Density, phi: GridField, psi: GridField) -> float:
    """L^2(dx) gap between the summed terms and the consolidated expression."""
    terms = rs_terms(rho_t, phi, psi)
    total = sum(terms.values(), GridField.constant(0.0, rho_t.n))
    gap = total - rs_consolidated(rho_t, phi, psi)
    return float(np.sqrt(integrate(gap * gap)))


def galerkin_convergence(g0: GridField, q: float, levels: Sequence[int], ref_level: Optional[int],
                         paths: int, dt: float, beta: float = 0.25, T: float = 1.0,
                         rho0: Optional[Density] = None, seed: int = 42, scheme: str = "strat-heun",
                         slope_limit: float = -1.5, threads: Optional[int] = None,
                         chunk_size: int = 16) -> ConvergenceReport:
    """
    E[sup_t ||f^N_t - f^ref_t||^2] per level on coupled noise; the sup is the
    max over every step. Also reports the fraction of paths whose sup-norm error
    reaches N^-beta.
    """
    if q <= 2.5:
        raise ValueError(f"Galerkin convergence needs q > 5/2, got {q}")
    ref_level = check_levels(levels, ref_level)
    rho0 = Density.uniform(g0.n) if rho0 is None else rho0
    if abs(integrate(g0)) > TANGENT_TOL:
        raise ValueError("Initial field must have zero mean to be tangent")
    steps = max(1, int(round(T / dt)))
    bases = [NoiseBasis(N, q) for N in levels] + [NoiseBasis(ref_level, q)]
    rho0_values = rho0.array

    def run_chunk(ids: np.ndarray) -> np.ndarray:
        driver = sample_driver(seed, dt, steps, 2 * ref_level, path_ids=ids)
        start = StochFlowState.identity(g0.n, ids.size)
        states = [(start, np.tile(g0.values, (ids.size, 1))) for _ in bases]
        sup_err = np.zeros((ids.size, len(levels)))
        for j in range(steps):
            states = [stoch_transport_step(basis, _scaled_increments(basis, driver, j), dt, *state,
                                           rho0_values, scheme)
                      for basis, state in zip(bases, states)]
            f_ref = states[-1][1]
            errors = np.stack([trapezoid((s[1] - f_ref) ** 2 * rho0_values) for s in states[:-1]], axis=1)
            sup_err = np.maximum(sup_err, errors)
        return sup_err

    per_path = map_path_chunks(run_chunk, paths, chunk_size, threads)
    thresholds = np.asarray(levels, dtype=float) ** (-beta)
    exceedance = np.mean(np.sqrt(per_path) >= thresholds, axis=0)
    report = build_report(levels, per_path, slope_limit, exceedance.tolist())
    report.metrics["predicted_slope"] = -(q - 0.5)
    logger.info("Galerkin convergence: estimates %s, slope %.3f", report.estimates, report.slope)
    return report
