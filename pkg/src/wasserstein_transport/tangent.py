"""
Tangent spaces of the Wasserstein space over the circle.

At mu = rho dx the tangent space is the set of zero-mean fields. The
L^2(rho dx)-orthogonal projection onto it is explicit:

    Pi_rho v = v - (int v dx) * rho_hat,   rho_hat = 1 / ((int dx/rho) * rho).
"""
import logging
from dataclasses import dataclass

import numpy as np

from src.wasserstein_transport.errors import IllConditionedDensityError
from src.wasserstein_transport.flow import DENSITY_FLOOR, Density, VelocityPotential, integrate_flow, push_density
from src.wasserstein_transport.torus_field import GridField, differentiate, integrate

logger = logging.getLogger(__name__)

TANGENT_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class TangentField:
    """An Eulerian vector field on T identified with a scalar function."""
    values: GridField

    @property
    def mean(self) -> float:
        return integrate(self.values)

    def is_tangent(self, tol: float = TANGENT_TOL) -> bool:
        return abs(self.mean) <= tol


def _checked(rho: Density) -> np.ndarray:
    values = rho.array
    if np.min(values) <= DENSITY_FLOOR:
        raise IllConditionedDensityError("Density reached its floor; division by rho is ill-conditioned")
    return values


def hat_density(rho: Density) -> GridField:
    inverse = GridField(1.0 / _checked(rho))
    return inverse / integrate(inverse)


def project(rho: Density, v: GridField) -> TangentField:
    return TangentField(v - integrate(v) * hat_density(rho))


def complement(rho: Density, v: GridField) -> GridField:
    """(I - Pi_rho) v."""
    return integrate(v) * hat_density(rho)


def log_gradient(rho: Density) -> GridField:
    return differentiate(GridField(np.log(_checked(rho))))


def witten_laplacian(rho: Density, f: GridField) -> GridField:
    """f'' + (log rho)' f'."""
    return differentiate(f, 2) + log_gradient(rho) * differentiate(f)


def div_mu(rho: Density, Z: GridField) -> GridField:
    """Z' + (log rho)' Z, the adjoint of -d/dx in L^2(rho dx)."""
    return differentiate(Z) + log_gradient(rho) * Z


def orthogonality_residual(rho: Density, v: GridField, psi: GridField) -> float:
    """int (v - Pi_rho v) psi' rho dx, zero for every test psi."""
    return integrate(complement(rho, v) * differentiate(psi) * rho.values)


def l2_norm(rho: Density, f: GridField) -> float:
    return float(np.sqrt(integrate(f * f * rho.values)))


def projection_derivative_residual(V: VelocityPotential, rho0: Density, Z: GridField,
                                   t: float, h: float, dt: float = 1e-3) -> float:
    """
    L^2(c_t) norm of the centered difference of s -> Pi_{c_s} Z plus
    Pi_{c_t}(Delta_{c_t} phi_t * Pi_{c_t}^perp Z).
    """
    if not (0.0 < t - h and t + h < 1.0):
        raise ValueError("Need 0 < t - h and t + h < 1")
    n = rho0.n

    def density_at(s: float) -> Density:
        return push_density(rho0, integrate_flow(V, n, s, dt))

    rho_t = density_at(t)
    forward = project(density_at(t + h), Z).values
    backward = project(density_at(t - h), Z).values
    phi_t = V.evaluate(t, n)[0]
    # the shift part of phi is linear; its Laplacian contribution is (log rho)' * shift
    laplacian = witten_laplacian(rho_t, phi_t) + log_gradient(rho_t) * (V.weight(t) * V.shift)
    correction = project(rho_t, laplacian * complement(rho_t, Z)).values
    return l2_norm(rho_t, (forward - backward) / (2.0 * h) + correction)
