"""
Energy functionals on the Wasserstein space over the circle and their
derivatives along constant vector fields V_psi (mu -> d psi).

Each functional is evaluated two ways:

* on a grid density rho (``evaluate``, ``first_derivative``, ``second_derivative``);
* along flows, from the Lagrangian data (X, J, rho0) of a batch of paths
  (``along_paths`` and friends), which is what the Ito-formula check uses.

Along a flow the velocity field d psi is given by its samples at X:
v = psi'(X), dv = psi''(X), d2v = psi'''(X).
"""
import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import simpson

from src.wasserstein_transport.analysis import map_path_chunks, mean_and_stderr, z_score
from src.wasserstein_transport.errors import IllConditionedDensityError
from src.wasserstein_transport.flow import (
    DENSITY_FLOOR,
    Density,
    VelocityPotential,
    flow_trajectory,
    integrate_flow,
    push_density,
)
from src.wasserstein_transport.stochastic_flow import (
    BrownianDriver,
    NoiseBasis,
    sample_driver,
    simulate_flow,
)
from src.wasserstein_transport.torus_field import (
    TWO_PI,
    GridField,
    differentiate,
    grid,
    integrate,
    spectral_derivative,
    trapezoid,
    trig_interpolate,
)

logger = logging.getLogger(__name__)

MIN_ITO_PATHS = 64
DYADIC_INTERVALS = 8
Z_LIMIT = 3.0
DETERMINISTIC_TOL = 1e-6
ROUNDOFF_TOL = 1e-12
KERNEL_COEFF_TOL = 1e-13
HYPOTHESIS_BOUND = 1e3


class VelocityFields(NamedTuple):
    """psi', psi'' and psi''' sampled at the flow positions; shapes broadcast to (..., paths, n)."""
    v: np.ndarray
    dv: np.ndarray
    d2v: np.ndarray


def velocity_fields(V: VelocityPotential, t: float, X: np.ndarray) -> VelocityFields:
    return VelocityFields(*(V.evaluate_at(t, X, order) for order in (1, 2, 3)))


def _grid_derivatives(psi: GridField) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    return tuple(differentiate(psi, order).values for order in (1, 2, 3))


def _quad(values: np.ndarray, axis: int = -1) -> np.ndarray:
    """Trapezoid rule that keeps complex values."""
    return TWO_PI / values.shape[axis] * np.sum(values, axis=axis)


class EnergyFunctional(ABC):
    name = "functional"

    @abstractmethod
    def evaluate(self, rho: Density) -> float:
        ...

    @abstractmethod
    def first_derivative(self, rho: Density, psi: GridField) -> float:
        ...

    @abstractmethod
    def second_derivative(self, rho: Density, psi: GridField) -> float:
        ...

    @abstractmethod
    def along_paths(self, X: np.ndarray, J: np.ndarray, rho0: np.ndarray) -> np.ndarray:
        """F((X)_# rho0 dx) for every path; X and J have shape (paths, n)."""

    @abstractmethod
    def first_along_paths(self, X: np.ndarray, J: np.ndarray, rho0: np.ndarray,
                          fields: VelocityFields) -> np.ndarray:
        ...

    @abstractmethod
    def second_along_paths(self, X: np.ndarray, J: np.ndarray, rho0: np.ndarray,
                           fields: VelocityFields) -> np.ndarray:
        ...


@dataclass(frozen=True, eq=False)
class PotentialEnergy(EnergyFunctional):
    """F(mu) = int varphi d mu."""
    varphi: GridField
    name: str = "potential"

    def __post_init__(self):
        coeffs = np.abs(np.fft.rfft(self.varphi.values))
        if coeffs[-1] > 1e-10 * max(1.0, float(np.max(coeffs))):
            logger.warning("Potential carries energy in the Nyquist mode; derivatives lose accuracy")

    def evaluate(self, rho: Density) -> float:
        return integrate(self.varphi * rho.values)

    def first_derivative(self, rho: Density, psi: GridField) -> float:
        dpsi = differentiate(psi)
        return integrate(differentiate(self.varphi) * dpsi * rho.values)

    def second_derivative(self, rho: Density, psi: GridField) -> float:
        """int psi' (psi' varphi')' rho dx."""
        dpsi = differentiate(psi)
        return integrate(dpsi * differentiate(dpsi * differentiate(self.varphi)) * rho.values)

    def _at(self, X: np.ndarray, order: int) -> np.ndarray:
        values = self.varphi.values if order == 0 else spectral_derivative(self.varphi.values, order)
        return trig_interpolate(values, X)

    def along_paths(self, X, J, rho0):
        return trapezoid(self._at(X, 0) * rho0)

    def first_along_paths(self, X, J, rho0, fields):
        return trapezoid(self._at(X, 1) * fields.v * rho0)

    def second_along_paths(self, X, J, rho0, fields):
        d1, d2 = self._at(X, 1), self._at(X, 2)
        return trapezoid(fields.v * (fields.dv * d1 + fields.v * d2) * rho0)


@dataclass(frozen=True, eq=False)
class InternalEnergy(EnergyFunctional):
    """
    F(rho dx) = int chi(rho) dx, with p(s) = chi'(s) - chi(s)/s.

    ``chi``, ``dchi`` and ``d2chi`` are vectorized callables on (0, inf).
    """
    chi: Callable[[np.ndarray], np.ndarray]
    dchi: Callable[[np.ndarray], np.ndarray]
    d2chi: Callable[[np.ndarray], np.ndarray]
    name: str = "internal"

    def __post_init__(self):
        s = np.logspace(math.log10(DENSITY_FLOOR), 0.0, 200)
        growth = float(np.max(np.abs(self.chi(s)) + s * np.abs(self.dchi(s)) + s * s * np.abs(self.d2chi(s))))
        if not math.isfinite(growth) or growth > HYPOTHESIS_BOUND:
            logger.warning("|chi| + s|chi'| + s^2|chi''| reaches %.3g on (0, 1]; derivative formulas may not apply",
                           growth)

    @classmethod
    def entropy(cls) -> "InternalEnergy":
        """chi(s) = s log s."""
        return cls(lambda s: s * np.log(s), lambda s: np.log(s) + 1.0, lambda s: 1.0 / s, name="entropy")

    @classmethod
    def power(cls, m: float) -> "InternalEnergy":
        """chi(s) = s^m."""
        if m < 1.0:
            raise ValueError(f"Power m must be >= 1, got {m}")
        return cls(lambda s: s ** m, lambda s: m * s ** (m - 1.0),
                   lambda s: m * (m - 1.0) * s ** (m - 2.0), name=f"power-{m:g}")

    def p(self, s: np.ndarray) -> np.ndarray:
        return self.dchi(s) - self.chi(s) / s

    def dp(self, s: np.ndarray) -> np.ndarray:
        return self.d2chi(s) - self.dchi(s) / s + self.chi(s) / (s * s)

    @staticmethod
    def _positive(values: np.ndarray) -> np.ndarray:
        if np.min(values) <= 0.0:
            raise IllConditionedDensityError("Internal energy needs a strictly positive density")
        return values

    def evaluate(self, rho: Density) -> float:
        return trapezoid(self.chi(self._positive(rho.array)))

    def first_derivative(self, rho: Density, psi: GridField) -> float:
        """-int (chi'(rho) rho - chi(rho)) psi'' dx."""
        r = self._positive(rho.array)
        return -trapezoid((self.dchi(r) * r - self.chi(r)) * differentiate(psi, 2).values)

    def second_derivative(self, rho: Density, psi: GridField) -> float:
        r = self._positive(rho.array)
        d1, d2, d3 = _grid_derivatives(psi)
        return trapezoid(self.dp(r) * d2 ** 2 * r ** 2 - self.p(r) * d1 * d3 * r)

    # along a flow, rho_t(X) = rho0 / J =: r

    def along_paths(self, X, J, rho0):
        r = self._positive(rho0 / J)
        return trapezoid(self.chi(r) * J)

    def first_along_paths(self, X, J, rho0, fields):
        r = self._positive(rho0 / J)
        return -trapezoid((self.dchi(r) * r - self.chi(r)) * fields.dv * J)

    def second_along_paths(self, X, J, rho0, fields):
        r = self._positive(rho0 / J)
        return trapezoid(self.dp(r) * fields.dv ** 2 * r * rho0 - self.p(r) * fields.v * fields.d2v * rho0)


@dataclass(frozen=True, eq=False)
class InteractionEnergy(EnergyFunctional):
    """
    F(mu) = int int W(x, y) mu(dx) mu(dy) with W sampled on the n x n grid,
    W[i, j] = W(x_i, y_j). Phi(x, mu) = int (W(x, y) + W(y, x)) mu(dy).
    """
    W: np.ndarray
    name: str = "interaction"

    def __post_init__(self):
        W = np.array(self.W, dtype=float)
        if W.ndim != 2 or W.shape[0] != W.shape[1]:
            raise ValueError("Interaction kernel must be a square n x n grid")
        if not np.all(np.isfinite(W)):
            raise ValueError("Interaction kernel must be finite")
        W.setflags(write=False)
        object.__setattr__(self, "W", W)
        n = W.shape[0]
        coeffs = np.fft.fft2(W) / (n * n)
        keep = np.abs(coeffs) > KERNEL_COEFF_TOL * max(float(np.max(np.abs(coeffs))), 1e-300)
        rows, cols = np.nonzero(keep)
        freqs = np.fft.fftfreq(n, 1.0 / n)
        object.__setattr__(self, "_coeffs", coeffs[rows, cols])
        object.__setattr__(self, "_j", freqs[rows])
        object.__setattr__(self, "_k", freqs[cols])

    @classmethod
    def from_kernel(cls, fn: Callable[[np.ndarray, np.ndarray], np.ndarray], n: int,
                    name: str = "interaction") -> "InteractionEnergy":
        x = grid(n)
        return cls(np.broadcast_to(fn(x[:, None], x[None, :]), (n, n)), name=name)

    @property
    def n(self) -> int:
        return self.W.shape[0]

    def _check(self, rho: Density) -> None:
        if rho.n != self.n:
            raise ValueError(f"Grid sizes differ: kernel has {self.n}, density has {rho.n}")

    @property
    def symmetric_kernel(self) -> np.ndarray:
        return self.W + self.W.T

    def phi(self, rho: Density) -> np.ndarray:
        self._check(rho)
        return TWO_PI / self.n * self.symmetric_kernel @ rho.array

    def evaluate(self, rho: Density) -> float:
        self._check(rho)
        h = TWO_PI / self.n
        return float(h * h * rho.array @ self.W @ rho.array)

    def first_derivative(self, rho: Density, psi: GridField) -> float:
        return trapezoid(spectral_derivative(self.phi(rho)) * differentiate(psi).values * rho.array)

    def second_derivative(self, rho: Density, psi: GridField) -> float:
        """
        int int psi'(x) psi'(y) d_x d_y S(x, y) rho(x) rho(y) + int psi' (psi' Phi')' rho dx,
        S = W + W^T (a measure-independent kernel).
        """
        S = self.symmetric_kernel
        mixed = spectral_derivative(spectral_derivative(S, 1).T, 1).T
        d1 = differentiate(psi).values
        weighted = d1 * rho.array
        h = TWO_PI / self.n
        cross = h * h * weighted @ mixed @ weighted
        dphi = spectral_derivative(self.phi(rho))
        return float(cross + trapezoid(d1 * spectral_derivative(d1 * dphi) * rho.array))

    # along a flow the kernel is evaluated from its non-negligible Fourier modes

    def _modes(self, X: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return np.exp(1j * X[..., None] * self._j), np.exp(1j * X[..., None] * self._k)

    def along_paths(self, X, J, rho0):
        Ej, Ek = self._modes(X)
        mj, mk = _quad(Ej * rho0[:, None], axis=-2), _quad(Ek * rho0[:, None], axis=-2)
        return np.real(np.sum(self._coeffs * mj * mk, axis=-1))

    def _phi_derivatives(self, X: np.ndarray, rho0: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        Ej, Ek = self._modes(X)
        mj, mk = _quad(Ej * rho0[:, None], axis=-2), _quad(Ek * rho0[:, None], axis=-2)
        c, j, k = self._coeffs, self._j, self._k
        first = np.sum(c * (1j * j * Ej * mk[..., None, :] + 1j * k * Ek * mj[..., None, :]), axis=-1)
        second = np.sum(c * (-(j ** 2) * Ej * mk[..., None, :] - (k ** 2) * Ek * mj[..., None, :]), axis=-1)
        return np.real(first), np.real(second)

    def first_along_paths(self, X, J, rho0, fields):
        dphi, _ = self._phi_derivatives(X, rho0)
        return trapezoid(dphi * fields.v * rho0)

    def second_along_paths(self, X, J, rho0, fields):
        dphi, d2phi = self._phi_derivatives(X, rho0)
        Ej, Ek = self._modes(X)
        weighted = fields.v * rho0
        Mj = TWO_PI / X.shape[-1] * np.einsum("...pn,pnl->...pl", weighted, Ej)
        Mk = TWO_PI / X.shape[-1] * np.einsum("...pn,pnl->...pl", weighted, Ek)
        cross = 2.0 * np.real(np.sum(self._coeffs * (-self._j * self._k) * Mj * Mk, axis=-1))
        local = trapezoid((fields.v * fields.dv * dphi + fields.v ** 2 * d2phi) * rho0)
        return cross + local


def _leibniz(values: Sequence, firsts: Sequence, seconds: Sequence):
    """First and second derivative of a product from the factors' values and derivatives."""
    count = len(values)

    def product(skip: Sequence[int]):
        out = 1.0
        for i in range(count):
            if i not in skip:
                out = out * values[i]
        return out

    first = sum(firsts[i] * product([i]) for i in range(count))
    second = sum(seconds[i] * product([i]) for i in range(count))
    second = second + sum(firsts[i] * firsts[j] * product([i, j])
                          for i in range(count) for j in range(count) if i != j)
    return first, second


@dataclass(frozen=True, eq=False)
class PolynomialFunctional(EnergyFunctional):
    """coefficient * prod_i F_i for potential energies F_i."""
    factors: Tuple[PotentialEnergy, ...]
    coefficient: float = 1.0
    name: str = "polynomial"

    def __post_init__(self):
        if not self.factors:
            raise ValueError("PolynomialFunctional needs at least one factor")
        object.__setattr__(self, "factors", tuple(self.factors))

    def _grid_parts(self, rho: Density, psi: GridField):
        values = [f.evaluate(rho) for f in self.factors]
        firsts = [f.first_derivative(rho, psi) for f in self.factors]
        seconds = [f.second_derivative(rho, psi) for f in self.factors]
        return values, firsts, seconds

    def evaluate(self, rho: Density) -> float:
        return self.coefficient * math.prod(f.evaluate(rho) for f in self.factors)

    def first_derivative(self, rho: Density, psi: GridField) -> float:
        return self.coefficient * _leibniz(*self._grid_parts(rho, psi))[0]

    def second_derivative(self, rho: Density, psi: GridField) -> float:
        return self.coefficient * _leibniz(*self._grid_parts(rho, psi))[1]

    def along_paths(self, X, J, rho0):
        out = self.coefficient
        for f in self.factors:
            out = out * f.along_paths(X, J, rho0)
        return out

    def _path_parts(self, X, J, rho0, fields):
        return ([f.along_paths(X, J, rho0) for f in self.factors],
                [f.first_along_paths(X, J, rho0, fields) for f in self.factors],
                [f.second_along_paths(X, J, rho0, fields) for f in self.factors])

    def first_along_paths(self, X, J, rho0, fields):
        return self.coefficient * _leibniz(*self._path_parts(X, J, rho0, fields))[0]

    def second_along_paths(self, X, J, rho0, fields):
        return self.coefficient * _leibniz(*self._path_parts(X, J, rho0, fields))[1]


def evaluate(F: EnergyFunctional, rho: Density) -> float:
    return F.evaluate(rho)


def first_derivative(F: EnergyFunctional, rho: Density, psi: GridField) -> float:
    return F.first_derivative(rho, psi)


def second_derivative(F: EnergyFunctional, rho: Density, psi: GridField) -> float:
    return F.second_derivative(rho, psi)


def flow_difference_quotients(F: EnergyFunctional, rho: Density, psi: GridField, h: float,
                              dt: float = 1e-3) -> Tuple[float, float]:
    """
    Centered first and second differences of s -> F((U_s)_# mu), U the flow of
    the constant field d psi.
    """
    V = VelocityPotential.from_grid(psi)
    forward = push_density(rho, integrate_flow(V, rho.n, h, dt))
    backward = push_density(rho, integrate_flow(V.scaled(-1.0), rho.n, h, dt))
    f_plus, f_zero, f_minus = F.evaluate(forward), F.evaluate(rho), F.evaluate(backward)
    return (f_plus - f_minus) / (2.0 * h), (f_plus - 2.0 * f_zero + f_minus) / (h * h)


def product_rule_gap(F1: PotentialEnergy, F2: PotentialEnergy, rho: Density, psi: GridField) -> float:
    """
    |D^2(F1 F2) - (F2 D^2 F1 + F1 D^2 F2 + 2 DF1 DF2)|, the left side taken from
    the product functional.
    """
    product = PolynomialFunctional((F1, F2))
    expansion = (F2.evaluate(rho) * F1.second_derivative(rho, psi)
                 + F1.evaluate(rho) * F2.second_derivative(rho, psi)
                 + 2.0 * F1.first_derivative(rho, psi) * F2.first_derivative(rho, psi))
    return abs(product.second_derivative(rho, psi) - expansion)


def cancellation_terms(rho: Density, phi: GridField, chi: InternalEnergy) -> Dict[str, float]:
    """The four integrals of the internal-energy cancellation I1 + I2 = I3 - I4."""
    r = chi._positive(rho.array)
    d1, d2, d3 = _grid_derivatives(phi)
    flux = spectral_derivative(r * d1)
    return {
        "I1": trapezoid(chi.dchi(r) * spectral_derivative(flux * d1)),
        "I2": trapezoid(chi.d2chi(r) * flux ** 2),
        "I3": trapezoid(chi.dp(r) * d2 ** 2 * r ** 2),
        "I4": trapezoid(chi.dchi(r) * d1 * d3 * r - chi.chi(r) * d1 * d3),
    }


def cancellation_gap(rho: Density, phi: GridField, chi: InternalEnergy) -> float:
    terms = cancellation_terms(rho, phi, chi)
    return abs(terms["I1"] + terms["I2"] - (terms["I3"] - terms["I4"]))


@dataclass
class ItoReport:
    functional: str
    estimate: float
    std_error: float
    z_score: float
    passed: bool
    samples: int
    increment_z: List[float] = field(default_factory=list)
    martingale_passed: bool = True

    def to_dict(self) -> dict:
        return {"functional": self.functional, "estimate": self.estimate, "std_error": self.std_error,
                "z_score": self.z_score, "pass": self.passed, "samples": self.samples,
                "increment_z": list(self.increment_z), "martingale_pass": self.martingale_passed}


def _dyadic_indices(steps: int, intervals: int) -> List[int]:
    return sorted({int(round(i * steps / intervals)) for i in range(intervals + 1)})


def _martingale_z(samples: np.ndarray, floor: float) -> Tuple[float, float, float]:
    """Mean, standard error and z-score of ``samples``; a mean within ``floor`` of zero scores 0."""
    mean, stderr = mean_and_stderr(samples)
    if abs(mean) <= floor:
        return mean, stderr, 0.0
    return mean, stderr, z_score(mean, stderr)


def _deterministic_check(F: EnergyFunctional, rho0: Density, V: VelocityPotential, dt: float, T: float) -> ItoReport:
    states = flow_trajectory(V, rho0.n, T, dt)
    times = np.array([s.t for s in states])
    values, rates = [], []
    for state in states:
        X, J = state.X.lift[None, :], state.J.values[None, :]
        values.append(float(F.along_paths(X, J, rho0.array)[0]))
        rates.append(float(F.first_along_paths(X, J, rho0.array, velocity_fields(V, state.t, X))[0]))
    residual = values[-1] - values[0] - float(simpson(rates, x=times))
    logger.info("Deterministic chain-rule residual for %s: %.3e", F.name, residual)
    return ItoReport(F.name, residual, 0.0, 0.0, abs(residual) <= DETERMINISTIC_TOL, 1)


def ito_verify(F: EnergyFunctional, rho0: Density, basis: Optional[NoiseBasis], paths: int, dt: float,
               T: float = 1.0, drift: Optional[VelocityPotential] = None, seed: int = 42,
               scheme: str = "strat-heun", antithetic: bool = True, threads: Optional[int] = None,
               chunk_size: int = 32) -> ItoReport:
    """
    Monte Carlo check of F(mu_T) - F(mu_0) - int_0^T (1/2) sum_c alpha_c^-2 D^2_{V_c} F dt = martingale.

    The residual at T must have mean zero within ``Z_LIMIT`` standard errors, and so
    must the increments of the compensated process over ``DYADIC_INTERVALS``
    equal subintervals. Means below ROUNDOFF_TOL times the size of F(mu_0) are
    round-off, as for the antithetic residual of a potential energy, and pass.
    With ``basis=None`` the noise is off and the flow of
    ``drift`` is used instead: the residual is then the deterministic chain rule.
    """
    if basis is None:
        if drift is None:
            raise ValueError("Deterministic mode needs a drift potential")
        return _deterministic_check(F, rho0, drift, dt, T)
    if paths < MIN_ITO_PATHS:
        raise ValueError(f"Insufficient paths: {paths} < {MIN_ITO_PATHS}")
    steps = max(1, int(round(T / dt)))
    marks = _dyadic_indices(steps, DYADIC_INTERVALS)
    inv_weights = 0.5 * basis.weights ** -2.0
    rho0_values = rho0.array
    start = grid(rho0.n)[None, :]
    floor = ROUNDOFF_TOL * max(1.0, abs(float(F.along_paths(start, np.ones_like(start), rho0_values)[0])))

    def compensated(driver: BrownianDriver) -> np.ndarray:
        values, drifts = [], []

        def observe(_: int, state) -> None:
            values.append(F.along_paths(state.X, state.J, rho0_values))
            second = F.second_along_paths(state.X, state.J, rho0_values, basis.fields(state.X))
            drifts.append(inv_weights @ second)

        simulate_flow(rho0.n, basis, driver, scheme, observer=observe)
        values, drifts = np.stack(values, axis=1), np.stack(drifts, axis=1)
        integral = np.concatenate([np.zeros((drifts.shape[0], 1)),
                                   np.cumsum(0.5 * dt * (drifts[:, 1:] + drifts[:, :-1]), axis=1)], axis=1)
        return (values - values[:, :1] - integral)[:, marks]

    def run_chunk(ids: np.ndarray) -> np.ndarray:
        driver = sample_driver(seed, dt, steps, basis.n_channels, path_ids=ids)
        process = compensated(driver)
        if antithetic:
            process = 0.5 * (process + compensated(driver.antithetic()))
        return process

    samples = paths // 2 if antithetic else paths
    process = map_path_chunks(run_chunk, samples, chunk_size, threads)
    estimate, stderr, z = _martingale_z(process[:, -1], floor)
    increments = np.diff(process, axis=1)
    increment_z = [_martingale_z(increments[:, i], floor)[2] for i in range(increments.shape[1])]
    martingale_ok = all(abs(zi) <= Z_LIMIT for zi in increment_z)
    report = ItoReport(F.name, estimate, stderr, z, abs(z) <= Z_LIMIT, samples, increment_z, martingale_ok)
    logger.info("Ito check for %s: residual %.3e +/- %.2e (z = %.2f)", F.name, estimate, stderr, z)
    return report


def stochastic_density_path(rho0: Density, basis: NoiseBasis, driver: BrownianDriver, path: int = 0,
                            scheme: str = "strat-heun") -> List[Density]:
    """rho_t on the grid at every step of one path of ``driver``."""
    if not 0 <= path < driver.paths:
        raise ValueError(f"Path {path} outside driver range [0, {driver.paths})")
    densities: List[Density] = []
    simulate_flow(rho0.n, basis, driver.select([path]), scheme,
                  observer=lambda _, state: densities.append(push_density(rho0, state.flow_state(0))))
    return densities


def spde_residual(rho_path: Sequence[Density], basis: NoiseBasis, driver: BrownianDriver,
                  test_fn: GridField, path: int = 0) -> float:
    """
    Weak-form residual of d rho = -sum_c alpha_c^-1 (v_c rho)' o dB^c along one path:

        int psi rho_T - int psi rho_0 - sum_n sum_c [alpha_c^-1 int psi' v_c rho_n dx dB_n^c
                                                   + (1/2) alpha_c^-2 int v_c (v_c psi')' rho_n dx (dB_n^c)^2]

    with left-point sums. The Ito correction uses the realized squares of the increments.
    """
    if len(rho_path) != driver.steps + 1:
        raise ValueError(f"Density path has {len(rho_path)} entries, driver has {driver.steps} steps")
    if driver.channels < basis.n_channels:
        raise ValueError(f"Driver has {driver.channels} channels, basis needs {basis.n_channels}")
    if not 0 <= path < driver.paths:
        raise ValueError(f"Path {path} outside driver range [0, {driver.paths})")
    n = test_fn.n
    if any(rho.n != n for rho in rho_path):
        raise ValueError("Density path and test function live on different grids")
    d1, d2, _ = _grid_derivatives(test_fn)
    F = basis.fields(grid(n))
    noise_weight = F.v * d1
    correction_weight = F.v * (F.dv * d1 + F.v * d2)
    alpha = basis.weights
    dB = driver.increments[path][:, list(basis.channels)]
    total = 0.0
    for j in range(driver.steps):
        rho = rho_path[j].array
        total += float(np.sum(trapezoid(noise_weight * rho) * dB[j] / alpha))
        total += float(np.sum(0.5 * trapezoid(correction_weight * rho) * dB[j] ** 2 / alpha ** 2))
    change = integrate(test_fn * rho_path[-1].values) - integrate(test_fn * rho_path[0].values)
    return abs(change - total)
