"""
Spectral-grid calculus on the circle T = R / 2piZ.

Functions are stored as samples on the uniform grid x_j = 2*pi*j/n (n a power
of two), circle diffeomorphisms as lifts to the real line with winding number
one. Everything the higher modules need (derivatives, quadrature,
band-limited interpolation, composition and inversion of maps) lives here.

The ``GridField``/``LiftedMap`` value types wrap 1-D arrays; the underscore-free
array helpers (``spectral_derivative``, ``trapezoid``, ``trig_interpolate``,
``invert_lifts``) accept a leading batch axis so stochastic paths can be
processed together.
"""
import logging
from dataclasses import dataclass
from typing import Callable, Tuple, Union

import numpy as np
from scipy.interpolate import CubicSpline

from src.wasserstein_transport.errors import DiffeomorphismError

logger = logging.getLogger(__name__)

TWO_PI = 2.0 * np.pi
INTERPOLATION_METHODS = ("spectral", "cubic")
NEWTON_TOL = 1e-13
INVERSE_RESIDUAL_TOL = 1e-10
MAX_NEWTON_ITER = 80

ArrayLike = Union[float, np.ndarray]


def check_grid_size(n: int) -> None:
    """Raise ValueError unless n is a power of two with n >= 8."""
    if n < 8 or (n & (n - 1)) != 0:
        raise ValueError(f"Grid size must be a power of two >= 8, got {n}")


def grid(n: int) -> np.ndarray:
    """Uniform nodes 2*pi*j/n, j = 0..n-1."""
    check_grid_size(n)
    return TWO_PI * np.arange(n) / n


def _wavenumbers(n: int) -> np.ndarray:
    return np.arange(n // 2 + 1, dtype=float)


def spectral_derivative(values: np.ndarray, order: int = 1) -> np.ndarray:
    """
    Derivative of the trigonometric interpolant along the last axis.

    The Nyquist mode is dropped for odd orders so that real input stays real
    and the result is exact for band-limited data of bandwidth < n/2.
    """
    if order not in (1, 2, 3):
        raise ValueError(f"Derivative order must be 1, 2 or 3, got {order}")
    values = np.asarray(values, dtype=float)
    n = values.shape[-1]
    factor = (1j * _wavenumbers(n)) ** order
    if order % 2 == 1:
        factor[-1] = 0.0
    return np.fft.irfft(np.fft.rfft(values, axis=-1) * factor, n=n, axis=-1)


def trapezoid(values: np.ndarray) -> Union[float, np.ndarray]:
    """(2*pi/n) * sum along the last axis; exact for trig polynomials of degree < n."""
    values = np.asarray(values, dtype=float)
    total = TWO_PI / values.shape[-1] * np.sum(values, axis=-1)
    return float(total) if np.ndim(total) == 0 else total


def _trig_coefficients(values: np.ndarray) -> np.ndarray:
    n = values.shape[-1]
    coeffs = np.fft.rfft(values, axis=-1) / n
    weights = np.full(n // 2 + 1, 2.0)
    weights[0] = 1.0
    weights[-1] = 1.0
    return coeffs * weights


def _trig_eval(coeffs: np.ndarray, x: np.ndarray) -> np.ndarray:
    k = np.arange(coeffs.shape[-1], dtype=float)
    phases = np.exp(1j * x[..., None] * k)
    if coeffs.ndim == 1:
        return np.real(phases @ coeffs)
    # batched: coeffs (..., K), x (..., m)
    return np.real(np.einsum("...mk,...k->...m", phases, coeffs))


def trig_interpolate(values: np.ndarray, x: ArrayLike) -> np.ndarray:
    """
    Evaluate the band-limited interpolant of grid samples at points x.

    values: (n,) with x of any shape, or (batch, n) with x of shape (batch, m).
    """
    values = np.asarray(values, dtype=float)
    x = np.asarray(x, dtype=float)
    return _trig_eval(_trig_coefficients(values), x)


def _cubic_interpolate(values: np.ndarray, x: np.ndarray) -> np.ndarray:
    n = values.shape[-1]
    nodes = np.append(grid(n), TWO_PI)
    if values.ndim == 1:
        spline = CubicSpline(nodes, np.append(values, values[0]), bc_type="periodic")
        return spline(np.mod(x, TWO_PI))
    rows = [
        CubicSpline(nodes, np.append(row, row[0]), bc_type="periodic")(np.mod(xr, TWO_PI))
        for row, xr in zip(values, x)
    ]
    return np.stack(rows)


def interpolate_values(values: np.ndarray, x: ArrayLike, method: str = "spectral") -> np.ndarray:
    """Array-level interpolation with a selectable method."""
    if method == "spectral":
        return trig_interpolate(values, x)
    if method == "cubic":
        return _cubic_interpolate(np.asarray(values, dtype=float), np.asarray(x, dtype=float))
    raise ValueError(f"Interpolation method must be one of {INTERPOLATION_METHODS}, got '{method}'")


@dataclass(frozen=True, eq=False)
class GridField:
    """
    Samples of a smooth 2*pi-periodic function: values[j] = f(2*pi*j/n).
    """
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim != 1:
            raise ValueError("GridField values must be one-dimensional")
        check_grid_size(values.size)
        if not np.all(np.isfinite(values)):
            raise ValueError("GridField values must be finite")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def n(self) -> int:
        return self.values.size

    @classmethod
    def from_function(cls, fn: Callable[[np.ndarray], np.ndarray], n: int) -> "GridField":
        return cls(np.broadcast_to(fn(grid(n)), (n,)))

    @classmethod
    def constant(cls, c: float, n: int) -> "GridField":
        return cls(np.full(n, float(c)))

    def _other(self, other):
        if isinstance(other, GridField):
            if other.n != self.n:
                raise ValueError(f"Grid sizes differ: {self.n} vs {other.n}")
            return other.values
        return other

    def __add__(self, other):
        return GridField(self.values + self._other(other))

    __radd__ = __add__

    def __sub__(self, other):
        return GridField(self.values - self._other(other))

    def __rsub__(self, other):
        return GridField(self._other(other) - self.values)

    def __mul__(self, other):
        return GridField(self.values * self._other(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return GridField(self.values / self._other(other))

    def __neg__(self):
        return GridField(-self.values)

    def max_abs(self) -> float:
        return float(np.max(np.abs(self.values)))


def differentiate(f: GridField, order: int = 1) -> GridField:
    """Spectral derivative of order 1, 2 or 3."""
    return GridField(spectral_derivative(f.values, order))


def integrate(f: GridField) -> float:
    """Integral over [0, 2*pi) by the trapezoid rule."""
    return trapezoid(f.values)


def interpolate(f: GridField, x: ArrayLike, method: str = "spectral") -> Union[float, np.ndarray]:
    """Value of the interpolant of f at x (taken mod 2*pi)."""
    result = interpolate_values(f.values, x, method)
    return float(result) if np.ndim(result) == 0 else result


@dataclass(frozen=True, eq=False)
class LiftedMap:
    """
    Orientation-preserving circle diffeomorphism stored as a lift:
    lift[j] = X(2*pi*j/n) with X(x + 2*pi) = X(x) + 2*pi.
    """
    lift: np.ndarray

    def __post_init__(self):
        lift = np.array(self.lift, dtype=float)
        if lift.ndim != 1:
            raise ValueError("LiftedMap lift must be one-dimensional")
        check_grid_size(lift.size)
        if not np.all(np.isfinite(lift)):
            raise ValueError("LiftedMap lift must be finite")
        if np.any(np.diff(lift) <= 0.0) or lift[-1] >= lift[0] + TWO_PI:
            raise DiffeomorphismError("LiftedMap must be strictly increasing over one period")
        lift.setflags(write=False)
        object.__setattr__(self, "lift", lift)

    @property
    def n(self) -> int:
        return self.lift.size

    @property
    def displacement(self) -> np.ndarray:
        """Periodic part lift - x."""
        return self.lift - grid(self.n)

    @classmethod
    def identity(cls, n: int) -> "LiftedMap":
        return cls(grid(n))

    @classmethod
    def rotation(cls, n: int, c: float) -> "LiftedMap":
        return cls(grid(n) + c)

    @classmethod
    def from_displacement(cls, u: GridField) -> "LiftedMap":
        return cls(grid(u.n) + u.values)

    def jacobian(self) -> GridField:
        """Spectral derivative of the lift."""
        return GridField(1.0 + spectral_derivative(self.displacement, 1))

    def __call__(self, x: ArrayLike) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return x + trig_interpolate(self.displacement, x)


def compose(f: GridField, m: LiftedMap, method: str = "spectral") -> GridField:
    """Grid samples of f(m(x_j))."""
    if f.n != m.n:
        raise ValueError(f"Grid sizes differ: field has {f.n}, map has {m.n}")
    return GridField(interpolate_values(f.values, m.lift, method))


def _bracket(lift: np.ndarray, targets: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    n = lift.size
    nodes = grid(n)
    nodes_ext = np.concatenate([nodes - TWO_PI, nodes, nodes + TWO_PI, [2 * TWO_PI]])
    lift_ext = np.concatenate([lift - TWO_PI, lift, lift + TWO_PI, [lift[0] + 2 * TWO_PI]])
    idx = np.searchsorted(lift_ext, targets, side="right") - 1
    idx = np.clip(idx, 0, lift_ext.size - 2)
    lo = nodes_ext[idx]
    hi = nodes_ext[idx + 1]
    weight = (targets - lift_ext[idx]) / (lift_ext[idx + 1] - lift_ext[idx])
    return lo, hi, lo + weight * (hi - lo)


def invert_lifts(lifts: np.ndarray) -> np.ndarray:
    """
    Invert one lift (n,) or a batch (batch, n) on the grid nodes.

    Safeguarded Newton on y -> X(y) - x_j: every iterate stays inside a bracket
    taken from the piecewise-linear inverse. A step is replaced by bisection when
    it would leave the bracket or when the previous step failed to halve the
    residual. The slope differentiates the evaluated coefficients, Nyquist mode
    included.
    """
    lifts = np.asarray(lifts, dtype=float)
    n = lifts.shape[-1]
    check_grid_size(n)
    targets = grid(n)
    jac = 1.0 + spectral_derivative(lifts - targets, 1)
    if np.any(jac <= 0.0) or np.any(np.diff(lifts, axis=-1) <= 0.0):
        raise DiffeomorphismError("Cannot invert a map whose Jacobian changes sign")
    # whole turns are split off so that lift[0] lies in [0, 2*pi)
    turns = TWO_PI * np.floor(lifts[..., :1] / TWO_PI)
    lifts = lifts - turns
    displacement = lifts - targets

    rows = lifts.reshape(-1, n)
    brackets = [_bracket(row, targets) for row in rows]
    lo = np.stack([b[0] for b in brackets]).reshape(lifts.shape)
    hi = np.stack([b[1] for b in brackets]).reshape(lifts.shape)
    y = np.stack([b[2] for b in brackets]).reshape(lifts.shape)

    u_coeffs = _trig_coefficients(displacement)
    du_coeffs = u_coeffs * (1j * _wavenumbers(n))
    previous = np.full(y.shape, np.inf)
    for _ in range(MAX_NEWTON_ITER):
        residual = y + _trig_eval(u_coeffs, y) - targets
        done = np.abs(residual) <= NEWTON_TOL
        if np.all(done):
            break
        lo = np.where(residual < 0.0, y, lo)
        hi = np.where(residual > 0.0, y, hi)
        slope = 1.0 + _trig_eval(du_coeffs, y)
        with np.errstate(divide="ignore", invalid="ignore"):
            step = y - residual / slope
        stalled = np.abs(residual) > 0.5 * previous
        unsafe = ~np.isfinite(step) | (step <= lo) | (step >= hi) | stalled
        y = np.where(done, y, np.where(unsafe, 0.5 * (lo + hi), step))
        previous = np.abs(residual)

    residual = np.max(np.abs(y + _trig_eval(u_coeffs, y) - targets))
    if residual > INVERSE_RESIDUAL_TOL:
        raise DiffeomorphismError(f"Inverse map did not converge (residual {residual:.3e})")
    logger.debug("Inverted %d lift(s), max residual %.2e", rows.shape[0], residual)
    return y - turns


def invert_monotone(m: LiftedMap) -> LiftedMap:
    """Lifted inverse of m sampled on the grid."""
    return LiftedMap(invert_lifts(m.lift))


def write_csv(f: GridField, path: str) -> None:
    """One column of values with header '# n=<n> domain=2pi'."""
    np.savetxt(path, f.values, fmt="%.17g", header=f"n={f.n} domain=2pi")


def read_csv(path: str) -> GridField:
    with open(path, "r", encoding="utf-8") as handle:
        header = handle.readline()
    if not header.startswith("# n="):
        raise ValueError(f"Missing GridField header in {path}")
    n = int(header.split()[1].split("=")[1])
    values = np.loadtxt(path, comments="#", ndmin=1)
    if values.size != n:
        raise ValueError(f"Header says n={n} but {path} holds {values.size} values")
    return GridField(values)
