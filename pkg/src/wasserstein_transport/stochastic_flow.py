"""
Stochastic flows of circle diffeomorphisms driven by Fourier noise.

Channel c = 2(k-1) carries the field cos(kx), channel c = 2(k-1)+1 the field
sin(kx); both have weight alpha = k^q. The flow solves

    dX = sum_c alpha_c^{-1} v_c(X) o dB^c,    dJ = sum_c alpha_c^{-1} v_c'(X) J o dB^c,

path by path. States are batched over paths: every array has shape (paths, n).
"""
import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.special import zeta

from src.wasserstein_transport.analysis import (
    ConvergenceReport,
    build_report,
    confidence_interval,
    map_path_chunks,
    mean_and_stderr,
)
from src.wasserstein_transport.errors import DiffeomorphismError
from src.wasserstein_transport.flow import JACOBIAN_FLOOR, Density, FlowState, push_density
from src.wasserstein_transport.torus_field import GridField, LiftedMap, grid

logger = logging.getLogger(__name__)

SCHEMES = ("strat-heun", "ito-euler")
MIN_COUPLING_PATHS = 32


class ChannelFields(NamedTuple):
    """Per-channel fields at the points X, each of shape (channels,) + X.shape."""
    v: np.ndarray
    dv: np.ndarray
    d2v: np.ndarray
    d3v: np.ndarray
    dvv: np.ndarray  # d/dx (v v')


@dataclass(frozen=True)
class NoiseBasis:
    N: int
    q: float
    channels: Optional[Tuple[int, ...]] = None

    def __post_init__(self):
        if self.N < 1:
            raise ValueError(f"Truncation level N must be >= 1, got {self.N}")
        if self.q <= 1.0:
            raise ValueError(f"Weight exponent q must exceed 1, got {self.q}")
        channels = tuple(range(2 * self.N)) if self.channels is None else tuple(sorted(self.channels))
        if not channels or channels[0] < 0 or channels[-1] >= 2 * self.N:
            raise ValueError(f"Active channels must lie in [0, {2 * self.N})")
        object.__setattr__(self, "channels", channels)

    @classmethod
    def single_channel(cls, kind: str = "cos", k: int = 1, q: float = 3.0) -> "NoiseBasis":
        """One noise field, cos(kx) or sin(kx)."""
        if kind not in ("cos", "sin"):
            raise ValueError(f"kind must be 'cos' or 'sin', got '{kind}'")
        return cls(k, q, (2 * (k - 1) + (0 if kind == "cos" else 1),))

    @property
    def n_channels(self) -> int:
        """Driver width needed: all 2N channels, active or not."""
        return 2 * self.N

    @property
    def is_full(self) -> bool:
        return len(self.channels) == 2 * self.N

    @property
    def wavenumbers(self) -> np.ndarray:
        return np.array([c // 2 + 1 for c in self.channels], dtype=float)

    @property
    def is_cos(self) -> np.ndarray:
        return np.array([c % 2 == 0 for c in self.channels])

    @property
    def weights(self) -> np.ndarray:
        """alpha_c = k^q."""
        return self.wavenumbers ** self.q

    def fields(self, X: np.ndarray) -> ChannelFields:
        X = np.asarray(X, dtype=float)
        shape = (-1,) + (1,) * X.ndim
        k = self.wavenumbers.reshape(shape)
        is_cos = self.is_cos.reshape(shape)
        c, s = np.cos(k * X), np.sin(k * X)
        v = np.where(is_cos, c, s)
        dv = np.where(is_cos, -k * s, k * c)
        d3v = np.where(is_cos, k ** 3 * s, -k ** 3 * c)
        dvv = np.where(is_cos, -1.0, 1.0) * k ** 2 * (c * c - s * s)
        return ChannelFields(v, dv, -k ** 2 * v, d3v, dvv)

    def quadratic_variation_rate(self) -> float:
        """
        x-average of sum_c alpha_c^-2 v_c'(x)^2, i.e. sum_k k^{2-2q} over the
        wavenumbers of a full basis. For full sin/cos pairs it is d<M>/dt exactly.
        """
        k = self.wavenumbers
        return float(0.5 * np.sum(k ** 2 / self.weights ** 2))


@dataclass(frozen=True, eq=False)
class BrownianDriver:
    """
    Brownian increments of shape (paths, steps, channels). Channel c of path p
    comes from its own Philox stream keyed by (seed, p, c); the j-th draw of the
    stream is the increment of step j.
    """
    seed: int
    dt: float
    increments: np.ndarray
    path_ids: np.ndarray

    @property
    def paths(self) -> int:
        return self.increments.shape[0]

    @property
    def steps(self) -> int:
        return self.increments.shape[1]

    @property
    def channels(self) -> int:
        return self.increments.shape[2]

    def restrict(self, channels: int) -> "BrownianDriver":
        if channels > self.channels:
            raise ValueError(f"Cannot restrict {self.channels} channels to {channels}")
        return BrownianDriver(self.seed, self.dt, self.increments[:, :, :channels], self.path_ids)

    def coarsen(self, factor: int) -> "BrownianDriver":
        """Sum ``factor`` consecutive increments: the same Brownian path at step dt*factor."""
        if factor < 1 or self.steps % factor != 0:
            raise ValueError(f"Steps {self.steps} not divisible by factor {factor}")
        summed = self.increments.reshape(self.paths, self.steps // factor, factor, self.channels).sum(axis=2)
        return BrownianDriver(self.seed, self.dt * factor, summed, self.path_ids)

    def antithetic(self) -> "BrownianDriver":
        return BrownianDriver(self.seed, self.dt, -self.increments, self.path_ids)

    def select(self, rows: Sequence[int]) -> "BrownianDriver":
        rows = np.asarray(rows)
        return BrownianDriver(self.seed, self.dt, self.increments[rows], self.path_ids[rows])

    @classmethod
    def zero(cls, dt: float, steps: int, channels: int, paths: int = 1) -> "BrownianDriver":
        return cls(0, dt, np.zeros((paths, steps, channels)), np.arange(paths))


def channel_stream(seed: int, path: int, channel: int) -> np.random.Generator:
    """Counter-based generator for one (seed, path, channel) triple."""
    key = np.random.SeedSequence(seed, spawn_key=(path, channel)).generate_state(2, np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def sample_driver(seed: int, dt: float, steps: int, channels: int, paths: int = 1,
                  path_ids: Optional[Sequence[int]] = None) -> BrownianDriver:
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    ids = np.arange(paths) if path_ids is None else np.asarray(path_ids, dtype=int)
    increments = np.empty((ids.size, steps, channels))
    scale = math.sqrt(dt)
    for row, path in enumerate(ids):
        for channel in range(channels):
            increments[row, :, channel] = scale * channel_stream(seed, int(path), channel).standard_normal(steps)
    return BrownianDriver(seed, dt, increments, ids)


@dataclass(frozen=True, eq=False)
class StochFlowState:
    """
    Batched flow state. ``log_ktilde`` accumulates the Stratonovich integral of
    sum alpha^-1 v'(X) o dB (so exp(log_ktilde) is the Kunita density);
    ``log_khat`` accumulates the same integrand with left-point (Ito) sums.
    J is the variational Jacobian dX/dx of the discrete flow.
    """
    t: float
    X: np.ndarray
    J: np.ndarray
    log_ktilde: np.ndarray
    log_khat: np.ndarray

    def __post_init__(self):
        shapes = {np.shape(a) for a in (self.X, self.J, self.log_ktilde, self.log_khat)}
        if len(shapes) != 1 or len(next(iter(shapes))) != 2:
            raise ValueError("StochFlowState arrays must share one (paths, n) shape")
        if np.min(self.J) <= 0.0:
            raise DiffeomorphismError(f"Jacobian lost positivity at t={self.t:.6g}")

    @property
    def paths(self) -> int:
        return self.X.shape[0]

    @property
    def n(self) -> int:
        return self.X.shape[1]

    @classmethod
    def identity(cls, n: int, paths: int = 1) -> "StochFlowState":
        X = np.tile(grid(n), (paths, 1))
        return cls(0.0, X, np.ones_like(X), np.zeros_like(X), np.zeros_like(X))

    def path_map(self, path: int = 0) -> LiftedMap:
        return LiftedMap(self.X[path])

    def flow_state(self, path: int = 0) -> FlowState:
        return FlowState(self.t, self.path_map(path), GridField(self.J[path]))


def _scaled_increments(basis: NoiseBasis, driver: BrownianDriver, step_index: int) -> np.ndarray:
    if driver.channels < basis.n_channels:
        raise ValueError(f"Driver has {driver.channels} channels, basis needs {basis.n_channels}")
    if not 0 <= step_index < driver.steps:
        raise ValueError(f"Step {step_index} outside driver range [0, {driver.steps})")
    dB = driver.increments[:, step_index, :]
    return dB[:, list(basis.channels)] / basis.weights


def noise_combination(scaled: np.ndarray, field: np.ndarray) -> np.ndarray:
    """sum_c scaled[p, c] * field[c, p, :]."""
    return np.einsum("pc,cpn->pn", scaled, field)


def ito_correction(basis: NoiseBasis, first: np.ndarray, second: np.ndarray) -> np.ndarray:
    """(1/2) sum_c alpha_c^-2 first_c * second_c."""
    return 0.5 * np.einsum("c,cpn->pn", basis.weights ** -2.0, first * second)


class FlowStep(NamedTuple):
    """
    Result of one flow increment. ``X1`` and ``J1`` are the Heun predictor
    (the left point itself for ito-euler), where coupled equations evaluate
    their second stage.
    """
    state: StochFlowState
    X1: np.ndarray
    J1: np.ndarray


def flow_step(basis: NoiseBasis, scaled: np.ndarray, dt: float, state: StochFlowState,
              scheme: str = "strat-heun") -> FlowStep:
    """
    Advance X, J and both log-Kunita accumulators by one step of size ``dt``
    with scaled increments ``scaled`` (shape (paths, active channels)).

    J is stepped by the same scheme on the linear equation dJ = sum v'(X) J o dB,
    so it is the exact x-derivative of the computed X. ``log_ktilde`` is
    integrated separately as a Stratonovich sum and only agrees with log J up
    to the discretization error.
    """
    X, J = state.X, state.J
    F0 = basis.fields(X)
    dX0 = noise_combination(scaled, F0.v)
    dlog0 = noise_combination(scaled, F0.dv)
    if scheme == "strat-heun":
        X1, J1 = X + dX0, J * (1.0 + dlog0)
        F1 = basis.fields(X1)
        dlog1 = noise_combination(scaled, F1.dv)
        X_new = X + 0.5 * (dX0 + noise_combination(scaled, F1.v))
        J_new = J + 0.5 * (dlog0 * J + dlog1 * J1)
        dlog = 0.5 * (dlog0 + dlog1)
    elif scheme == "ito-euler":
        X1, J1 = X, J
        X_new = X + dX0 + dt * ito_correction(basis, F0.v, F0.dv)
        # d/dx (v v') = v'^2 + v v''
        drift_rate = ito_correction(basis, F0.dv, F0.dv) + ito_correction(basis, F0.v, F0.d2v)
        J_new = J * (1.0 + dlog0 + dt * drift_rate)
        dlog = dlog0 + dt * ito_correction(basis, F0.v, F0.d2v)
    else:
        raise ValueError(f"Unknown scheme '{scheme}'; choose from {SCHEMES}")
    low = float(np.min(J_new))
    if low <= JACOBIAN_FLOOR:
        raise DiffeomorphismError(f"Jacobian underflow ({low:.3e}) at t={state.t + dt:.6g}")
    new_state = StochFlowState(state.t + dt, X_new, J_new, state.log_ktilde + dlog, state.log_khat + dlog0)
    return FlowStep(new_state, X1, J1)


def advance_stoch_flow(state: StochFlowState, basis: NoiseBasis, driver: BrownianDriver,
                       step_index: int, scheme: str = "strat-heun") -> StochFlowState:
    """
    One step of the flow. ``strat-heun`` is the predictor-corrector for the
    Stratonovich form; ``ito-euler`` is Euler-Maruyama on the Ito form.
    """
    scaled = _scaled_increments(basis, driver, step_index)
    return flow_step(basis, scaled, driver.dt, state, scheme).state


def simulate_flow(n: int, basis: NoiseBasis, driver: BrownianDriver, scheme: str = "strat-heun",
                  steps: Optional[int] = None,
                  observer: Optional[Callable[[int, StochFlowState], None]] = None) -> StochFlowState:
    """Run all (or the first ``steps``) driver steps; ``observer`` sees every state, step 0 included."""
    state = StochFlowState.identity(n, driver.paths)
    steps = driver.steps if steps is None else steps
    if observer is not None:
        observer(0, state)
    for j in range(steps):
        state = advance_stoch_flow(state, basis, driver, j, scheme)
        if observer is not None:
            observer(j + 1, state)
    return state


def kunita_density(state: StochFlowState, path: int = 0) -> GridField:
    """K_t = exp(accumulated Stratonovich integral of the log-Jacobian rate)."""
    return GridField(np.exp(state.log_ktilde[path]))


def kunita_gap(state: StochFlowState) -> float:
    """
    max over paths and nodes of |exp(log_ktilde) - J| / J. Heun truncates the
    exponential of each log increment at second order, so this gap is O(dt).
    """
    return float(np.max(np.abs(np.exp(state.log_ktilde) - state.J) / state.J))


def ito_correction_diagnostic(state: StochFlowState, basis: NoiseBasis) -> Dict[str, float]:
    """
    Compare log K_tilde - log K_hat with the time-free constant -sum k^2/k^{2q}
    and with the Ito-Stratonovich correction -(t/2) sum k^{2-2q}.
    """
    gap = state.log_ktilde - state.log_khat
    time_free = -basis.quadratic_variation_rate()
    corrected = -0.5 * state.t * basis.quadratic_variation_rate()
    return {
        "mean_log_ratio": float(np.mean(gap)),
        "time_free_constant": time_free,
        "ito_correction": corrected,
        "gap_to_time_free": float(np.max(np.abs(gap - time_free))),
        "gap_to_ito_correction": float(np.max(np.abs(gap - corrected))),
    }


def check_levels(levels: Sequence[int], ref_level: Optional[int]) -> int:
    levels = list(levels)
    if not levels or any(b <= a for a, b in zip(levels, levels[1:])):
        raise ValueError(f"Truncation levels must be strictly increasing, got {levels}")
    ref_level = 2 * levels[-1] if ref_level is None else ref_level
    if ref_level < levels[-1]:
        raise ValueError(f"Reference level {ref_level} is below the largest level {levels[-1]}")
    if ref_level < 2 * levels[-1]:
        logger.warning("Reference level %d is below twice the largest level %d", ref_level, levels[-1])
    return ref_level


def _coupled_statistics(levels: Sequence[int], ref_level: int, q: float, n: int, dt: float, T: float,
                        paths: int, seed: int, statistic: Callable[[StochFlowState, StochFlowState], np.ndarray],
                        threads: Optional[int], chunk_size: int) -> np.ndarray:
    """(paths, levels) values of ``statistic(level_state, ref_state)`` at time T on coupled noise."""
    steps = max(1, int(round(T / dt)))

    def run_chunk(ids: np.ndarray) -> np.ndarray:
        driver = sample_driver(seed, dt, steps, 2 * ref_level, path_ids=ids)
        ref = simulate_flow(n, NoiseBasis(ref_level, q), driver)
        columns = [statistic(simulate_flow(n, NoiseBasis(N, q), driver), ref) for N in levels]
        return np.stack(columns, axis=1)

    return map_path_chunks(run_chunk, paths, chunk_size, threads)


def coupling_error_experiment(seed_count: int, basis_levels: Sequence[int], q: float, dt: float, p: int = 1,
                              ref_level: Optional[int] = None, n: int = 64, T: float = 1.0, seed: int = 42,
                              slope_limit: float = -3.0, threads: Optional[int] = None,
                              chunk_size: int = 32) -> ConvergenceReport:
    """
    E[(X_T^N - X_T^ref)^{2p}] per level on coupled noise (averaged over x),
    with a log-log slope against N. ``seed_count`` is the number of paths.
    """
    if q <= 1.5:
        raise ValueError(f"Coupling estimate needs q > 3/2, got {q}")
    if seed_count < MIN_COUPLING_PATHS:
        raise ValueError(f"Insufficient paths: {seed_count} < {MIN_COUPLING_PATHS}")
    ref_level = check_levels(basis_levels, ref_level)

    def statistic(level: StochFlowState, ref: StochFlowState) -> np.ndarray:
        return np.mean((level.X - ref.X) ** (2 * p), axis=1)

    per_path = _coupled_statistics(basis_levels, ref_level, q, n, dt, T, seed_count, seed,
                                   statistic, threads, chunk_size)
    report = build_report(basis_levels, per_path, slope_limit)
    report.metrics["predicted_slope"] = -(2.0 * q - 1.0)
    logger.info("Flow coupling: estimates %s, slope %.3f", report.estimates, report.slope)
    return report


def density_coupling_experiment(seed_count: int, basis_levels: Sequence[int], q: float, dt: float, p: int = 1,
                                ref_level: Optional[int] = None, n: int = 64, T: float = 1.0, seed: int = 42,
                                slope_limit: float = -1.0, threads: Optional[int] = None,
                                chunk_size: int = 32) -> ConvergenceReport:
    """Same experiment for the Kunita densities: E|K^N - K^ref|^{2p}."""
    if q <= 1.5:
        raise ValueError(f"Coupling estimate needs q > 3/2, got {q}")
    if seed_count < MIN_COUPLING_PATHS:
        raise ValueError(f"Insufficient paths: {seed_count} < {MIN_COUPLING_PATHS}")
    ref_level = check_levels(basis_levels, ref_level)

    def statistic(level: StochFlowState, ref: StochFlowState) -> np.ndarray:
        return np.mean(np.abs(np.exp(level.log_ktilde) - np.exp(ref.log_ktilde)) ** (2 * p), axis=1)

    per_path = _coupled_statistics(basis_levels, ref_level, q, n, dt, T, seed_count, seed,
                                   statistic, threads, chunk_size)
    return build_report(basis_levels, per_path, slope_limit)


@dataclass
class MomentReport:
    estimate: float
    std_error: float
    ci: Tuple[float, float]
    bound: float
    exact: Optional[float]
    passed: bool
    ci_below_bound: bool

    def to_dict(self) -> dict:
        return {"estimate": self.estimate, "std_error": self.std_error, "ci": list(self.ci),
                "bound": self.bound, "exact": self.exact, "pass": self.passed,
                "ci_below_bound": self.ci_below_bound}


def exponential_moment_exact(basis: NoiseBasis, t: float, p: float) -> Optional[float]:
    """exp(p^2 <M>_t / 2); the quadratic variation is deterministic only for full sin/cos pairs."""
    if not basis.is_full:
        return None
    return math.exp(0.5 * p * p * t * basis.quadratic_variation_rate())


def moment_bound_check(basis: NoiseBasis, q: float, dt: float, t: float, p: float, paths: int,
                       n: int = 32, seed: int = 42, threads: Optional[int] = None,
                       chunk_size: int = 64) -> MomentReport:
    """
    Monte Carlo estimate of E[K_hat_t^p], maximized over grid points, against
    the bound exp(p^2 zeta(2q-2) t).
    """
    if q <= 1.5:
        raise ValueError(f"zeta(2q-2) diverges for q={q}; need q > 3/2")
    if basis.q != q:
        raise ValueError(f"Noise basis has q={basis.q} but the bound was requested for q={q}")
    bound = math.exp(p * p * float(zeta(2.0 * q - 2.0)) * t)
    steps = int(round(t / dt))

    def run_chunk(ids: np.ndarray) -> np.ndarray:
        if steps == 0:
            return np.ones((ids.size, n))
        driver = sample_driver(seed, dt, steps, basis.n_channels, path_ids=ids)
        return np.exp(p * simulate_flow(n, basis, driver).log_khat)

    samples = map_path_chunks(run_chunk, paths, chunk_size, threads)
    per_node = [mean_and_stderr(samples[:, j]) for j in range(n)]
    worst = int(np.argmax([m for m, _ in per_node]))
    estimate, stderr = per_node[worst]
    ci = confidence_interval(estimate, stderr)
    report = MomentReport(estimate, stderr, ci, bound, exponential_moment_exact(basis, t, p),
                          bool(ci[0] <= bound), bool(ci[1] <= bound))
    logger.info("Moment bound: E[K^%g] = %.4g +/- %.2g, bound %.4g", p, estimate, stderr, bound)
    return report


def mean_density_deviation(n: int, basis: NoiseBasis, dt: float, t: float, paths: int,
                           seed: int = 42) -> Tuple[float, float]:
    """
    Max over x of |E[rho_t](x) - 1/(2 pi)| for a uniform start, with the
    largest standard error over x.
    """
    driver = sample_driver(seed, dt, max(1, int(round(t / dt))), basis.n_channels, paths)
    state = simulate_flow(n, basis, driver)
    uniform = Density.uniform(n)
    densities = np.stack([push_density(uniform, state.flow_state(p)).array for p in range(paths)])
    stats = [mean_and_stderr(densities[:, j]) for j in range(n)]
    deviation = max(abs(m - 1.0 / (2.0 * np.pi)) for m, _ in stats)
    return float(deviation), float(max(se for _, se in stats))
