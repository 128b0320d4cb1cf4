import argparse
import csv
import json
import logging
import os
import sys
import tempfile
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.wasserstein_transport.config import (
    COMMANDS,
    SCHEMA_VERSION,
    ExperimentConfig,
    config_hash,
    load_config,
)
from src.wasserstein_transport.errors import CheckFailure, ConfigError, NumericalBreakdown
from src.wasserstein_transport.flow import (
    Density,
    VelocityPotential,
    flow_trajectory,
    jacobian_consistency_gap,
    push_density,
    trajectory_rows,
)
from src.wasserstein_transport.functionals import (
    EnergyFunctional,
    InteractionEnergy,
    InternalEnergy,
    PolynomialFunctional,
    PotentialEnergy,
    cancellation_gap,
    ito_verify,
)
from src.wasserstein_transport.stochastic_flow import (
    NoiseBasis,
    coupling_error_experiment,
    density_coupling_experiment,
    ito_correction_diagnostic,
    kunita_gap,
    mean_density_deviation,
    moment_bound_check,
    sample_driver,
)
from src.wasserstein_transport.torus_field import GridField, differentiate, grid, trapezoid
from src.wasserstein_transport.transport_det import integrate_parallel_det
from src.wasserstein_transport.transport_stoch import (
    envelope_check,
    galerkin_convergence,
    integrate_stoch_parallel,
    rs_identity_check,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERICAL = 2
EXIT_CHECK = 3

DET_NORM_TOL = 1e-6
DET_MEAN_TOL = 1e-8
STOCH_NORM_TOL = 5e-3
STOCH_MEAN_TOL = 1e-3
KUNITA_RATE = 10.0
MEAN_DENSITY_Z = 4.0
ALGEBRA_TOL = 1e-9
ENVELOPE_SLACK = 1e-8


@dataclass
class CsvTable:
    header: List[str]
    rows: List[Sequence[Union[int, float]]]


Artifact = Union[CsvTable, dict]


@dataclass
class RunSummary:
    command: str
    config: dict
    config_hash: str
    checks: Dict[str, bool] = field(default_factory=dict)
    metrics: Dict[str, float] = field(default_factory=dict)
    wall_time: float = 0.0
    artifacts: Dict[str, Artifact] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def to_dict(self) -> dict:
        """Deterministic part only; wall time goes to timing.json."""
        return {"schema": SCHEMA_VERSION, "command": self.command, "config": self.config,
                "config_hash": self.config_hash, "checks": {k: bool(v) for k, v in self.checks.items()},
                "metrics": {k: float(v) for k, v in self.metrics.items()},
                "pass": self.passed}


def _potential(config: ExperimentConfig) -> VelocityPotential:
    return VelocityPotential(config.potential_cos, config.potential_sin)


def _density(config: ExperimentConfig) -> Density:
    return Density.from_fourier(config.density_cos, config.density_sin, config.n)


def _initial_field(config: ExperimentConfig) -> GridField:
    return VelocityPotential(config.g0_cos, config.g0_sin).evaluate(0.0, config.n)[0]


def _basis(config: ExperimentConfig) -> NoiseBasis:
    channels = None if config.noise_channels is None else tuple(config.noise_channels)
    return NoiseBasis(config.N, config.q, channels)


def _steps(config: ExperimentConfig) -> int:
    return max(1, int(round(config.T / config.dt)))


def kunita_tolerance(config: ExperimentConfig) -> float:
    """
    Allowed |K_tilde - J| / J at T. The two are independent discretizations of
    the same density: the Heun gap is O(dt), the Ito-Euler gap O(sqrt(dt)).
    """
    order = 1.0 if config.scheme == "strat-heun" else 0.5
    return KUNITA_RATE * config.dt ** order * max(config.T, 1.0)


def run_flow(config: ExperimentConfig, summary: RunSummary) -> None:
    states = flow_trajectory(_potential(config), config.n, config.T, config.dt)
    every = config.output_every or max(1, (len(states) - 1) // 10)
    final = states[-1]
    rho_T = push_density(_density(config), final, config.interpolation)
    summary.metrics.update({
        "jacobian_consistency_gap": jacobian_consistency_gap(final),
        "min_jacobian": float(np.min(final.J.values)),
        "mass_error": abs(trapezoid(rho_T.array) - 1.0),
    })
    summary.checks["jacobian_consistency"] = summary.metrics["jacobian_consistency_gap"] <= 1e-6
    kept = [s for i, s in enumerate(states) if i % every == 0 or i == len(states) - 1]
    summary.artifacts["flow.csv"] = CsvTable(["t", "x", "X", "J"], trajectory_rows(kept))


def run_transport_det(config: ExperimentConfig, summary: RunSummary) -> None:
    traj = integrate_parallel_det(_initial_field(config), _potential(config), _density(config),
                                  config.dt, config.T, config.output_every, config.interpolation)
    summary.metrics.update({"norm_drift_rel": traj.norm_drift_rel, "max_abs_mean_g": traj.max_abs_mean_g})
    summary.checks["norm_conservation"] = traj.norm_drift_rel <= DET_NORM_TOL
    summary.checks["tangency"] = traj.max_abs_mean_g <= DET_MEAN_TOL
    summary.artifacts["trajectory.csv"] = CsvTable(["t", "norm", "mean_g"], traj.rows())


def run_transport_stoch(config: ExperimentConfig, summary: RunSummary) -> None:
    basis = _basis(config)
    driver = sample_driver(config.seed, config.dt, _steps(config), basis.n_channels, config.paths)
    path = integrate_stoch_parallel(_initial_field(config), basis, driver, _density(config),
                                    config.scheme, output_every=config.output_every)
    flow = path.final_state
    drift, means = path.norm_drift_rel, path.max_abs_mean
    diagnostic = ito_correction_diagnostic(flow, basis)
    summary.metrics.update({
        "worst_norm_drift_rel": float(np.max(drift)),
        "worst_abs_mean_g": float(np.max(means)),
        "kunita_gap": kunita_gap(flow),
        "log_kunita_gap_to_ito_correction": diagnostic["gap_to_ito_correction"],
        "log_kunita_gap_to_time_free": diagnostic["gap_to_time_free"],
    })
    summary.checks["norm_conservation"] = summary.metrics["worst_norm_drift_rel"] <= STOCH_NORM_TOL
    summary.checks["tangency"] = summary.metrics["worst_abs_mean_g"] <= STOCH_MEAN_TOL
    summary.checks["kunita_consistency"] = summary.metrics["kunita_gap"] <= kunita_tolerance(config)
    summary.artifacts["trajectory.csv"] = CsvTable(["t", "norm", "mean_g"], path.rows(0))
    summary.artifacts["paths.csv"] = CsvTable(
        ["path", "norm_drift_rel", "max_abs_mean_g"],
        [(int(p), float(d), float(m)) for p, d, m in zip(driver.path_ids, drift, means)])


def run_converge(config: ExperimentConfig, summary: RunSummary) -> None:
    report = galerkin_convergence(_initial_field(config), config.q, config.levels, config.ref_level,
                                  config.paths, config.dt, config.beta, config.T, _density(config),
                                  config.seed, config.scheme, threads=config.threads)
    summary.metrics.update({"slope": report.slope, "predicted_slope": report.metrics["predicted_slope"]})
    summary.checks["strictly_decreasing"] = report.strictly_decreasing
    summary.checks["slope"] = report.passed
    summary.artifacts["report.json"] = {
        "levels": report.levels, "sup_errors": report.estimates, "std_errors": report.std_errors,
        "slope": report.slope, "slope_ci": list(report.slope_ci), "exceedance": report.exceedance,
        "pass_flags": {"strictly_decreasing": report.strictly_decreasing, "slope": report.passed},
    }
    summary.artifacts["convergence.csv"] = CsvTable(
        ["N", "sup_error", "std_error", "exceedance"],
        [(int(N), e, s, x) for N, e, s, x in zip(report.levels, report.estimates, report.std_errors,
                                                  report.exceedance)])


def run_coupling(config: ExperimentConfig, summary: RunSummary) -> None:
    """Flow and density coupling rates in N, and the mean density from a uniform start."""
    common = dict(ref_level=config.ref_level, n=config.n, T=config.T, seed=config.seed, threads=config.threads)
    flow = coupling_error_experiment(config.paths, config.levels, config.q, config.dt, int(config.p), **common)
    density = density_coupling_experiment(config.paths, config.levels, config.q, config.dt, int(config.p),
                                          **common)
    deviation, stderr = mean_density_deviation(config.n, _basis(config), config.dt, config.T, config.paths,
                                               seed=config.seed)
    summary.metrics.update({
        "flow_slope": flow.slope,
        "predicted_flow_slope": flow.metrics["predicted_slope"],
        "density_slope": density.slope,
        "mean_density_deviation": deviation,
        "mean_density_stderr": stderr,
    })
    summary.checks["flow_coupling_decreasing"] = flow.strictly_decreasing
    summary.checks["flow_coupling_slope"] = flow.passed
    summary.checks["density_coupling_decreasing"] = density.strictly_decreasing
    summary.checks["mean_density_uniform"] = deviation <= MEAN_DENSITY_Z * stderr + 1e-12
    summary.artifacts["report.json"] = {
        "flow": flow.to_dict(),
        "density": density.to_dict(),
        "mean_density": {"deviation": deviation, "std_error": stderr, "z_limit": MEAN_DENSITY_Z},
    }
    summary.artifacts["coupling.csv"] = CsvTable(
        ["N", "flow_error", "flow_std_error", "density_error", "density_std_error"],
        [(int(N), fe, fs, de, ds) for N, fe, fs, de, ds in zip(flow.levels, flow.estimates, flow.std_errors,
                                                                density.estimates, density.std_errors)])


def _functional(config: ExperimentConfig) -> EnergyFunctional:
    """Potentials and interaction kernels are built from the potential descriptor."""
    varphi = _potential(config).evaluate(0.0, config.n)[0]
    if config.functional == "potential":
        return PotentialEnergy(varphi)
    if config.functional == "entropy":
        return InternalEnergy.entropy()
    if config.functional == "power":
        return InternalEnergy.power(config.power)
    if config.functional == "polynomial":
        return PolynomialFunctional((PotentialEnergy(varphi), PotentialEnergy(differentiate(varphi))))
    profile = _potential(config)
    return InteractionEnergy.from_kernel(lambda x, y: profile.evaluate_at(0.0, x - y, 0), config.n)


def run_ito_check(config: ExperimentConfig, summary: RunSummary) -> None:
    report = ito_verify(_functional(config), _density(config), _basis(config), config.paths, config.dt,
                        config.T, seed=config.seed, scheme=config.scheme, threads=config.threads)
    summary.metrics.update({"estimate": report.estimate, "std_error": report.std_error,
                            "z_score": report.z_score})
    summary.checks["ito_formula"] = report.passed
    summary.checks["martingale_increments"] = report.martingale_passed
    summary.artifacts["report.json"] = report.to_dict()


def run_moments(config: ExperimentConfig, summary: RunSummary) -> None:
    report = moment_bound_check(_basis(config), config.q, config.dt, config.T, config.p, config.paths,
                                n=config.n, seed=config.seed, threads=config.threads)
    summary.metrics.update({"estimate": report.estimate, "std_error": report.std_error, "bound": report.bound})
    if report.exact is not None:
        summary.metrics["exact"] = report.exact
    summary.checks["moment_bound"] = report.passed
    summary.checks["ci_below_bound"] = report.ci_below_bound
    summary.artifacts["report.json"] = report.to_dict()


def _random_trig(rng: np.random.Generator, n: int, bandwidth: int, scale: float) -> GridField:
    return VelocityPotential(scale * rng.standard_normal(bandwidth),
                             scale * rng.standard_normal(bandwidth)).evaluate(0.0, n)[0]


def _random_density(rng: np.random.Generator, n: int) -> Density:
    return Density.from_fourier(0.15 * rng.uniform(-1.0, 1.0, 3), 0.15 * rng.uniform(-1.0, 1.0, 3), n)


def run_rs_check(config: ExperimentConfig, summary: RunSummary) -> None:
    """Drift-algebra identities on random smooth inputs, plus the Lambda/Theta envelopes."""
    rng = np.random.default_rng(config.seed)
    n = config.n
    entropy, power = InternalEnergy.entropy(), InternalEnergy.power(config.power)
    envelope_basis = NoiseBasis(16, config.q)
    rows, lam_ratio, theta_ratio = [], 0.0, 0.0
    for trial in range(config.trials):
        rho = _random_density(rng, n)
        phi, psi = _random_trig(rng, n, 4, 0.3), _random_trig(rng, n, 4, 0.3)
        displacement = _random_trig(rng, n, 3, 0.02)
        X = (grid(n) + displacement.values)[None, :]
        J = (1.0 + differentiate(displacement).values)[None, :]
        f = _random_trig(rng, n, 8, 1.0).values[None, :]
        ratios = envelope_check(envelope_basis, X, J, f, rho)
        lam_ratio = max(lam_ratio, ratios["max_lambda_ratio"])
        theta_ratio = max(theta_ratio, ratios["max_theta_ratio"])
        rows.append((trial, rs_identity_check(rho, phi, psi), cancellation_gap(rho, phi, entropy),
                     cancellation_gap(rho, phi, power)))
    gaps = np.array([row[1:] for row in rows])
    summary.metrics.update({
        "max_rs_gap": float(np.max(gaps[:, 0])),
        "max_cancellation_gap_entropy": float(np.max(gaps[:, 1])),
        "max_cancellation_gap_power": float(np.max(gaps[:, 2])),
        "max_lambda_envelope_ratio": lam_ratio,
        "max_theta_envelope_ratio": theta_ratio,
    })
    summary.checks["rs_identity"] = summary.metrics["max_rs_gap"] <= ALGEBRA_TOL
    summary.checks["cancellation"] = float(np.max(gaps[:, 1:])) <= ALGEBRA_TOL
    summary.checks["lambda_envelope"] = lam_ratio <= 1.0 + ENVELOPE_SLACK
    summary.checks["theta_envelope"] = theta_ratio <= 1.0 + ENVELOPE_SLACK
    summary.artifacts["rs.csv"] = CsvTable(
        ["trial", "rs_gap", "cancellation_gap_entropy", "cancellation_gap_power"], rows)


RUNNERS: Dict[str, Callable[[ExperimentConfig, RunSummary], None]] = {
    "flow": run_flow,
    "transport-det": run_transport_det,
    "transport-stoch": run_transport_stoch,
    "converge": run_converge,
    "coupling": run_coupling,
    "ito-check": run_ito_check,
    "moments": run_moments,
    "rs-check": run_rs_check,
}


def run(config: ExperimentConfig) -> RunSummary:
    """Dispatch ``config.command``; checks, metrics and artifacts are collected on the summary."""
    summary = RunSummary(config.command, config.semantic_dict(), config_hash(config))
    start = time.perf_counter()
    RUNNERS[config.command](config, summary)
    summary.wall_time = time.perf_counter() - start
    logger.info("%s finished in %.2fs; checks %s", config.command, summary.wall_time, summary.checks)
    return summary


def _format(value) -> str:
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return str(int(value))
    return "%.17g" % float(value)


def _atomic_write(path: str, write: Callable) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    handle = tempfile.NamedTemporaryFile("w", encoding="utf-8", newline="\n", dir=directory,
                                         prefix=".tmp-", delete=False)
    try:
        with handle:
            write(handle)
        os.replace(handle.name, path)
    except BaseException:
        if os.path.exists(handle.name):
            os.remove(handle.name)
        raise


def _write_json(path: str, data: dict) -> None:
    _atomic_write(path, lambda h: h.write(json.dumps(data, indent=2, sort_keys=True) + "\n"))


def _write_csv(path: str, table: CsvTable) -> None:
    def write(handle):
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(table.header)
        writer.writerows([_format(v) for v in row] for row in table.rows)
    _atomic_write(path, write)


def emit(summary: RunSummary, artifacts: Dict[str, Artifact], out_dir: str) -> List[str]:
    """Write summary.json, timing.json and every artifact; returns the written paths."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    targets: List[Tuple[str, Artifact]] = [("summary.json", summary.to_dict()),
                                           ("timing.json", {"wall_time_seconds": summary.wall_time})]
    targets += sorted(artifacts.items())
    for name, artifact in targets:
        path = os.path.join(out_dir, name)
        if isinstance(artifact, CsvTable):
            _write_csv(path, artifact)
        else:
            _write_json(path, artifact)
        written.append(path)
    return written


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wtransport",
                                     description="Parallel translation on the Wasserstein space over the circle")
    parser.add_argument("command", choices=COMMANDS, help="Experiment to run")
    parser.add_argument("--config", type=str, default=None, help="JSON configuration file (flat keys)")
    parser.add_argument("--seed", type=int, default=None, help="Random seed (default: 42)")
    parser.add_argument("--dt", type=float, default=None, help="Time step (default: 1e-3)")
    parser.add_argument("--n", type=int, default=None, help="Grid size, power of two in [64, 4096] (default: 256)")
    parser.add_argument("--q", type=float, default=None, help="Noise weight exponent (default: 3)")
    parser.add_argument("--paths", type=int, default=None, help="Monte Carlo paths (default: 64)")
    parser.add_argument("--threads", type=int, default=None, help="Worker threads (default: logical cores)")
    parser.add_argument("--out", type=str, default=None, help="Output directory (default: output)")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v for INFO, -vv for DEBUG")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING if args.verbose == 0 else logging.INFO if args.verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    overrides = {"command": args.command, "seed": args.seed, "dt": args.dt, "n": args.n, "q": args.q,
                 "paths": args.paths, "threads": args.threads, "out": args.out}
    try:
        config = load_config(args.config, overrides)
        print(f"Running {config.command} (n={config.n}, dt={config.dt:g}, seed={config.seed})")
        summary = run(config)
        emit(summary, summary.artifacts, config.out)
        failed = [name for name, ok in summary.checks.items() if not ok]
        if failed:
            raise CheckFailure(f"Failed checks: {', '.join(failed)}")
    except ConfigError as exc:
        print(f"Configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalBreakdown as exc:
        print(f"Numerical breakdown: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except CheckFailure as exc:
        print(f"{exc}. Results saved to {config.out}/", file=sys.stderr)
        return EXIT_CHECK
    except ValueError as exc:
        print(f"Invalid input: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"Run complete. Results saved to {config.out}/")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
