import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats


def mean_and_stderr(samples: Sequence[float]) -> Tuple[float, float]:
    """
    Sample mean and standard error, both reduced with compensated summation
    so the result does not depend on the order of the samples.
    """
    samples = np.asarray(samples, dtype=float).ravel()
    count = samples.size
    if count == 0:
        raise ValueError("Need at least one sample")
    mean = math.fsum(samples) / count
    if count == 1:
        return mean, 0.0
    variance = math.fsum((samples - mean) ** 2) / (count - 1)
    return mean, math.sqrt(variance / count)


def confidence_interval(mean: float, stderr: float, level: float = 0.95) -> Tuple[float, float]:
    """Normal-approximation interval."""
    z = stats.norm.ppf(0.5 + level / 2.0)
    return mean - z * stderr, mean + z * stderr


def z_score(mean: float, stderr: float) -> float:
    if stderr > 0.0:
        return mean / stderr
    return 0.0 if mean == 0.0 else math.copysign(math.inf, mean)


def richardson_ratio(coarse: float, fine: float) -> float:
    """Error ratio between two refinement levels (4 for second order at halving)."""
    return coarse / fine if fine > 0.0 else math.inf


def empirical_order(errors: Sequence[float], steps: Sequence[float]) -> float:
    """Least-squares order p in error ~ step^p."""
    return loglog_slope(steps, errors).slope


@dataclass
class SlopeFit:
    slope: float
    intercept: float
    stderr: float
    ci: Tuple[float, float]


def loglog_slope(xs: Sequence[float], ys: Sequence[float], level: float = 0.95) -> SlopeFit:
    """Regression of log y on log x; the CI uses the t distribution when there are spare points."""
    xs, ys = np.asarray(xs, dtype=float), np.asarray(ys, dtype=float)
    if xs.size < 2 or np.any(xs <= 0.0) or np.any(ys <= 0.0):
        raise ValueError("Log-log fit needs at least two strictly positive points")
    fit = stats.linregress(np.log(xs), np.log(ys))
    dof = xs.size - 2
    if dof > 0:
        half = stats.t.ppf(0.5 + level / 2.0, dof) * fit.stderr
    else:
        half = 0.0
    return SlopeFit(float(fit.slope), float(fit.intercept), float(fit.stderr),
                    (float(fit.slope - half), float(fit.slope + half)))


def path_chunks(paths: int, chunk_size: int) -> List[np.ndarray]:
    return [np.arange(start, min(start + chunk_size, paths)) for start in range(0, paths, chunk_size)]


def map_path_chunks(fn: Callable[[np.ndarray], np.ndarray], paths: int,
                    chunk_size: int = 32, threads: Optional[int] = None) -> np.ndarray:
    """
    Evaluate ``fn`` on consecutive chunks of path indices and concatenate the
    per-path results in path order. Each path draws its own keyed noise, so the
    output is independent of the number of workers.
    """
    chunks = path_chunks(paths, chunk_size)
    workers = threads or os.cpu_count() or 1
    if workers == 1 or len(chunks) == 1:
        results = [fn(chunk) for chunk in chunks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(fn, chunks))
    return np.concatenate([np.asarray(r) for r in results], axis=0)


@dataclass
class ConvergenceReport:
    """Monte Carlo estimates per truncation level with a log-log rate fit."""
    levels: List[int]
    estimates: List[float]
    std_errors: List[float]
    slope: float
    slope_ci: Tuple[float, float]
    passed: bool
    exceedance: List[float] = field(default_factory=list)
    metrics: Dict[str, float] = field(default_factory=dict)

    @property
    def strictly_decreasing(self) -> bool:
        return bool(np.all(np.diff(self.estimates) < 0.0))

    def to_dict(self) -> dict:
        out = asdict(self)
        out["slope_ci"] = list(self.slope_ci)
        return out


def build_report(levels: Sequence[int], per_path: np.ndarray, slope_limit: float,
                 exceedance: Sequence[float] = ()) -> ConvergenceReport:
    """per_path: (paths, levels) samples. Passing needs a strict decrease and slope <= slope_limit."""
    pairs = [mean_and_stderr(per_path[:, j]) for j in range(per_path.shape[1])]
    estimates = [p[0] for p in pairs]
    positive = np.asarray(estimates) > 0.0
    if positive.sum() >= 2:
        fit = loglog_slope(np.asarray(levels)[positive], np.asarray(estimates)[positive])
        slope, ci = fit.slope, fit.ci
    else:
        slope, ci = math.nan, (math.nan, math.nan)
    passed = bool(np.all(np.diff(estimates) < 0.0)) and slope <= slope_limit
    return ConvergenceReport(list(levels), estimates, [p[1] for p in pairs], slope, ci,
                             passed, list(exceedance))
