import math

import numpy as np
import pytest

from src.wasserstein_transport.analysis import (
    build_report,
    confidence_interval,
    empirical_order,
    loglog_slope,
    map_path_chunks,
    mean_and_stderr,
    path_chunks,
    richardson_ratio,
    z_score,
)


def test_mean_and_stderr():
    mean, stderr = mean_and_stderr([1.0, 2.0, 3.0, 4.0])
    assert mean == 2.5
    assert stderr == pytest.approx(math.sqrt(5.0 / 3.0 / 4.0))
    assert mean_and_stderr([7.0]) == (7.0, 0.0)
    with pytest.raises(ValueError, match="at least one sample"):
        mean_and_stderr([])


def test_mean_is_order_independent():
    rng = np.random.default_rng(0)
    samples = rng.normal(scale=1e8, size=1000)
    assert mean_and_stderr(samples) == mean_and_stderr(samples[::-1])


def test_confidence_interval_is_symmetric():
    low, high = confidence_interval(1.0, 0.5)
    assert 1.0 - low == pytest.approx(high - 1.0)
    assert high - 1.0 == pytest.approx(1.959964 * 0.5, rel=1e-6)


def test_z_score_edge_cases():
    assert z_score(1.0, 0.5) == 2.0
    assert z_score(0.0, 0.0) == 0.0
    assert z_score(-1.0, 0.0) == -math.inf


def test_rates():
    assert richardson_ratio(4.0, 1.0) == 4.0
    assert richardson_ratio(1.0, 0.0) == math.inf
    steps = [0.1, 0.05, 0.025]
    assert empirical_order([s ** 2 for s in steps], steps) == pytest.approx(2.0)


def test_loglog_slope():
    levels = np.array([4.0, 8.0, 16.0, 32.0])
    fit = loglog_slope(levels, 3.0 * levels ** -2.5)
    assert fit.slope == pytest.approx(-2.5)
    assert fit.ci[0] <= fit.slope <= fit.ci[1]
    with pytest.raises(ValueError, match="strictly positive"):
        loglog_slope([1.0, 2.0], [1.0, 0.0])


class TestPathChunks:
    def test_chunks_cover_paths_in_order(self):
        chunks = path_chunks(10, 4)
        assert [len(c) for c in chunks] == [4, 4, 2]
        assert np.array_equal(np.concatenate(chunks), np.arange(10))

    def test_thread_count_does_not_change_result(self):
        def fn(ids):
            return np.stack([ids, ids ** 2], axis=1).astype(float)
        one = map_path_chunks(fn, 37, chunk_size=5, threads=1)
        many = map_path_chunks(fn, 37, chunk_size=5, threads=4)
        assert np.array_equal(one, many)
        assert one.shape == (37, 2)


class TestBuildReport:
    def test_decreasing_estimates_pass(self):
        levels = [2, 4, 8]
        per_path = np.tile(np.array(levels, dtype=float) ** -3.0, (5, 1))
        report = build_report(levels, per_path, slope_limit=-1.5, exceedance=[0.5, 0.2, 0.0])
        assert report.passed
        assert report.strictly_decreasing
        assert report.slope == pytest.approx(-3.0)
        assert report.to_dict()["exceedance"] == [0.5, 0.2, 0.0]

    def test_shallow_slope_fails(self):
        levels = [2, 4, 8]
        per_path = np.tile(np.array(levels, dtype=float) ** -1.0, (5, 1))
        assert not build_report(levels, per_path, slope_limit=-1.5).passed

    def test_zero_estimates_leave_slope_undefined(self):
        report = build_report([2, 4], np.zeros((3, 2)), slope_limit=-1.5)
        assert math.isnan(report.slope)
        assert not report.passed
