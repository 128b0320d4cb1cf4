import numpy as np
import pytest

from src.wasserstein_transport.errors import IllConditionedDensityError
from src.wasserstein_transport.flow import DENSITY_FLOOR, Density, VelocityPotential
from src.wasserstein_transport.tangent import (
    TangentField,
    complement,
    div_mu,
    hat_density,
    l2_norm,
    log_gradient,
    orthogonality_residual,
    project,
    projection_derivative_residual,
    witten_laplacian,
)
from src.wasserstein_transport.torus_field import TWO_PI, GridField, differentiate, grid, integrate


N_GRID = 64


def random_pair(rng):
    rho = Density.from_fourier(0.15 * rng.uniform(-1, 1, 3), 0.15 * rng.uniform(-1, 1, 3), N_GRID)
    x = grid(N_GRID)
    v = rng.normal() + sum(rng.normal() * np.cos(k * x) + rng.normal() * np.sin(k * x) for k in range(1, 6))
    return rho, GridField(v)


@pytest.fixture
def rho():
    return Density.from_fourier([0.3], [0.1], N_GRID)


def test_hat_density_is_a_probability_density(rho):
    hat = hat_density(rho)
    assert integrate(hat) == pytest.approx(1.0, abs=1e-13)
    assert np.all(hat.values > 0.0)


def test_uniform_projection_removes_mean():
    uniform = Density.uniform(N_GRID)
    v = GridField.from_function(lambda x: 2.0 + np.sin(x), N_GRID)
    assert np.allclose(project(uniform, v).values.values, np.sin(grid(N_GRID)), atol=1e-13)


class TestProjectionSuite:
    """Randomized checks of the tangent projection."""

    @pytest.fixture
    def pairs(self):
        rng = np.random.default_rng(7)
        return [random_pair(rng) for _ in range(100)]

    def test_zero_mean(self, pairs):
        assert max(abs(project(rho, v).mean) for rho, v in pairs) < 1e-9

    def test_idempotent(self, pairs):
        gaps = [(project(rho, project(rho, v).values).values - project(rho, v).values).max_abs() for rho, v in pairs]
        assert max(gaps) < 1e-9

    def test_orthogonal_in_weighted_l2(self, pairs):
        """(v - Pi v) is L^2(rho dx)-orthogonal to every zero-mean field."""
        rng = np.random.default_rng(11)
        worst = 0.0
        for rho, v in pairs:
            w = project(rho, GridField(rng.normal(size=N_GRID))).values
            worst = max(worst, abs(integrate(complement(rho, v) * w * rho.values)))
        assert worst < 1e-9

    def test_orthogonality_residual(self, pairs):
        psi = GridField.from_function(lambda x: np.sin(2 * x) + np.cos(x), N_GRID)
        assert max(abs(orthogonality_residual(rho, v, psi)) for rho, v in pairs) < 1e-9


def test_tangent_field_check(rho):
    assert TangentField(GridField.from_function(np.sin, N_GRID)).is_tangent()
    assert not TangentField(GridField.constant(1.0, N_GRID)).is_tangent()


def test_log_gradient(rho):
    x = grid(N_GRID)
    density = 1.0 + 0.3 * np.cos(x) + 0.1 * np.sin(x)
    expected = (-0.3 * np.sin(x) + 0.1 * np.cos(x)) / density
    assert np.max(np.abs(log_gradient(rho).values - expected)) < 1e-10


def test_witten_laplacian_on_uniform():
    f = GridField.from_function(np.sin, N_GRID)
    assert np.allclose(witten_laplacian(Density.uniform(N_GRID), f).values, -np.sin(grid(N_GRID)), atol=1e-12)


def test_div_mu_is_adjoint_of_gradient(rho):
    """int Z f' rho dx = -int div_mu(Z) f rho dx."""
    Z = GridField.from_function(lambda x: np.cos(2 * x) + 0.5, N_GRID)
    f = GridField.from_function(lambda x: np.sin(3 * x), N_GRID)
    lhs = integrate(Z * differentiate(f) * rho.values)
    rhs = -integrate(div_mu(rho, Z) * f * rho.values)
    assert lhs == pytest.approx(rhs, abs=1e-10)


def test_l2_norm(rho):
    assert l2_norm(rho, GridField.constant(2.0, N_GRID)) == pytest.approx(2.0, abs=1e-12)


def test_floor_density_is_ill_conditioned():
    h = TWO_PI / N_GRID
    values = np.full(N_GRID, (1.0 - DENSITY_FLOOR * h) / (h * (N_GRID - 1)))
    values[5] = DENSITY_FLOOR
    rho = Density(GridField(values))
    with pytest.raises(IllConditionedDensityError):
        hat_density(rho)


class TestProjectionDerivative:
    @pytest.fixture
    def setup(self):
        V = VelocityPotential([], [1.0])
        rho0 = Density.from_fourier([0.3], [], N_GRID)
        Z = GridField.from_function(lambda x: 1.0 + np.cos(x), N_GRID)
        return V, rho0, Z

    def test_residual_is_small(self, setup):
        V, rho0, Z = setup
        assert projection_derivative_residual(V, rho0, Z, 0.5, 5e-3) < 1e-3

    def test_richardson_decay(self, setup):
        V, rho0, Z = setup
        coarse = projection_derivative_residual(V, rho0, Z, 0.5, 1e-2)
        fine = projection_derivative_residual(V, rho0, Z, 0.5, 5e-3)
        assert coarse / fine >= 3.5

    def test_time_window_validated(self, setup):
        V, rho0, Z = setup
        with pytest.raises(ValueError, match="0 < t - h"):
            projection_derivative_residual(V, rho0, Z, 0.01, 0.02)
