import numpy as np
import pytest

from src.wasserstein_transport.flow import Density, push_density
from src.wasserstein_transport.stochastic_flow import BrownianDriver, NoiseBasis, sample_driver, simulate_flow
from src.wasserstein_transport.tangent import hat_density, log_gradient
from src.wasserstein_transport.torus_field import TWO_PI, GridField, differentiate, grid, integrate, trapezoid
from src.wasserstein_transport.transport_stoch import (
    channel_terms,
    drift_coefficients,
    envelope_check,
    galerkin_convergence,
    integrate_stoch_parallel,
    lambda_theta,
    rs_consolidated,
    rs_identity_check,
    rs_terms,
)

N_GRID = 32


@pytest.fixture
def rho0():
    return Density.from_fourier([0.3], [], N_GRID)


@pytest.fixture
def g0():
    return GridField.from_function(np.sin, N_GRID)


@pytest.fixture
def stoch_state():
    basis = NoiseBasis(2, 2.0)
    driver = sample_driver(9, 0.01, 50, basis.n_channels, paths=3)
    return basis, simulate_flow(N_GRID, basis, driver)


class TestDriftCoefficients:
    def test_uniform_identity_closed_form(self):
        basis = NoiseBasis.single_channel("cos", 1)
        state = simulate_flow(N_GRID, basis, BrownianDriver.zero(0.1, 1, 2))
        coeffs = drift_coefficients(basis, state, Density.uniform(N_GRID))
        assert np.allclose(coeffs.a[0, 0], -TWO_PI * np.sin(grid(N_GRID)), atol=1e-12)

    def test_change_of_variables(self, stoch_state, rho0):
        """int a^2 rho0 dx = int (phi'')^2 / rho_t dx."""
        basis, state = stoch_state
        coeffs = drift_coefficients(basis, state, rho0)
        F = basis.fields(grid(N_GRID))
        for path in range(state.paths):
            rho_t = push_density(rho0, state.flow_state(path))
            for c in range(len(basis.channels)):
                lhs = trapezoid(coeffs.a[c, path] ** 2 * rho0.array)
                rhs = trapezoid(F.dv[c] ** 2 / rho_t.array)
                assert lhs == pytest.approx(rhs, rel=1e-8)


class TestLambdaTheta:
    def test_zero_field(self, stoch_state, rho0):
        basis, state = stoch_state
        coeffs = drift_coefficients(basis, state, rho0)
        lam, theta = lambda_theta(0, GridField.constant(0.0, N_GRID), coeffs, rho0, state)
        assert lam.max_abs() == 0.0 and theta.max_abs() == 0.0

    def test_matches_batched_terms(self, stoch_state, rho0, g0):
        basis, state = stoch_state
        coeffs = drift_coefficients(basis, state, rho0)
        f = np.tile(g0.values, (state.paths, 1))
        lam_all, theta_all, _ = channel_terms(basis, state.X, state.J, f, rho0.array)
        for c in range(len(basis.channels)):
            lam, theta = lambda_theta(c, g0, coeffs, rho0, state, path=1)
            assert np.allclose(lam.values, lam_all[c, 1], atol=1e-12)
            assert np.allclose(theta.values, theta_all[c, 1], atol=1e-12)

    def test_envelopes_on_random_fields(self, stoch_state, rho0):
        basis, state = stoch_state
        rng = np.random.default_rng(21)
        worst_lambda = worst_theta = 0.0
        for _ in range(100):
            f = rng.normal(size=(state.paths, N_GRID))
            ratios = envelope_check(basis, state.X, state.J, f, rho0)
            worst_lambda = max(worst_lambda, ratios["max_lambda_ratio"])
            worst_theta = max(worst_theta, ratios["max_theta_ratio"])
        assert worst_lambda <= 1.0 + 1e-8
        assert 0.0 < worst_theta <= 1.0 + 1e-8


class TestIntegration:
    def test_zero_increments(self, g0, rho0):
        basis = NoiseBasis(1, 3.0)
        driver = BrownianDriver.zero(0.05, 10, basis.n_channels)
        heun = integrate_stoch_parallel(g0, basis, driver, rho0)
        assert np.allclose(heun.f[-1][0], g0.values, atol=1e-14)
        ito = integrate_stoch_parallel(g0, basis, driver, rho0, scheme="ito-euler")
        assert np.max(np.abs(ito.f[-1][0] - g0.values)) > 1e-6

    def test_norm_drift_refines(self, g0):
        uniform = Density.uniform(N_GRID)
        basis = NoiseBasis.single_channel("cos", 1, 3.0)
        fine = sample_driver(4, 2.5e-3, 400, basis.n_channels, paths=8)
        fine_drift = np.max(integrate_stoch_parallel(g0, basis, fine, uniform).norm_drift_rel)
        coarse_drift = np.max(integrate_stoch_parallel(g0, basis, fine.coarsen(4), uniform).norm_drift_rel)
        assert fine_drift <= 1e-2
        assert coarse_drift / fine_drift >= 1.7

    def test_pathwise_tangency(self, g0, rho0):
        basis = NoiseBasis(2, 3.0)
        driver = sample_driver(8, 2.5e-3, 200, basis.n_channels, paths=4)
        path = integrate_stoch_parallel(g0, basis, driver, rho0)
        assert np.max(path.max_abs_mean) <= 1e-3
        assert np.max(np.abs(np.concatenate(path.eulerian_mean))) <= 1e-3

    def test_eulerian_norm_matches_lagrangian(self, g0, rho0):
        basis = NoiseBasis(2, 3.0)
        driver = sample_driver(8, 1e-2, 50, basis.n_channels, paths=2)
        path = integrate_stoch_parallel(g0, basis, driver, rho0, output_every=25)
        lagrangian = path.norm[:, [0, 25, 50]]
        assert np.allclose(np.stack(path.eulerian_norm, axis=1), lagrangian, rtol=1e-8)

    def test_linearity(self, rho0):
        basis = NoiseBasis(2, 3.0)
        driver = sample_driver(2, 1e-2, 40, basis.n_channels, paths=2)
        a = GridField.from_function(np.sin, N_GRID)
        b = GridField.from_function(lambda x: np.cos(3 * x), N_GRID)
        fa = integrate_stoch_parallel(a, basis, driver, rho0).f[-1]
        fb = integrate_stoch_parallel(b, basis, driver, rho0).f[-1]
        fab = integrate_stoch_parallel(a - 0.5 * b, basis, driver, rho0).f[-1]
        assert np.max(np.abs(fab - fa + 0.5 * fb)) < 1e-9

    def test_ito_and_stratonovich_agree(self, g0, rho0):
        # cos noise breaks the odd symmetry of g0 = sin, so Lambda does not vanish
        basis = NoiseBasis.single_channel("cos", 1, 3.0)
        fine = sample_driver(6, 0.5 / 160, 160, basis.n_channels, paths=32)
        gaps = []
        for factor in (16, 4):
            driver = fine.coarsen(factor)
            ito = integrate_stoch_parallel(g0, basis, driver, rho0, scheme="ito-euler").f[-1]
            strat = integrate_stoch_parallel(g0, basis, driver, rho0, scheme="strat-heun").f[-1]
            gaps.append(np.mean(trapezoid((ito - strat) ** 2 * rho0.array)))
        assert np.max(np.abs(strat - g0.values)) > 1e-2
        assert gaps[1] > 1e-10
        assert gaps[0] / gaps[1] >= 2.5

    def test_final_state_matches_flow(self, g0, rho0):
        basis = NoiseBasis(2, 3.0)
        driver = sample_driver(3, 1e-2, 20, basis.n_channels, paths=2)
        final = integrate_stoch_parallel(g0, basis, driver, rho0).final_state
        flow = simulate_flow(N_GRID, basis, driver)
        assert final.t == flow.t
        for name in ("X", "J", "log_ktilde", "log_khat"):
            assert np.array_equal(getattr(final, name), getattr(flow, name))
        assert np.max(np.abs(final.log_khat)) > 0.0

    def test_validation(self, g0, rho0):
        basis = NoiseBasis(1, 3.0)
        driver = sample_driver(1, 0.01, 5, basis.n_channels)
        with pytest.raises(ValueError, match="zero mean"):
            integrate_stoch_parallel(GridField.constant(1.0, N_GRID), basis, driver, rho0)
        with pytest.raises(ValueError, match="does not match"):
            integrate_stoch_parallel(g0, basis, driver, rho0, dt=0.02)
        with pytest.raises(ValueError, match="Unknown scheme"):
            integrate_stoch_parallel(g0, basis, driver, rho0, scheme="euler")


class TestDriftAlgebra:
    @pytest.fixture
    def rho(self):
        return Density.from_values((1.0 + 0.3 * np.sin(grid(64))) / TWO_PI)

    def test_constant_potential_gives_zero_terms(self, rho):
        phi = GridField.constant(1.0, 64)
        psi = GridField.from_function(lambda x: np.cos(2 * x), 64)
        terms = rs_terms(rho, phi, psi)
        assert max(t.max_abs() for t in terms.values()) == 0.0

    def test_uniform_density(self):
        uniform = Density.uniform(64)
        phi = GridField.from_function(np.sin, 64)
        psi = GridField.from_function(lambda x: np.cos(2 * x), 64)
        terms = rs_terms(uniform, phi, psi)
        assert (terms["I2"] + terms["J2"]).max_abs() < 1e-12
        assert rs_identity_check(uniform, phi, psi) <= 1e-10

    def test_generic_triple(self, rho):
        phi = GridField.from_function(np.sin, 64)
        psi = GridField.from_function(lambda x: np.cos(2 * x), 64)
        assert rs_identity_check(rho, phi, psi) <= 1e-9
        assert rs_consolidated(rho, phi, psi).max_abs() > 0.0

    def test_log_gradient_form_of_witten_terms(self, rho):
        """(log rho)' rho_hat = -rho_hat', the rewrite used by J2 and J4."""
        rh = hat_density(rho)
        assert (log_gradient(rho) * rh + differentiate(rh)).max_abs() < 1e-9

    def test_random_suite(self):
        rng = np.random.default_rng(5)
        x = grid(64)
        worst = 0.0
        for _ in range(50):
            rho = Density.from_fourier(0.15 * rng.uniform(-1, 1, 3), 0.15 * rng.uniform(-1, 1, 3), 64)
            phi = GridField(sum(0.3 * rng.normal() * np.sin(k * x + rng.uniform(0, TWO_PI)) for k in range(1, 5)))
            psi = GridField(sum(0.3 * rng.normal() * np.cos(k * x + rng.uniform(0, TWO_PI)) for k in range(1, 5)))
            worst = max(worst, rs_identity_check(rho, phi, psi))
        assert worst <= 1e-9


class TestGalerkin:
    def test_rejects_small_q(self, g0):
        with pytest.raises(ValueError, match="q > 5/2"):
            galerkin_convergence(g0, 2.0, [1, 2], 4, 8, 0.05)

    def test_errors_decrease(self, g0):
        rho0 = Density.from_fourier([0.2], [], N_GRID)
        report = galerkin_convergence(g0, 3.0, [1, 2], 4, 16, 0.05, T=0.5, rho0=rho0, chunk_size=8)
        assert report.estimates[0] > report.estimates[1] > 0.0
        assert len(report.exceedance) == 2
        assert report.metrics["predicted_slope"] == -2.5

    def test_reference_level_is_exact(self, g0):
        report = galerkin_convergence(g0, 3.0, [2, 4], 4, 8, 0.05, T=0.25)
        assert report.estimates[-1] == 0.0
