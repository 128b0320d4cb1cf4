import numpy as np
import pytest

from src.wasserstein_transport.errors import DiffeomorphismError
from src.wasserstein_transport.torus_field import (
    TWO_PI,
    GridField,
    LiftedMap,
    compose,
    differentiate,
    grid,
    integrate,
    interpolate,
    invert_lifts,
    invert_monotone,
    read_csv,
    trapezoid,
    trig_interpolate,
    write_csv,
)


@pytest.fixture
def n():
    return 64


@pytest.fixture
def wavy_map(n):
    """x + 0.3 sin x, a diffeomorphism (Jacobian 1 + 0.3 cos x > 0)."""
    return LiftedMap.from_displacement(GridField.from_function(lambda x: 0.3 * np.sin(x), n))


def test_grid_size_validation():
    """Grid sizes must be powers of two >= 8."""
    with pytest.raises(ValueError, match="power of two"):
        grid(12)
    with pytest.raises(ValueError, match="power of two"):
        GridField(np.zeros(4))


def test_grid_field_is_read_only(n):
    f = GridField.from_function(np.sin, n)
    with pytest.raises(ValueError):
        f.values[0] = 1.0


def test_grid_field_rejects_non_finite(n):
    values = np.zeros(n)
    values[3] = np.nan
    with pytest.raises(ValueError, match="finite"):
        GridField(values)


def test_mismatched_grids_raise():
    with pytest.raises(ValueError, match="Grid sizes differ"):
        GridField.constant(1.0, 16) + GridField.constant(1.0, 32)


@pytest.mark.parametrize("order,expected", [
    (1, lambda x: 3.0 * np.cos(3.0 * x)),
    (2, lambda x: -9.0 * np.sin(3.0 * x)),
    (3, lambda x: -27.0 * np.cos(3.0 * x)),
])
def test_spectral_derivative_of_trig_polynomial(n, order, expected):
    f = GridField.from_function(lambda x: np.sin(3.0 * x), n)
    assert np.max(np.abs(differentiate(f, order).values - expected(grid(n)))) < 1e-10


def test_derivative_order_validation(n):
    with pytest.raises(ValueError, match="order"):
        differentiate(GridField.constant(1.0, n), 4)


def test_integrate_constant_and_trig(n):
    assert integrate(GridField.constant(1.0, n)) == pytest.approx(TWO_PI, abs=1e-12)
    assert abs(integrate(GridField.from_function(lambda x: np.cos(5 * x), n))) < 1e-12


def test_trapezoid_batches_along_last_axis(n):
    values = np.stack([np.ones(n), 2.0 * np.ones(n)])
    assert np.allclose(trapezoid(values), [TWO_PI, 2.0 * TWO_PI])


def test_interpolation_is_exact_for_band_limited(n):
    f = GridField.from_function(lambda x: np.cos(2 * x) + 0.5 * np.sin(7 * x), n)
    x = np.array([0.1, 1.234, 5.9, 7.0, -2.0])
    exact = np.cos(2 * x) + 0.5 * np.sin(7 * x)
    assert np.max(np.abs(interpolate(f, x) - exact)) < 1e-12


def test_cubic_interpolation_fallback(n):
    f = GridField.from_function(np.sin, n)
    x = np.linspace(0.0, TWO_PI, 17)
    assert np.max(np.abs(interpolate(f, x, method="cubic") - np.sin(x))) < 1e-5
    with pytest.raises(ValueError, match="Interpolation method"):
        interpolate(f, x, method="linear")


def test_batched_trig_interpolation(n):
    rows = np.stack([np.sin(grid(n)), np.cos(grid(n))])
    x = np.array([[0.5, 1.0], [0.5, 1.0]])
    out = trig_interpolate(rows, x)
    assert np.allclose(out, [np.sin([0.5, 1.0]), np.cos([0.5, 1.0])], atol=1e-12)


def test_lifted_map_validation(n):
    with pytest.raises(DiffeomorphismError):
        LiftedMap(grid(n)[::-1])
    with pytest.raises(DiffeomorphismError):
        LiftedMap(2.0 * grid(n))


def test_jacobian_of_lift(wavy_map, n):
    assert np.max(np.abs(wavy_map.jacobian().values - (1.0 + 0.3 * np.cos(grid(n))))) < 1e-12


def test_compose_with_identity_and_rotation(n):
    f = GridField.from_function(np.sin, n)
    assert np.allclose(compose(f, LiftedMap.identity(n)).values, f.values, atol=1e-13)
    rotated = compose(f, LiftedMap.rotation(n, 0.7))
    assert np.allclose(rotated.values, np.sin(grid(n) + 0.7), atol=1e-12)


def test_compose_mismatch_raises(n):
    with pytest.raises(ValueError, match="Grid sizes differ"):
        compose(GridField.constant(0.0, n), LiftedMap.identity(2 * n))


class TestInversion:
    def test_round_trip(self, wavy_map):
        inverse = invert_monotone(wavy_map)
        assert np.max(np.abs(wavy_map(inverse.lift) - grid(wavy_map.n))) < 1e-10

    def test_rotation_inverse(self, n):
        inverse = invert_monotone(LiftedMap.rotation(n, 1.3))
        assert np.allclose(inverse.lift, grid(n) - 1.3, atol=1e-12)

    def test_whole_turns_are_preserved(self, wavy_map, n):
        shifted = LiftedMap(wavy_map.lift + 2.0 * TWO_PI)
        inverse = invert_monotone(shifted)
        assert np.max(np.abs(shifted(inverse.lift) - grid(n))) < 1e-10

    def test_batch_matches_single(self, wavy_map, n):
        batch = np.stack([wavy_map.lift, LiftedMap.rotation(n, 0.4).lift])
        inverses = invert_lifts(batch)
        assert np.allclose(inverses[0], invert_monotone(wavy_map).lift, atol=1e-12)
        assert np.allclose(inverses[1], grid(n) - 0.4, atol=1e-12)

    def test_nyquist_component_on_coarse_grid(self):
        """cos(8x) is the Nyquist mode at n = 16; the interpolant stays monotone."""
        x = grid(16)
        m = LiftedMap(x + 0.3 * np.sin(x) + 0.02 * np.cos(8 * x))
        inverse = invert_monotone(m)
        assert np.max(np.abs(m(inverse.lift) - x)) < 1e-10

    def test_folding_map_is_rejected(self, n):
        """Displacement 1.5 sin x has Jacobian 1 + 1.5 cos x < 0 near pi."""
        with pytest.raises(DiffeomorphismError):
            invert_lifts(grid(n) + 1.5 * np.sin(grid(n)))


def test_csv_round_trip(tmp_path, n):
    f = GridField.from_function(lambda x: np.exp(np.sin(x)), n)
    path = tmp_path / "field.csv"
    write_csv(f, str(path))
    assert path.read_text().startswith("# n=64 domain=2pi")
    assert np.array_equal(read_csv(str(path)).values, f.values)


def test_csv_header_required(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("1.0\n2.0\n")
    with pytest.raises(ValueError, match="header"):
        read_csv(str(path))
