import os
import sys

import numpy as np
import pytest

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
from torus import (
    MatrixField, ScalarField, TorusGrid, TrigInterpolant, VectorField, antiderivative_1d, dealiased_product, divergence_operator,
    interpolate, laplacian, operator_scale, partial_derivative, pointwise_matrix_sqrt, read_field, restrict,
    solve_periodic, solve_poisson_torus, upsample, write_field,
)
from utils import ConfigError, EllipticityError, ResolutionError, SolvabilityError


@pytest.fixture
def grid2():
    return TorusGrid([32, 16])


def test_grid_validation():
    with pytest.raises(ConfigError):
        TorusGrid([7])
    with pytest.raises(ConfigError):
        TorusGrid([6, 8])
    with pytest.raises(ConfigError):
        TorusGrid([8, 8, 8, 8])


def test_derivative_of_trig_is_exact(grid2):
    y1, y2 = grid2.coordinates
    u = ScalarField(grid2, np.sin(2 * np.pi * y1) * np.cos(4 * np.pi * y2))
    d1 = partial_derivative(u, 1)
    d2 = partial_derivative(u, 2)
    np.testing.assert_allclose(d1.values, 2 * np.pi * np.cos(2 * np.pi * y1) * np.cos(4 * np.pi * y2), atol=1e-11)
    np.testing.assert_allclose(d2.values, -4 * np.pi * np.sin(2 * np.pi * y1) * np.sin(4 * np.pi * y2), atol=1e-11)
    with pytest.raises(ValueError):
        partial_derivative(u, 3)


def test_nyquist_mode_has_zero_derivative():
    grid = TorusGrid([8])
    u = ScalarField(grid, np.cos(np.pi * np.arange(8)))
    np.testing.assert_allclose(partial_derivative(u, 1).values, 0.0, atol=1e-14)


def test_poisson_round_trip(grid2):
    y1, y2 = grid2.coordinates
    rhs = ScalarField(grid2, np.cos(2 * np.pi * y1) + np.sin(2 * np.pi * (y1 + y2)))
    h = solve_poisson_torus(rhs)
    assert abs(h.mean()) < 1e-14
    np.testing.assert_allclose(laplacian(h).values, rhs.values, atol=1e-12)


def test_poisson_refuses_nonzero_mean(grid2):
    with pytest.raises(SolvabilityError):
        solve_poisson_torus(ScalarField(grid2, np.ones(grid2.shape)))


def test_fields_are_immutable(grid2):
    u = ScalarField(grid2, np.zeros(grid2.shape))
    with pytest.raises(ValueError):
        u.values[0, 0] = 1.0


def test_matrix_symmetry_flag(grid2):
    values = np.zeros((2, 2) + grid2.shape)
    values[0, 1] = 1.0
    with pytest.raises(ValueError):
        MatrixField(grid2, values, "symmetric")
    values[1, 0] = -1.0
    phi = MatrixField(grid2, values, "antisymmetric")
    assert phi.symmetric_part().norm_inf() == 0.0


def test_matrix_sqrt(grid2):
    y1, _ = grid2.coordinates
    values = np.zeros((2, 2) + grid2.shape)
    values[0, 0] = 2 + np.sin(2 * np.pi * y1)
    values[1, 1] = 1.0
    values[0, 1] = values[1, 0] = 0.3
    field = MatrixField(grid2, values, "symmetric")
    root = pointwise_matrix_sqrt(field, 0.5)
    square = np.einsum("ik...,kj...->ij...", root.values, root.values)
    np.testing.assert_allclose(square, values, atol=1e-12)
    with pytest.raises(EllipticityError):
        pointwise_matrix_sqrt(field, 5.0)


def test_antiderivative_1d():
    grid = TorusGrid([64])
    y = grid.coordinates[0]
    slope, periodic = antiderivative_1d(ScalarField(grid, 1.0 + np.cos(2 * np.pi * y)))
    assert slope == pytest.approx(1.0)
    np.testing.assert_allclose(periodic.values, np.sin(2 * np.pi * y) / (2 * np.pi), atol=1e-14)


@pytest.mark.parametrize("method, atol", [("trig", 1e-13), ("linear", 6e-2)])
def test_interpolation(grid2, method, atol):
    y1, y2 = grid2.coordinates
    field = ScalarField(grid2, np.cos(2 * np.pi * y1) * np.sin(2 * np.pi * y2))
    points = np.array([[0.1234, 0.777], [1.5, -0.25], [0.0, 0.0]])
    expected = np.cos(2 * np.pi * points[:, 0]) * np.sin(2 * np.pi * points[:, 1])
    np.testing.assert_allclose(interpolate([field], points, method)[:, 0], expected, atol=atol)


@pytest.mark.parametrize("order", [("fixed_point",), ("direct",), ("krylov",)])
def test_solve_periodic_strategies(order):
    grid = TorusGrid([16, 16])
    y1, y2 = grid.coordinates
    A = np.zeros((2, 2) + grid.shape)
    A[0, 0] = 2 + np.sin(2 * np.pi * y1)
    A[1, 1] = 1.5 + 0.5 * np.cos(2 * np.pi * y2)
    reference = 2.0
    operator = divergence_operator(A, None, grid, reference)
    exact = np.cos(2 * np.pi * y1) * np.sin(2 * np.pi * y2)
    rhs = operator(exact)
    u, info = solve_periodic(operator, rhs, grid, scale=operator_scale(3.0, 0.0, grid),
                             precondition=reference, tol=1e-12, order=order)
    assert info["method"] == order[0]
    assert info["residual"] <= 1e-12
    np.testing.assert_allclose(u, exact, atol=1e-9)


def test_solve_periodic_reports_failure():
    grid = TorusGrid([16])
    y = grid.coordinates[0]
    # Richardson with a preconditioner three times too weak diverges
    operator = divergence_operator(np.full((1, 1, 16), 3.0), None, grid, 3.0)
    with pytest.raises(ResolutionError):
        solve_periodic(operator, np.cos(2 * np.pi * y), grid, tol=1e-12, max_iterations=5, order=("fixed_point",))


def test_field_files(tmp_path, grid2):
    y1, y2 = grid2.coordinates
    scalar = ScalarField(grid2, np.sin(2 * np.pi * y1) + y2)
    vector = VectorField.from_components([scalar, scalar * 2.0])
    write_field(str(tmp_path), "u", scalar)
    write_field(str(tmp_path), "v", vector)
    with open(tmp_path / "u.csv", newline="") as f:
        lines = f.read().split("\r\n")
    assert lines[0] == "value"
    assert len(lines) == grid2.size + 2
    np.testing.assert_array_equal(read_field(str(tmp_path), "u").values, scalar.values)
    again = read_field(str(tmp_path), "v")
    assert isinstance(again, VectorField)
    np.testing.assert_array_equal(again.values, vector.values)


def test_parseval(grid2):
    rng = np.random.default_rng(0)
    u = ScalarField(grid2, rng.standard_normal(grid2.shape))
    energy = np.sum(np.abs(u.coefficients) ** 2)
    assert energy == pytest.approx(np.mean(u.values ** 2), rel=1e-12)


def test_dealiased_product_drops_unresolved_modes():
    grid = TorusGrid([8])
    u = np.cos(6 * np.pi * grid.coordinates[0])
    np.testing.assert_allclose(dealiased_product(u, u, grid), 0.5, atol=1e-14)
    # collocation folds the product's mode 6 onto mode 2
    assert np.abs(u * u - 0.5).max() > 0.4


def test_dealiased_product_of_resolved_fields(grid2):
    y1, y2 = grid2.coordinates
    a = np.sin(2 * np.pi * y1) * np.cos(2 * np.pi * y2)
    b = np.cos(4 * np.pi * y1) + np.sin(2 * np.pi * y2)
    np.testing.assert_allclose(dealiased_product(a, b, grid2), a * b, atol=1e-13)
    product = ScalarField(grid2, a) * ScalarField(grid2, b)
    np.testing.assert_allclose(product.values, a * b, atol=1e-13)
    stacked = dealiased_product(np.stack([a, b]), b, grid2)
    np.testing.assert_allclose(stacked, np.stack([a * b, b * b]), atol=1e-13)


def test_upsample_interpolates_and_restrict_inverts():
    grid = TorusGrid([8, 8])
    values = np.random.default_rng(3).standard_normal(grid.shape)
    fine = upsample(values, grid)
    assert fine.shape == (16, 16)
    np.testing.assert_allclose(fine[::2, ::2], values, atol=1e-13)
    np.testing.assert_allclose(restrict(fine, grid), values, atol=1e-13)


def test_trig_interpolant_matches_fourier_sum():
    grid = TorusGrid([6, 4, 8])
    rng = np.random.default_rng(5)
    fields = [ScalarField(grid, rng.standard_normal(grid.shape)) for _ in range(2)]
    points = rng.uniform(-1.0, 2.0, size=(5000, 3))
    interp = TrigInterpolant(fields, block=1024)
    assert interp.n_modes == 6 * 4 * 8
    basis = np.exp(2j * np.pi * (points @ interp.k))
    np.testing.assert_allclose(interp(points), (basis @ interp.c.T).real, atol=1e-11)
    np.testing.assert_allclose(interp(grid.coordinates.reshape(3, -1).T)[:, 0], fields[0].values.ravel(), atol=1e-12)
