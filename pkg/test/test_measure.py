import os
import sys

import numpy as np
import pytest
from scipy.integrate import quad

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
import measure as measure_module
from measure import (
    build_coefficients, centering_defect, classify_centering, invariant_measure_1d_closed_form,
    laminated_centering, require_centered, solve_invariant_measure,
)
from models import Tolerances
from torus import TorusGrid
from utils import CenteringError, ConfigError, EllipticityError, PositivityError


def coefficients(a, b, shape):
    if isinstance(a, str):
        a, b = [[a]], [b]
    return build_coefficients(a, b, TorusGrid(shape))


def drifted_exponential(y):
    return np.exp(np.sin(2 * np.pi * y) / (2 * np.pi))


@pytest.fixture
def cosine_drift():
    return coefficients("1", "cos(2*pi*y1)", [256])


def test_certified_constants(cosine_drift):
    assert cosine_drift.lam == pytest.approx(1.0)
    assert cosine_drift.b_sup == pytest.approx(1.0)
    assert cosine_drift.Lambda >= 1.0


def test_rejects_degenerate_diffusion():
    with pytest.raises(EllipticityError):
        coefficients("sin(2*pi*y1)", "0", [64])


def test_identity_measure():
    coeffs = coefficients([["1", "0"], ["0", "1"]], ["0", "0"], [16, 16])
    measure = solve_invariant_measure(coeffs)
    np.testing.assert_allclose(measure.m.values, 1.0, atol=1e-12)
    np.testing.assert_allclose(measure.centering_defect, 0.0, atol=1e-14)


def test_cosine_drift_matches_exponential(cosine_drift):
    measure = solve_invariant_measure(cosine_drift)
    Z, _ = quad(drifted_exponential, 0.0, 1.0, epsabs=1e-14, epsrel=1e-14)
    y = cosine_drift.grid.coordinates[0]
    np.testing.assert_allclose(measure.m.values, drifted_exponential(y) / Z, atol=1e-8)
    assert measure.m.mean() == pytest.approx(1.0, abs=1e-12)
    assert measure.min_value > 0
    assert abs(measure.centering_defect[0]) < 1e-10
    assert measure.residual <= 1e-10


def test_constant_drift_is_not_centered():
    coeffs = coefficients("1", "1", [256])
    measure = solve_invariant_measure(coeffs)
    np.testing.assert_allclose(measure.m.values, 1.0, atol=1e-10)
    assert measure.centering_defect[0] == pytest.approx(1.0, abs=1e-10)
    assert classify_centering(measure.centering_defect) == "non-centered"


@pytest.mark.parametrize("a, b", [
    ("1", "0"),
    ("1", "cos(2*pi*y1)"),
    ("2+sin(2*pi*y1)", "0"),
    ("2+sin(2*pi*y1)", "cos(2*pi*y1)"),
    ("1.5+0.5*cos(2*pi*y1)", "sin(2*pi*y1)+0.3*cos(4*pi*y1)"),
    ("1", "1"),
    ("2+sin(2*pi*y1)", "0.5+cos(2*pi*y1)"),
])
def test_solver_matches_closed_form(a, b):
    coeffs = coefficients(a, b, [256])
    solved = solve_invariant_measure(coeffs)
    closed = invariant_measure_1d_closed_form(coeffs)
    np.testing.assert_allclose(solved.m.values, closed.values, atol=1e-8)


def test_harmonic_closed_form():
    coeffs = coefficients("2+sin(2*pi*y1)", "0", [256])
    y = coeffs.grid.coordinates[0]
    closed = invariant_measure_1d_closed_form(coeffs)
    np.testing.assert_allclose(closed.values, np.sqrt(3.0) / (2 + np.sin(2 * np.pi * y)), atol=1e-12)


def test_scaling_invariance():
    base = solve_invariant_measure(coefficients("2+sin(2*pi*y1)", "cos(2*pi*y1)", [128]))
    scaled = solve_invariant_measure(coefficients("4*(2+sin(2*pi*y1))", "4*cos(2*pi*y1)", [128]))
    np.testing.assert_allclose(scaled.m.values, base.m.values, atol=1e-12)


def test_laminated_measure_depends_on_first_variable_only():
    coeffs = coefficients([["2+sin(2*pi*y1)", "0"], ["0", "1"]], ["cos(2*pi*y1)", "sin(2*pi*y1)"], [32, 16])
    measure = solve_invariant_measure(coeffs)
    m = measure.m.values
    assert np.abs(m - m[:, :1]).max() <= 1e-10
    line = solve_invariant_measure(coefficients("2+sin(2*pi*y1)", "cos(2*pi*y1)", [32]))
    np.testing.assert_allclose(m[:, 0], line.m.values, atol=1e-10)


def test_coarse_grid_keeps_exponential_oracle():
    coeffs = coefficients("1", "cos(2*pi*y1)", [32])
    measure = solve_invariant_measure(coeffs)
    Z, _ = quad(drifted_exponential, 0.0, 1.0, epsabs=1e-14, epsrel=1e-14)
    y = coeffs.grid.coordinates[0]
    np.testing.assert_allclose(measure.m.values, drifted_exponential(y) / Z, atol=1e-8)
    assert abs(measure.centering_defect[0]) < 1e-10


def test_nonpositive_measure_is_refused(monkeypatch, cosine_drift):
    y = cosine_drift.grid.coordinates[0]

    def sign_changing(*args, **kwargs):
        return 1.0 + 2.0 * np.cos(2 * np.pi * y), {"method": "direct", "residual": 0.0}

    monkeypatch.setattr(measure_module, "solve_periodic", sign_changing)
    with pytest.raises(PositivityError):
        solve_invariant_measure(cosine_drift)


@pytest.mark.parametrize("b, defect", [
    (["0", "cos(2*pi*y1)"], [0.0, 0.0]),
    (["0", "1+cos(2*pi*y1)"], [0.0, 1.0]),
])
def test_laminated_centering_equivalence(b, defect):
    coeffs = coefficients([["1", "0"], ["0", "1"]], b, [32, 16])
    measure = solve_invariant_measure(coeffs)
    np.testing.assert_allclose(measure.centering_defect, defect, atol=1e-10)
    conditions = laminated_centering(coeffs)
    np.testing.assert_allclose(conditions, defect, atol=1e-10)


def test_laminated_centering_needs_laminated_data():
    coeffs = coefficients([["1", "0"], ["0", "1"]], ["0", "cos(2*pi*y2)"], [16, 16])
    with pytest.raises(ConfigError):
        laminated_centering(coeffs)


def test_centering_defect_of_zero_drift():
    coeffs = coefficients("2+sin(2*pi*y1)", "0", [64])
    measure = solve_invariant_measure(coeffs)
    assert centering_defect(coeffs, measure.m).tolist() == [0.0]


@pytest.mark.parametrize("defect, status", [
    ([0.0], "centered"),
    ([5e-9], "centered"),
    ([1e-6], "warning"),
    ([0.0, 1e-3], "non-centered"),
])
def test_classify_centering(defect, status):
    assert classify_centering(np.array(defect), Tolerances()) == status


def test_require_centered():
    assert require_centered(np.array([1e-6])) == "warning"
    with pytest.raises(CenteringError) as info:
        require_centered(np.array([1.0]))
    assert info.value.exit_code == 3
    assert require_centered(np.array([1.0]), force=True) == "non-centered"
