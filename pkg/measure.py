from dataclasses import dataclass

import numpy as np
from numpy.polynomial.legendre import leggauss

from expression import parse_expression, sample_scalar
from log_config import logger
from torus import (
    MatrixField, ScalarField, TorusGrid, TrigInterpolant, VectorField, antiderivative_1d, dealiased_product,
    divergence_operator, operator_scale, solve_periodic,
)
from utils import CenteringError, ConfigError, EllipticityError, PositivityError

GAUSS_POINTS = 6


@dataclass(frozen=True)
class CoefficientSet:
    a_tilde: MatrixField
    b_tilde: VectorField
    lam: float
    Lambda: float
    a_sup: float = 0.0
    div_a_sup: float = 0.0
    b_sup: float = 0.0

    @property
    def grid(self) -> TorusGrid:
        return self.a_tilde.grid

    @property
    def dim(self) -> int:
        return self.grid.dim

    @property
    def reference(self) -> float:
        """Constant diffusion used to split off the Laplacian."""
        return 0.5 * (self.lam + self.a_sup)

    def beta_tilde(self) -> np.ndarray:
        """b̃ - div ã, shape (d, *grid)."""
        return self.b_tilde.values - self.a_tilde.row_divergence().values


@dataclass(frozen=True)
class InvariantMeasure:
    m: ScalarField
    residual: float
    min_value: float
    max_value: float
    centering_defect: np.ndarray
    method: str = "direct"

    @property
    def oscillation(self) -> float:
        return self.max_value - self.min_value


def certify_coefficients(a_tilde: MatrixField, b_tilde: VectorField) -> CoefficientSet:
    """Pointwise eigenvalue scan of ã; λ is the smallest eigenvalue over all nodes."""
    if a_tilde.grid != b_tilde.grid:
        raise ConfigError("ã and b̃ are sampled on different grids")
    if a_tilde.symmetry != "symmetric":
        a_tilde = a_tilde.symmetric_part()
    eigenvalues = np.linalg.eigvalsh(a_tilde.pointwise())
    lowest = eigenvalues[..., 0]
    lam = float(lowest.min())
    if lam <= 0:
        node = np.unravel_index(int(np.argmin(lowest)), a_tilde.grid.shape)
        raise EllipticityError(f"ã is not elliptic: eigenvalue {lam:.6g} at node {tuple(int(k) for k in node)}")
    a_sup = float(np.abs(eigenvalues).max())
    div_a_sup = a_tilde.row_divergence().norm_inf()
    b_sup = b_tilde.norm_inf()
    return CoefficientSet(a_tilde, b_tilde, lam, max(a_sup, div_a_sup, b_sup), a_sup, div_a_sup, b_sup)


def build_coefficients(a_texts, b_texts, grid: TorusGrid) -> CoefficientSet:
    """Parse and sample ã (matrix of formulas) and b̃ (vector of formulas)."""
    d = grid.dim
    a = np.empty((d, d) + grid.shape)
    for i in range(d):
        for j in range(d):
            a[i, j] = sample_scalar(parse_expression(a_texts[i][j], d), grid).values
    a = 0.5 * (a + np.swapaxes(a, 0, 1))
    b = np.stack([sample_scalar(parse_expression(text, d), grid).values for text in b_texts])
    return certify_coefficients(MatrixField(grid, a, "symmetric"), VectorField(grid, b))


def coefficients_from_config(config) -> CoefficientSet:
    return build_coefficients(config.a, config.b, TorusGrid(config.grid.sizes))


def centering_defect(coeffs: CoefficientSet, m: ScalarField) -> np.ndarray:
    return dealiased_product(coeffs.b_tilde.values, m.values, coeffs.grid).reshape(coeffs.dim, -1).mean(axis=1)


def classify_centering(defect, tolerances=None) -> str:
    centered = getattr(tolerances, "centering", 1e-8)
    warning = getattr(tolerances, "centering_warning", 1e-4)
    size = float(np.max(np.abs(defect))) if np.size(defect) else 0.0
    if size <= centered:
        return "centered"
    if size <= warning:
        return "warning"
    return "non-centered"


def require_centered(defect, tolerances=None, force=False) -> str:
    """Log the centering class; refuse non-centered data unless forced."""
    status = classify_centering(defect, tolerances)
    size = float(np.max(np.abs(defect)))
    if status == "warning":
        logger.warning(f"centering defect {size:.3e} is small but above the centered tolerance")
    elif status == "non-centered":
        message = (f"centering condition fails: ∫ b̃ m = {np.round(np.asarray(defect), 12).tolist()}; "
                   f"the large drift does not homogenize")
        if not force:
            raise CenteringError(message)
        logger.warning(f"{message} (continuing because the force flag is set)")
    return status


def solve_invariant_measure(coeffs: CoefficientSet, tol: float = 1e-10, max_iterations: int = 500) -> InvariantMeasure:
    grid = coeffs.grid
    beta_tilde = coeffs.beta_tilde()
    c = coeffs.reference
    operator = divergence_operator(coeffs.a_tilde.values / c, beta_tilde / c, grid, 1.0)
    scale = operator_scale(coeffs.a_sup / c, float(np.abs(beta_tilde).max()) / c, grid)
    values, info = solve_periodic(operator, np.zeros(grid.shape), grid, mean_value=1.0, scale=scale,
                                  tol=tol, max_iterations=max_iterations, order=("direct", "krylov"),
                                  label="invariant measure")
    m = ScalarField(grid, values / values.mean())
    if m.min() <= 0:
        raise PositivityError(f"invariant measure has minimum {m.min():.3e} <= 0; the grid {grid.shape} is too coarse")
    defect = centering_defect(coeffs, m)
    logger.info(f"invariant measure: min {m.min():.6g}, max {m.max():.6g}, centering defect {defect.tolist()}")
    return InvariantMeasure(m, info["residual"], m.min(), m.max(), defect, info["method"])


def _gauss_cumulative(func, grid_1d_points):
    """Cumulative ∫_0^{y_k} func for nodes y_k = k/n, composite Gauss-Legendre per cell."""
    nodes, weights = leggauss(GAUSS_POINTS)
    n = grid_1d_points
    h = 1.0 / n
    left = np.arange(n) * h
    points = left[:, None] + 0.5 * h * (nodes[None, :] + 1.0)
    cell = (func(points.ravel()).reshape(n, GAUSS_POINTS) * weights).sum(axis=1) * 0.5 * h
    return np.concatenate([[0.0], np.cumsum(cell)])


def invariant_measure_1d_closed_form(coeffs: CoefficientSet) -> ScalarField:
    """m = p/ã with p' - (b̃/ã) p = C₁ periodic; C₁ = 0 exactly when ∫ b̃/ã = 0."""
    grid = coeffs.grid
    if grid.dim != 1:
        raise ValueError("the closed form applies to d = 1 only")
    a = coeffs.a_tilde.component(0, 0)
    ratio = coeffs.b_tilde.component(0) / a
    slope, periodic = antiderivative_1d(ratio)
    interp = TrigInterpolant([periodic])

    def B(y):
        return slope * y + interp(y[:, None])[:, 0] - interp(np.zeros((1, 1)))[0, 0]

    y = grid.coordinates[0]
    B_nodes = slope * y + periodic.values
    J = _gauss_cumulative(lambda s: np.exp(-B(s)), grid.shape[0])
    B1 = slope
    if abs(B1) <= 1e-14:
        C1 = 0.0
    else:
        C1 = (1.0 - np.exp(B1)) / (np.exp(B1) * J[-1])
    p = np.exp(B_nodes) * (1.0 + C1 * J[:-1])
    m = p / a.values
    return ScalarField(grid, m / m.mean())


def laminated_centering(coeffs: CoefficientSet) -> np.ndarray:
    """The integral conditions for coefficients depending on y₁ only.

    Entry 0 is ∫ b̃₁/ã₁₁; entry j ≥ 1 is ∫ (b̃ⱼ/ã₁₁) exp(∫₀^s b̃₁/ã₁₁).
    """
    grid = coeffs.grid
    d = grid.dim
    arrays = [coeffs.a_tilde.values.reshape(d * d, *grid.shape), coeffs.b_tilde.values]
    for block in arrays:
        for axis in range(1, d):
            spread = np.abs(block - np.take(block, [0], axis=axis + 1)).max()
            if spread > 1e-12:
                raise ConfigError("laminated centering needs coefficients depending on y1 only")
    index = (0,) * (d - 1)
    a11 = coeffs.a_tilde.values[0, 0][(slice(None),) + index]
    line = TorusGrid(grid.shape[:1])
    b_line = [coeffs.b_tilde.values[j][(slice(None),) + index] for j in range(d)]
    slope, periodic = antiderivative_1d(ScalarField(line, b_line[0] / a11))
    weight = np.exp(slope * line.coordinates[0] + periodic.values)
    conditions = [slope]
    conditions += [float(np.mean(b_line[j] / a11 * weight)) for j in range(1, d)]
    return np.array(conditions)
