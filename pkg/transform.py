import asyncio
from dataclasses import dataclass
from typing import List

import numpy as np

from log_config import logger
from measure import CoefficientSet, InvariantMeasure, classify_centering, require_centered
from models import Tolerances
from torus import (
    MatrixField, ScalarField, VectorField, dealiased_product, eigenvalue_bounds, solve_poisson_torus,
    spectral_derivative, spectral_laplacian,
)
from utils import ConsistencyError, EllipticityError


@dataclass(frozen=True)
class TransformedCoefficients:
    a: MatrixField
    b: VectorField
    beta: VectorField
    f_potentials: List[ScalarField]
    phi: MatrixField
    q: MatrixField
    m: ScalarField
    lambda1: float
    Lambda1: float
    divergence_residual: float = 0.0
    harmonic_residual: float = 0.0
    valid: bool = True

    @property
    def grid(self):
        return self.q.grid

    @property
    def dim(self):
        return self.q.grid.dim


def build_beta(coeffs: CoefficientSet, measure: InvariantMeasure, tolerances: Tolerances = None, force=False):
    """β_j = b̃_j m - ∂_i(ã_ij m); returns (beta, divergence residual)."""
    tolerances = tolerances or Tolerances()
    status = require_centered(measure.centering_defect, tolerances, force)
    grid = coeffs.grid
    d = grid.dim
    m = measure.m.values
    weighted = dealiased_product(coeffs.a_tilde.values, m, grid)
    drift = dealiased_product(coeffs.b_tilde.values, m, grid)
    beta = np.stack([
        drift[j] - sum(spectral_derivative(weighted[i, j], grid, i) for i in range(d))
        for j in range(d)
    ])
    means = beta.reshape(d, -1).mean(axis=1)
    if status == "centered" and np.abs(means).max() > tolerances.divergence:
        raise ConsistencyError(f"β has mean {means.tolist()} although the data are centered")
    divergence = sum(spectral_derivative(beta[j], grid, j) for j in range(d))
    residual = float(np.abs(divergence).max())
    if residual > tolerances.divergence:
        raise ConsistencyError(f"div β = {residual:.3e} exceeds {tolerances.divergence:.1e}; the invariant measure is under-resolved")
    return VectorField(grid, beta), residual


async def _solve_potentials(components, tol):
    return await asyncio.gather(*[asyncio.to_thread(solve_poisson_torus, c, tol) for c in components])


def build_flux_tensor(beta: VectorField, tol: float = 1e-8):
    """Antisymmetric φ with ∂_ℓ φ_ℓj = β_j, through the Poisson potentials Δf^j = β_j.

    Returns (f_potentials, phi, harmonic_residual).
    """
    grid = beta.grid
    d = grid.dim
    potentials = asyncio.run(_solve_potentials(beta.components(), tol))
    grads = [[spectral_derivative(f.values, grid, i) for i in range(d)] for f in potentials]
    phi = np.zeros((d, d) + grid.shape)
    for i in range(d):
        for j in range(i + 1, d):
            phi[i, j] = grads[j][i] - grads[i][j]
            phi[j, i] = -phi[i, j]
    phi = MatrixField(grid, phi, "antisymmetric")

    for j in range(d):
        divergence = sum(spectral_derivative(phi.values[l, j], grid, l) for l in range(d))
        gap = float(np.abs(divergence - beta.values[j]).max())
        if gap > tol:
            raise ConsistencyError(f"∂_l φ_l{j + 1} misses β_{j + 1} by {gap:.3e}")
    div_f = sum(grads[j][j] for j in range(d))
    harmonic = float(np.abs(spectral_laplacian(div_f, grid)).max())
    if harmonic > tol:
        raise ConsistencyError(f"Δ(div f) = {harmonic:.3e} is not zero; β is not divergence free")
    return potentials, phi, harmonic


def build_q(a: MatrixField, phi: MatrixField, m: ScalarField, lam: float, Lambda: float):
    """q = a + φ with the constants λ₁ = λ min m and Λ₁ = max|φ| + Λ max m."""
    if a.symmetry != "symmetric" or phi.symmetry != "antisymmetric":
        raise ValueError("build_q needs a symmetric a and an antisymmetric phi")
    q = MatrixField(a.grid, a.values + phi.values)
    lambda1 = lam * m.min()
    Lambda1 = phi.norm_inf() + Lambda * m.max()
    lowest, _ = eigenvalue_bounds(q)
    if lowest < lambda1 * (1.0 - 1e-12):
        raise EllipticityError(f"sym(q) has eigenvalue {lowest:.6g} below λ₁ = {lambda1:.6g}")
    return q, lambda1, Lambda1


def transform_coefficients(coeffs: CoefficientSet, measure: InvariantMeasure, tolerances: Tolerances = None,
                           force=False) -> TransformedCoefficients:
    tolerances = tolerances or Tolerances()
    beta, divergence_residual = build_beta(coeffs, measure, tolerances, force)
    valid = classify_centering(measure.centering_defect, tolerances) != "non-centered"
    means = beta.means()
    flux_source = beta
    if np.abs(means).max() > tolerances.centering:
        # only the mean-free part of β can be absorbed into φ
        flux_source = VectorField(beta.grid, beta.values - means.reshape((-1,) + (1,) * beta.grid.dim))
    if not valid:
        logger.warning("non-centered coefficients: homogenized outputs are marked invalid")
    potentials, phi, harmonic = build_flux_tensor(flux_source, tolerances.divergence)
    m = measure.m
    weighted = dealiased_product(coeffs.a_tilde.values, m.values, coeffs.grid)
    a = MatrixField(coeffs.grid, 0.5 * (weighted + np.swapaxes(weighted, 0, 1)), "symmetric")
    b = VectorField(coeffs.grid, dealiased_product(coeffs.b_tilde.values, m.values, coeffs.grid))
    q, lambda1, Lambda1 = build_q(a, phi, m, coeffs.lam, coeffs.Lambda)
    logger.info(f"transform: λ₁ = {lambda1:.6g}, Λ₁ = {Lambda1:.6g}, div β residual {divergence_residual:.2e}")
    return TransformedCoefficients(a, b, beta, potentials, phi, q, m, lambda1, Lambda1,
                                   divergence_residual, harmonic, valid)
