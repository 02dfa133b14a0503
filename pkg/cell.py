import asyncio
from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np

from log_config import logger
from measure import CoefficientSet
from models import Tolerances
from torus import (
    MatrixField, ScalarField, divergence_operator, nondivergence_operator, operator_scale,
    solve_periodic, spectral_derivative,
)
from transform import TransformedCoefficients
from utils import ConsistencyError, EllipticityError


@dataclass(frozen=True)
class CellSolution:
    chi: List[ScalarField]
    chi_nondiv: List[ScalarField]
    residuals: Dict[str, float] = field(default_factory=dict)


@dataclass(frozen=True)
class HomogenizedTensor:
    q_bar: np.ndarray
    a_bar: np.ndarray
    a_bar_direct: np.ndarray
    lambda1_check: float
    lambda1: float
    cross_formula_gap: float = 0.0
    chi_gap: float = 0.0
    valid: bool = True


def _reference(matrix: MatrixField):
    mats = matrix.pointwise()
    eig = np.linalg.eigvalsh(0.5 * (mats + np.swapaxes(mats, -1, -2)))
    return 0.5 * (float(eig.min()) + float(np.abs(mats).sum(axis=-1).max()))


def solve_cell_divergence(q: MatrixField, j: int, tol: float = 1e-10, max_iterations: int = 500):
    """χ^j with -∂_i(q_ik(∂_k χ^j + δ_kj)) = 0 and mean zero; returns (chi, residual)."""
    grid = q.grid
    d = grid.dim
    c = _reference(q)
    rhs = sum(spectral_derivative(q.values[i, j - 1], grid, i) for i in range(d))
    operator = divergence_operator(q.values, None, grid, c)
    scale = operator_scale(q.norm_inf() * d, 0.0, grid)
    values, info = solve_periodic(operator, rhs, grid, scale=scale, precondition=c, tol=tol,
                                  max_iterations=max_iterations, label=f"cell problem (divergence) j={j}")
    return ScalarField(grid, values - values.mean()), info["residual"]


def solve_cell_nondivergence(coeffs: CoefficientSet, j: int, tol: float = 1e-10, max_iterations: int = 500):
    """χ̃^j with -ã_ik ∂_i∂_k χ̃^j - b̃_i ∂_i χ̃^j = b̃_j and mean zero; returns (chi, residual)."""
    grid = coeffs.grid
    c = coeffs.reference
    operator = nondivergence_operator(coeffs.a_tilde.values, coeffs.b_tilde.values, grid, c)
    scale = operator_scale(coeffs.a_sup, coeffs.b_sup, grid)
    values, info = solve_periodic(operator, coeffs.b_tilde.values[j - 1], grid, scale=scale, precondition=c,
                                  tol=tol, max_iterations=max_iterations,
                                  label=f"cell problem (non-divergence) j={j}")
    return ScalarField(grid, values - values.mean()), info["residual"]


def _corrector_matrix(chi: List[ScalarField]):
    """(I + ∇χ)_ik = δ_ik + ∂_k χ^i, shape (d, d, *grid)."""
    grid = chi[0].grid
    d = grid.dim
    G = np.stack([np.stack([spectral_derivative(chi[i].values, grid, k) for k in range(d)]) for i in range(d)])
    for i in range(d):
        G[i, i] += 1.0
    return G


def _sandwich_mean(G, M, weight=None):
    """mean of G M Gᵀ (times weight) over the torus."""
    integrand = np.einsum("ik...,kl...,jl...->ij...", G, M, G)
    if weight is not None:
        integrand = integrand * weight
    d = G.shape[0]
    return integrand.reshape(d, d, -1).mean(axis=2)


def homogenized_tensor(q: MatrixField, a: MatrixField, m: ScalarField, chi: CellSolution,
                       a_tilde: MatrixField = None, lambda1: float = 0.0, tolerances: Tolerances = None,
                       valid: bool = True) -> HomogenizedTensor:
    """q̄ = mean((I+∇χ) q (I+∇χ)ᵀ), ā = sym(q̄), cross-checked against the non-divergence formula."""
    tolerances = tolerances or Tolerances()
    G = _corrector_matrix(chi.chi)
    q_bar = _sandwich_mean(G, q.values)
    a_bar = 0.5 * (q_bar + q_bar.T)
    from_a = _sandwich_mean(G, a.values)
    if np.abs(from_a - a_bar).max() > tolerances.consistency:
        raise ConsistencyError("symmetric part of q̄ differs from the a-weighted formula")

    a_bar_direct = a_bar
    cross_gap = 0.0
    chi_gap = 0.0
    if chi.chi_nondiv and a_tilde is not None:
        G_tilde = _corrector_matrix(chi.chi_nondiv)
        a_bar_direct = _sandwich_mean(G_tilde, a_tilde.values, m.values)
        cross_gap = float(np.abs(a_bar_direct - a_bar).max())
        chi_gap = max(float(np.abs(x.values - y.values).max()) for x, y in zip(chi.chi, chi.chi_nondiv))
        if cross_gap > tolerances.consistency:
            raise ConsistencyError(f"ā from the two cell problems differs by {cross_gap:.3e}")
        if chi_gap > tolerances.corrector:
            raise ConsistencyError(f"χ̃ and χ differ by {chi_gap:.3e}")

    lambda1_check = float(np.linalg.eigvalsh(a_bar).min())
    if lambda1_check < lambda1 - 1e-10:
        raise EllipticityError(f"ā has eigenvalue {lambda1_check:.6g} below λ₁ = {lambda1:.6g}")
    return HomogenizedTensor(q_bar, a_bar, a_bar_direct, lambda1_check, lambda1, cross_gap, chi_gap, valid)


async def _solve_cells(coeffs, tc, tolerances, with_nondiv):
    d = tc.dim
    jobs = [asyncio.to_thread(solve_cell_divergence, tc.q, j, tolerances.solver, tolerances.max_iterations)
            for j in range(1, d + 1)]
    if with_nondiv:
        jobs += [asyncio.to_thread(solve_cell_nondivergence, coeffs, j, tolerances.solver, tolerances.max_iterations)
                 for j in range(1, d + 1)]
    return await asyncio.gather(*jobs)


def homogenize(coeffs: CoefficientSet, tc: TransformedCoefficients, tolerances: Tolerances = None):
    """Solve all cell problems both ways and assemble the effective tensor."""
    tolerances = tolerances or Tolerances()
    d = tc.dim
    # the non-divergence cell problem has no periodic solution without centering
    with_nondiv = tc.valid
    results = asyncio.run(_solve_cells(coeffs, tc, tolerances, with_nondiv))
    chi = [r[0] for r in results[:d]]
    chi_nondiv = [r[0] for r in results[d:]]
    residuals = {f"divergence_{j + 1}": r[1] for j, r in enumerate(results[:d])}
    residuals.update({f"nondivergence_{j + 1}": r[1] for j, r in enumerate(results[d:])})
    cells = CellSolution(chi, chi_nondiv, residuals)
    tensor = homogenized_tensor(tc.q, tc.a, tc.m, cells, coeffs.a_tilde, tc.lambda1, tolerances, tc.valid)
    logger.info(f"homogenized tensor ā = {np.round(tensor.a_bar, 10).tolist()}")
    return cells, tensor


def effective_coefficient_1d(q: ScalarField) -> float:
    return 1.0 / float(np.mean(1.0 / q.values))
