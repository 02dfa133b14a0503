import asyncio
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from log_config import logger
from measure import CoefficientSet, classify_centering, centering_defect, solve_invariant_measure
from models import SDEConfig
from torus import MatrixField, make_interpolant, pointwise_matrix_sqrt
from utils import BlowUpError, NumericalError

JACKKNIFE_GROUPS = 50
MIN_PATHS = 100


@dataclass(frozen=True)
class PathEnsemble:
    start: np.ndarray
    end: np.ndarray
    aborted: np.ndarray
    seed: int
    n_steps: int
    dt: float

    @property
    def horizon(self):
        return self.n_steps * self.dt


@dataclass(frozen=True)
class DiffusivityEstimate:
    D: np.ndarray
    stderr: np.ndarray
    drift: np.ndarray
    drift_stderr: np.ndarray
    n_paths: int


def _euler_step(interp, dim, X, dt, xi):
    values = interp(np.mod(X, 1.0))
    drift = values[:, :dim]
    sigma = values[:, dim:].reshape(-1, dim, dim)
    return X + drift * dt + math.sqrt(2.0 * dt) * np.einsum("pij,pj->pi", sigma, xi)


def _run_chunk(interp, dim, n_paths, n_steps, dt, rng, chunk, seed):
    start = rng.random((n_paths, dim))
    X = start.copy()
    alive = np.ones(n_paths, dtype=bool)
    for step in range(n_steps):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        xi = rng.standard_normal((idx.size, dim))
        X[idx] = _euler_step(interp, dim, X[idx], dt, xi)
        bad = ~np.isfinite(X[idx]).all(axis=1)
        if bad.any():
            logger.warning(f"{int(bad.sum())} paths blew up in chunk {chunk} (seed {seed}) at step {step + 1}")
            alive[idx[bad]] = False
    return start, X, ~alive


def _run_coupled_chunk(interp, dim, n_paths, n_steps, dt, rng, chunk, seed):
    # the dt/2 path takes both increments of a step, the dt path their normalized sum
    start = rng.random((n_paths, dim))
    coarse, fine = start.copy(), start.copy()
    for _ in range(n_steps):
        xi = rng.standard_normal((2, n_paths, dim))
        fine = _euler_step(interp, dim, fine, 0.5 * dt, xi[0])
        fine = _euler_step(interp, dim, fine, 0.5 * dt, xi[1])
        coarse = _euler_step(interp, dim, coarse, dt, (xi[0] + xi[1]) / math.sqrt(2.0))
    if not (np.isfinite(coarse).all() and np.isfinite(fine).all()):
        raise BlowUpError(f"paths blew up in chunk {chunk} (seed {seed}) during the dt-halving run; reduce dt")
    return start, coarse, fine


async def _simulate(interp, dim, cfg: SDEConfig, n_steps, runner=_run_chunk):
    n_chunks = math.ceil(cfg.N / cfg.chunk_size)
    streams = np.random.SeedSequence(cfg.seed).spawn(n_chunks)
    jobs = []
    for chunk, stream in enumerate(streams):
        size = min(cfg.chunk_size, cfg.N - chunk * cfg.chunk_size)
        rng = np.random.Generator(np.random.Philox(stream))
        jobs.append(asyncio.to_thread(runner, interp, dim, size, n_steps, cfg.dt, rng, chunk, cfg.seed))
    return await asyncio.gather(*jobs)


def _interpolant(coeffs: CoefficientSet, sigma: MatrixField, cfg: SDEConfig):
    fields = coeffs.b_tilde.components() + [sigma.component(i, j) for i in range(coeffs.dim) for j in range(coeffs.dim)]
    return make_interpolant(fields, cfg.interpolation)


def _diffusion_root(coeffs: CoefficientSet) -> MatrixField:
    return pointwise_matrix_sqrt(coeffs.a_tilde, coeffs.lam * (1.0 - 1e-9))


def simulate_paths(coeffs: CoefficientSet, sigma: MatrixField, cfg: SDEConfig) -> PathEnsemble:
    """Euler-Maruyama for dX = b̃(X) dt + √2 σ(X) dW from uniform starts, positions unwrapped."""
    dim = coeffs.dim
    interp = _interpolant(coeffs, sigma, cfg)
    n_steps = max(1, round(cfg.T / cfg.dt))
    logger.info(f"simulating {cfg.N} paths x {n_steps} steps (dt = {cfg.dt:g}, seed {cfg.seed})")
    chunks = asyncio.run(_simulate(interp, dim, cfg, n_steps))
    start = np.concatenate([c[0] for c in chunks])
    end = np.concatenate([c[1] for c in chunks])
    aborted = np.concatenate([c[2] for c in chunks])
    if aborted.all():
        raise BlowUpError(f"every path blew up (seed {cfg.seed}); reduce dt")
    return PathEnsemble(start, end, aborted, cfg.seed, n_steps, cfg.dt)


def estimate_diffusivity(start, end, T, groups: int = JACKKNIFE_GROUPS) -> DiffusivityEstimate:
    """D = Cov(X_T - X_0)/(2T) with grouped jackknife errors."""
    delta = np.asarray(end, dtype=float) - np.asarray(start, dtype=float)
    n, dim = delta.shape
    if n < MIN_PATHS:
        raise NumericalError(f"{n} paths are too few for error bars; at least {MIN_PATHS} are needed")

    def covariance(sample):
        return np.atleast_2d(np.cov(sample, rowvar=False, ddof=1)) / (2.0 * T)

    D = covariance(delta)
    groups = min(groups, n)
    labels = np.arange(n) % groups
    leave_out = np.stack([covariance(delta[labels != g]) for g in range(groups)])
    spread = leave_out - leave_out.mean(axis=0)
    stderr = np.sqrt((groups - 1) / groups * (spread ** 2).sum(axis=0))
    drift = delta.mean(axis=0) / T
    drift_stderr = delta.std(axis=0, ddof=1) / math.sqrt(n) / T
    return DiffusivityEstimate(D, stderr, drift, drift_stderr, n)


def consistent_with(estimate: DiffusivityEstimate, a_bar) -> bool:
    """|D_ij - ā_ij| <= max(3 stderr_ij, 5% of max|ā|) for every entry."""
    a_bar = np.atleast_2d(np.asarray(a_bar, dtype=float))
    bound = np.maximum(3.0 * estimate.stderr, 0.05 * np.abs(a_bar).max())
    return bool(np.all(np.abs(estimate.D - a_bar) <= bound))


def run_monte_carlo(coeffs: CoefficientSet, cfg: SDEConfig, a_bar=None, measure=None):
    """Simulate, estimate D and compare with ā when given. Returns (estimate, ensemble, consistent)."""
    measure = measure or solve_invariant_measure(coeffs)
    if classify_centering(centering_defect(coeffs, measure.m)) != "centered":
        logger.warning("coefficients are not centered: the mean drift will dominate the dispersion")
    ensemble = simulate_paths(coeffs, _diffusion_root(coeffs), cfg)
    keep = ~ensemble.aborted
    estimate = estimate_diffusivity(ensemble.start[keep], ensemble.end[keep], ensemble.horizon)
    consistent: Optional[bool] = None
    if a_bar is not None:
        consistent = consistent_with(estimate, a_bar)
        if not consistent:
            logger.warning(f"D = {estimate.D.tolist()} is not within tolerance of ā = {np.asarray(a_bar).tolist()}")
    logger.info(f"Monte Carlo: D = {np.round(estimate.D, 6).tolist()} ± {np.round(estimate.stderr, 6).tolist()}")
    return estimate, ensemble, consistent


def dt_halving_check(coeffs: CoefficientSet, cfg: SDEConfig, sigma: Optional[MatrixField] = None):
    """Run dt and dt/2 on shared Brownian increments and compare the D estimates.

    Returns (coarse, fine, ok); `ok` holds when every entry of D moves by at
    most 2 stderr of the larger of the two error bars.
    """
    sigma = _diffusion_root(coeffs) if sigma is None else sigma
    interp = _interpolant(coeffs, sigma, cfg)
    n_steps = max(1, round(cfg.T / cfg.dt))
    logger.info(f"dt-halving run: {cfg.N} paths x {n_steps} steps at dt = {cfg.dt:g} and {cfg.dt / 2:g}")
    chunks = asyncio.run(_simulate(interp, coeffs.dim, cfg, n_steps, _run_coupled_chunk))
    start = np.concatenate([c[0] for c in chunks])
    horizon = n_steps * cfg.dt
    coarse = estimate_diffusivity(start, np.concatenate([c[1] for c in chunks]), horizon)
    fine = estimate_diffusivity(start, np.concatenate([c[2] for c in chunks]), horizon)
    gap = np.abs(coarse.D - fine.D)
    ok = bool(np.all(gap <= 2.0 * np.maximum(coarse.stderr, fine.stderr)))
    if not ok:
        logger.warning(f"halving dt moved D by {np.round(gap, 6).tolist()}: dt = {cfg.dt:g} is too coarse")
    return coarse, fine, ok
