"""Bounded-domain solves for the ε-problem and its homogenized limit.

In 1D every solve goes through the first integral of the divergence-form
equation, so the only discretization is composite Gauss-Legendre quadrature
on panels aligned with the ε-cells. The rectangle solver is experimental.
"""
import asyncio
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Union

import numpy as np
import scipy.sparse as sp
from numpy.polynomial.legendre import legint, leggauss, legval, legvander
from scipy.sparse.linalg import spsolve

from expression import evaluate_array, parse_expression
from log_config import logger
from measure import CoefficientSet, build_coefficients
from models import FitRecord, ProblemConfig, Rect2DConfig
from torus import TorusGrid, TrigInterpolant
from transform import TransformedCoefficients
from utils import NumericalError, ResolutionError

GAUSS_POINTS = 6
MAX_PANELS = 2 ** 20
MAX_UNKNOWNS = 2048 ** 2
PREASYMPTOTIC_RESIDUAL = 0.1

_NODES, _WEIGHTS = leggauss(GAUSS_POINTS)


def _integration_matrix():
    """W[p, r] = ∫_{-1}^{t_p} ℓ_r, ℓ_r the Lagrange basis on the Gauss nodes."""
    inverse = np.linalg.inv(legvander(_NODES, GAUSS_POINTS - 1))
    return np.stack([legval(_NODES, legint(inverse[:, r], lbnd=-1)) for r in range(GAUSS_POINTS)], axis=1)


_INTEGRATE = _integration_matrix()


class Mesh1D:
    def __init__(self, breakpoints):
        self.breakpoints = np.asarray(breakpoints, dtype=float)
        left, right = self.breakpoints[:-1], self.breakpoints[1:]
        self.half = 0.5 * (right - left)
        self.points = 0.5 * (left + right)[:, None] + self.half[:, None] * _NODES[None, :]
        self.weights = self.half[:, None] * _WEIGHTS[None, :]

    @property
    def panels(self):
        return len(self.half)

    def same_as(self, other):
        return np.array_equal(self.breakpoints, other.breakpoints)

    def cumulative(self, values):
        """∫ from the left end of the domain: (at breakpoints, at Gauss points)."""
        inner = (values @ _INTEGRATE.T) * self.half[:, None]
        panel = (values * self.weights).sum(axis=1)
        at_nodes = np.concatenate([[0.0], np.cumsum(panel)])
        return at_nodes, at_nodes[:-1, None] + inner


def cell_mesh(domain, eps, mesh_per_period):
    """Panels of width ε/mesh_per_period whose breakpoints sit on the ε-lattice."""
    x0, x1 = domain
    step = eps / mesh_per_period
    count = math.ceil((x1 - x0) / step)
    if count > MAX_PANELS:
        raise ResolutionError(f"ε = {eps:g} needs {count} panels at {mesh_per_period} per period; the budget is {MAX_PANELS}")
    k = np.arange(math.ceil(x0 / step), math.floor(x1 / step) + 1)
    interior = k * step
    interior = interior[(interior > x0 + 1e-12 * step) & (interior < x1 - 1e-12 * step)]
    return Mesh1D(np.concatenate([[x0], interior, [x1]]))


def uniform_mesh(domain, panels=256):
    return Mesh1D(np.linspace(domain[0], domain[1], panels + 1))


@dataclass(frozen=True)
class DiscreteSolution:
    mesh: Mesh1D
    values: np.ndarray
    derivative: np.ndarray
    node_values: np.ndarray
    node_derivative: np.ndarray
    second: Optional[np.ndarray] = None

    def sup_derivative(self):
        return float(max(np.abs(self.derivative).max(), np.abs(self.node_derivative).max()))


def _first_integral(mesh, q_points, q_nodes, rhs_points, g):
    """-(q u')' = rhs with u(x0) = g0, u(x1) = g1, from u' = (C - F)/q."""
    g0, g1 = g
    F_nodes, F_points = mesh.cumulative(rhs_points)
    A1_nodes, A1_points = mesh.cumulative(1.0 / q_points)
    A2_nodes, A2_points = mesh.cumulative(F_points / q_points)
    C = (g1 - g0 + A2_nodes[-1]) / A1_nodes[-1]
    return DiscreteSolution(
        mesh,
        g0 + C * A1_points - A2_points,
        (C - F_points) / q_points,
        g0 + C * A1_nodes - A2_nodes,
        (C - F_nodes) / q_nodes,
    )


def _domain_data(prob):
    return parse_expression(prob.f, 1, allow_x=True)


def _periodic_pair(tc: TransformedCoefficients):
    if tc.dim != 1:
        raise ValueError("1D solvers need one-dimensional coefficients")
    return TrigInterpolant([tc.q.component(0, 0), tc.m])


def solve_eps_1d(tc: TransformedCoefficients, prob: ProblemConfig, eps: float, mesh_per_period: int = None):
    """-(q(x/ε) u')' = f m(x/ε) with u = g at the endpoints."""
    mesh = cell_mesh(prob.domain, eps, mesh_per_period or prob.mesh_per_period)
    interp = _periodic_pair(tc)
    at_points = interp((mesh.points / eps).reshape(-1, 1))
    q_points = at_points[:, 0].reshape(mesh.points.shape)
    m_points = at_points[:, 1].reshape(mesh.points.shape)
    q_nodes = interp((mesh.breakpoints / eps)[:, None])[:, 0]
    f = evaluate_array(_domain_data(prob), x=mesh.points[None])
    return _first_integral(mesh, q_points, q_nodes, f * m_points, prob.g)


def solve_homogenized_1d(a_bar: float, prob: ProblemConfig, mesh: Mesh1D = None):
    if a_bar <= 0:
        raise ValueError("a_bar must be positive")
    mesh = mesh or uniform_mesh(prob.domain)
    f = evaluate_array(_domain_data(prob), x=mesh.points[None])
    q_points = np.full(mesh.points.shape, float(a_bar))
    q_nodes = np.full(mesh.breakpoints.shape, float(a_bar))
    sol = _first_integral(mesh, q_points, q_nodes, f, prob.g)
    return DiscreteSolution(sol.mesh, sol.values, sol.derivative, sol.node_values, sol.node_derivative, -f / a_bar)


def dirichlet_corrector_1d(tc: TransformedCoefficients, eps: float, domain=(0.0, 1.0), mesh_per_period: int = 64):
    """(q(x/ε) Φ')' = 0 with Φ = x at both ends."""
    mesh = cell_mesh(domain, eps, mesh_per_period)
    interp = _periodic_pair(tc)
    q_points = interp((mesh.points / eps).reshape(-1, 1))[:, 0].reshape(mesh.points.shape)
    q_nodes = interp((mesh.breakpoints / eps)[:, None])[:, 0]
    return _first_integral(mesh, q_points, q_nodes, np.zeros(mesh.points.shape), domain)


def corrector_deviation(corrector: DiscreteSolution) -> float:
    """‖Φ_ε - x‖∞."""
    mesh = corrector.mesh
    return float(max(np.abs(corrector.values - mesh.points).max(),
                     np.abs(corrector.node_values - mesh.breakpoints).max()))


def error_norms(u_eps: DiscreteSolution, u: DiscreteSolution, corrector: DiscreteSolution = None) -> Dict[str, float]:
    """L², L∞ and H¹ norms of u_ε - u, plus H¹ of u_ε - u - (Φ_ε - x) u' when a corrector is given."""
    if not u_eps.mesh.same_as(u.mesh) or (corrector is not None and not corrector.mesh.same_as(u.mesh)):
        raise ValueError("error norms need solutions on one mesh")
    w = u_eps.mesh.weights
    e = u_eps.values - u.values
    de = u_eps.derivative - u.derivative
    l2 = math.sqrt(float((w * e ** 2).sum()))
    out = {
        "L2": l2,
        "Linf": float(max(np.abs(e).max(), np.abs(u_eps.node_values - u.node_values).max())),
        "H1_raw": math.sqrt(l2 ** 2 + float((w * de ** 2).sum())),
    }
    if corrector is not None:
        if u.second is None:
            raise ValueError("the corrected H1 error needs u''")
        shift = corrector.values - u_eps.mesh.points
        ec = e - shift * u.derivative
        dec = de - (corrector.derivative - 1.0) * u.derivative - shift * u.second
        out["H1_corrected"] = math.sqrt(float((w * ec ** 2).sum() + (w * dec ** 2).sum()))
    return out


def fit_rate(eps, errs) -> FitRecord:
    """Least-squares line through (log ε, log err).

    Exact zeros are dropped with a note. The largest ε is dropped when its
    log-residual exceeds PREASYMPTOTIC_RESIDUAL and four points remain.
    """
    eps = np.asarray(eps, dtype=float)
    errs = np.asarray(errs, dtype=float)
    if np.any(errs < 0) or not np.all(np.isfinite(errs)):
        raise NumericalError(f"cannot fit a rate through non-positive errors {errs.tolist()}")
    note = None
    keep = errs > 0
    if not keep.all():
        note = f"exact-zero errors at eps {eps[~keep].tolist()} excluded"
        eps, errs = eps[keep], errs[keep]
    if len(eps) < 4:
        return FitRecord(note=note or f"only {len(eps)} values; at least 4 are needed")
    x, y = np.log(eps), np.log(errs)
    slope, intercept = np.polyfit(x, y, 1)
    residuals = y - (slope * x + intercept)
    excluded = []
    largest = int(np.argmax(eps))
    if abs(residuals[largest]) > PREASYMPTOTIC_RESIDUAL and len(eps) > 4:
        excluded.append(float(eps[largest]))
        mask = np.arange(len(eps)) != largest
        x, y = x[mask], y[mask]
        slope, intercept = np.polyfit(x, y, 1)
        residuals = y - (slope * x + intercept)
    return FitRecord(slope=float(slope), intercept=float(intercept),
                     max_log_residual=float(np.abs(residuals).max()), excluded=excluded, note=note)


def holder_seminorm(values, spacing, exponent=0.5, max_lag=None):
    """sup |v(x) - v(z)| / |x - z|^r over uniformly spaced samples up to `max_lag` apart."""
    values = np.asarray(values, dtype=float)
    max_lag = min(max_lag or len(values) - 1, len(values) - 1)
    best = 0.0
    for lag in range(1, max_lag + 1):
        jump = np.abs(values[lag:] - values[:-lag]).max()
        best = max(best, jump / (lag * spacing) ** exponent)
    return float(best)


def lipschitz_scan(tc: TransformedCoefficients, prob: ProblemConfig, eps_list=None, mesh_per_period: int = None):
    """Per-ε sup of |u'_ε| and the C^{0,1/2} seminorm of u'_ε with its growth exponent."""
    eps_list = list(eps_list or prob.eps)
    M = mesh_per_period or prob.mesh_per_period
    sup, seminorms = [], []
    for eps in eps_list:
        sol = solve_eps_1d(tc, prob, eps, M)
        sup.append(sol.sup_derivative())
        seminorms.append(holder_seminorm(sol.node_derivative[1:-1], eps / M, 0.5, 2 * M))
    growth = fit_rate(eps_list, seminorms)
    exponent = None if growth.slope is None else -growth.slope
    tail = sup[-4:]
    peak = max(tail)
    return {
        "eps": eps_list,
        "sup_derivative": sup,
        "holder_seminorm": seminorms,
        "holder_fit": growth,
        "holder_growth": exponent,
        "variation": float((peak - min(tail)) / peak) if peak > 0 else 0.0,
    }


@dataclass
class RateReport:
    a_bar: Union[float, List[List[float]]]
    rows: List[Dict[str, float]]
    slopes: Dict[str, FitRecord]
    raw_to_corrected_ratio: Optional[float] = None
    lipschitz: Optional[dict] = None
    checks: Dict[str, bool] = field(default_factory=dict)


def _sweep_point(tc, a_bar, prob, eps, M):
    u_eps = solve_eps_1d(tc, prob, eps, M)
    u = solve_homogenized_1d(a_bar, prob, u_eps.mesh)
    phi = dirichlet_corrector_1d(tc, eps, prob.domain, M)
    row = {"eps": eps}
    row.update(error_norms(u_eps, u, phi))
    row["Lip"] = u_eps.sup_derivative()
    row["corrector_deviation"] = corrector_deviation(phi)
    return row


async def _run_sweep(tc, a_bar, prob, eps_list, M):
    return await asyncio.gather(*[asyncio.to_thread(_sweep_point, tc, a_bar, prob, eps, M) for eps in eps_list])


def rate_sweep(tc: TransformedCoefficients, a_bar: float, prob: ProblemConfig, eps_list=None,
               lipschitz_prob: ProblemConfig = None) -> RateReport:
    eps_list = list(eps_list or prob.eps)
    rows = asyncio.run(_run_sweep(tc, a_bar, prob, eps_list, prob.mesh_per_period))
    slopes = {name: fit_rate(eps_list, [r[name] for r in rows]) for name in ("L2", "Linf", "H1_raw", "H1_corrected")}
    smallest = rows[-1]
    ratio = smallest["H1_raw"] / smallest["H1_corrected"] if smallest["H1_corrected"] > 0 else None
    for name, record in slopes.items():
        logger.info(f"rate fit {name}: slope {record.slope}, excluded {record.excluded}")

    def at_least(record, bound):
        return record.slope is not None and record.slope >= bound

    checks = {
        "L2_slope": at_least(slopes["L2"], 0.9),
        "Linf_slope": at_least(slopes["Linf"], 0.9),
        "H1_corrected_slope": at_least(slopes["H1_corrected"], 0.9),
        "H1_raw_slope": slopes["H1_raw"].slope is not None and slopes["H1_raw"].slope <= 0.2,
        "raw_to_corrected_ratio": ratio is not None and ratio >= 10,
    }
    scan = None
    if lipschitz_prob is not None:
        scan = lipschitz_scan(tc, lipschitz_prob)
        checks["lipschitz_uniform"] = scan["variation"] < 0.05
        checks["holder_growth"] = scan["holder_growth"] is not None and abs(scan["holder_growth"] - 0.5) <= 0.1
    return RateReport(float(a_bar), rows, slopes, ratio, scan, checks)


def solve_nondivergence_1d(coeffs: CoefficientSet, prob: ProblemConfig, eps: float, mesh_per_period: int = None):
    """-ã(x/ε) u'' - ε⁻¹ b̃(x/ε) u' = f by an integrating factor, panel by panel.

    The recursion runs in the direction in which the integrating factor decays,
    so a non-centered drift of either sign stays bounded.
    """
    if coeffs.dim != 1:
        raise ValueError("solve_nondivergence_1d needs one-dimensional coefficients")
    M = mesh_per_period or prob.mesh_per_period
    x0, x1 = prob.domain
    a_field = coeffs.a_tilde.component(0, 0)
    b_field = coeffs.b_tilde.component(0)
    reflect = float(np.mean(b_field.values / a_field.values)) < 0
    interp = TrigInterpolant([a_field, b_field])
    f_expr = _domain_data(prob)

    mesh = cell_mesh((x0, x1), eps, M)
    s = mesh.points
    x = x0 + x1 - s if reflect else s
    ab = interp((x / eps).reshape(-1, 1))
    a = ab[:, 0].reshape(s.shape)
    b = ab[:, 1].reshape(s.shape) / eps
    if reflect:
        b = -b
    f = evaluate_array(f_expr, x=x[None])

    rho = b / a
    dP_inner = (rho @ _INTEGRATE.T) * mesh.half[:, None]
    dP_panel = (rho * mesh.weights).sum(axis=1)
    source = np.exp(dP_inner) * f / a
    I_inner = (source @ _INTEGRATE.T) * mesh.half[:, None]
    I_panel = (source * mesh.weights).sum(axis=1)

    K = mesh.panels
    decay = np.exp(-dP_panel)
    vh = np.empty(K + 1)
    vp = np.empty(K + 1)
    vh[0], vp[0] = 1.0, 0.0
    for k in range(K):
        vh[k + 1] = decay[k] * vh[k]
        vp[k + 1] = decay[k] * (vp[k] - I_panel[k])
    inner_decay = np.exp(-dP_inner)
    vh_points = inner_decay * vh[:-1, None]
    vp_points = inner_decay * (vp[:-1, None] - I_inner)

    g_start, g_end = (prob.g[1], prob.g[0]) if reflect else (prob.g[0], prob.g[1])
    Uh_nodes, Uh_points = mesh.cumulative(vh_points)
    Up_nodes, Up_points = mesh.cumulative(vp_points)
    v0 = (g_end - g_start - Up_nodes[-1]) / Uh_nodes[-1]
    values = g_start + v0 * Uh_points + Up_points
    node_values = g_start + v0 * Uh_nodes + Up_nodes
    derivative = v0 * vh_points + vp_points
    node_derivative = v0 * vh + vp
    if not reflect:
        return DiscreteSolution(mesh, values, derivative, node_values, node_derivative)
    physical = Mesh1D((x0 + x1 - mesh.breakpoints)[::-1])
    return DiscreteSolution(physical, values[::-1, ::-1], -derivative[::-1, ::-1],
                            node_values[::-1], -node_derivative[::-1])


def counterexample_closed_form(x, eps):
    """ε(x - (1 - e^{-x/ε})/(1 - e^{-1/ε}))."""
    return eps * (x - (-np.expm1(-x / eps)) / (-np.expm1(-1.0 / eps)))


def noncentered_counterexample(eps_list=None, mesh_per_period: int = 64, grid_size: int = 256):
    """ã = 1, b̃ = 1 on (0, 1) with u = 0 at both ends; the limit u ≡ 0 solves no elliptic problem with this f."""
    coeffs = build_coefficients([["1"]], ["1"], TorusGrid([grid_size]))
    prob = ProblemConfig(f="-1", g=(0.0, 0.0), eps=eps_list or [0.5, 0.1, 0.05, 0.01, 0.005],
                         mesh_per_period=mesh_per_period)
    rows = []
    for eps in prob.eps:
        sol = solve_nondivergence_1d(coeffs, prob, eps)
        exact_points = counterexample_closed_form(sol.mesh.points, eps)
        exact_nodes = counterexample_closed_form(sol.mesh.breakpoints, eps)
        error = max(np.abs(sol.values - exact_points).max(), np.abs(sol.node_values - exact_nodes).max())
        sup = max(np.abs(sol.values).max(), np.abs(sol.node_values).max())
        rows.append({"eps": eps, "max_error": float(error), "sup_norm": float(sup), "sup_over_eps": float(sup / eps),
                     "u_at_half": float(np.interp(0.5, sol.mesh.breakpoints, sol.node_values))})
    return {
        "rows": rows,
        "note": "u_eps -> 0 uniformly, yet u = 0 does not solve -a u'' = f with f = -1: the drift does not homogenize",
    }


# Experimental: rectangles are not C^{1,1}; only the L² and H¹ errors are reported.

@dataclass(frozen=True)
class RectSolution:
    x: np.ndarray
    y: np.ndarray
    values: np.ndarray


def _rect_grid(domain, shape):
    (x0, x1), (y0, y1) = domain
    nx, ny = shape
    if (nx - 1) * (ny - 1) > MAX_UNKNOWNS:
        raise ResolutionError(f"rectangle mesh {nx}x{ny} exceeds the budget of {MAX_UNKNOWNS} unknowns")
    return np.linspace(x0, x1, nx + 1), np.linspace(y0, y1, ny + 1)


def solve_divergence_rect2d(coefficient, rhs, boundary, domain, shape) -> RectSolution:
    """-div(Q ∇u) = rhs on a rectangle, u = boundary on its edge.

    `coefficient(X, Y)` returns Q with shape (2, 2, *X.shape). Fluxes live on
    cell faces; tangential derivatives are averaged, giving a 9-point stencil.
    """
    x, y = _rect_grid(domain, shape)
    nx, ny = shape
    hx, hy = x[1] - x[0], y[1] - y[0]
    X, Y = np.meshgrid(x[1:-1], y[1:-1], indexing="ij")
    east = coefficient(X + hx / 2, Y)
    west = coefficient(X - hx / 2, Y)
    north = coefficient(X, Y + hy / 2)
    south = coefficient(X, Y - hy / 2)
    cxy = 1.0 / (4 * hx * hy)

    stencil = {}

    def add(di, dj, value):
        stencil[(di, dj)] = stencil.get((di, dj), 0.0) + value

    add(0, 0, (east[0, 0] + west[0, 0]) / hx ** 2 + (north[1, 1] + south[1, 1]) / hy ** 2)
    add(1, 0, -east[0, 0] / hx ** 2)
    add(-1, 0, -west[0, 0] / hx ** 2)
    add(0, 1, -north[1, 1] / hy ** 2)
    add(0, -1, -south[1, 1] / hy ** 2)
    for dj, sign in ((1, -1.0), (-1, 1.0)):
        add(0, dj, sign * east[0, 1] * cxy)
        add(1, dj, sign * east[0, 1] * cxy)
        add(-1, dj, -sign * west[0, 1] * cxy)
        add(0, dj, -sign * west[0, 1] * cxy)
    for di, sign in ((1, -1.0), (-1, 1.0)):
        add(di, 0, sign * north[1, 0] * cxy)
        add(di, 1, sign * north[1, 0] * cxy)
        add(di, -1, -sign * south[1, 0] * cxy)
        add(di, 0, -sign * south[1, 0] * cxy)

    Xa, Ya = np.meshgrid(x, y, indexing="ij")
    full = np.zeros((nx + 1, ny + 1))
    edge = np.ones_like(full, dtype=bool)
    edge[1:-1, 1:-1] = False
    full[edge] = boundary(Xa, Ya)[edge]

    interior = (nx - 1, ny - 1)
    index = np.arange(interior[0] * interior[1]).reshape(interior)
    I, J = np.meshgrid(np.arange(1, nx), np.arange(1, ny), indexing="ij")
    b = np.asarray(rhs(X, Y), dtype=float).copy()
    rows, cols, vals = [], [], []
    for (di, dj), coef in stencil.items():
        coef = np.broadcast_to(coef, interior)
        ti, tj = I + di, J + dj
        inside = (ti >= 1) & (ti <= nx - 1) & (tj >= 1) & (tj <= ny - 1)
        rows.append(index[inside])
        cols.append(index[ti[inside] - 1, tj[inside] - 1])
        vals.append(coef[inside])
        b[~inside] -= coef[~inside] * full[ti[~inside], tj[~inside]]
    A = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(index.size, index.size))
    full[1:-1, 1:-1] = spsolve(A.tocsc(), b.ravel()).reshape(interior)
    return RectSolution(x, y, full)


def _rect_problem(prob: Rect2DConfig):
    f_expr = parse_expression(prob.f, 2, allow_x=True)
    g_expr = parse_expression(prob.g, 2, allow_x=True)

    def f(X, Y):
        return evaluate_array(f_expr, x=np.stack([X, Y]))

    def g(X, Y):
        return evaluate_array(g_expr, x=np.stack([X, Y]))

    return f, g


def rect_shape(prob: Rect2DConfig, eps, mesh_per_period=None):
    M = mesh_per_period or prob.mesh_per_period
    (x0, x1), (y0, y1) = prob.domain
    return max(2, round((x1 - x0) * M / eps)), max(2, round((y1 - y0) * M / eps))


def solve_eps_rect2d(tc: TransformedCoefficients, prob: Rect2DConfig, eps: float, mesh_per_period: int = None):
    """-div(q(x/ε)∇u) = f m(x/ε) on the rectangle (experimental)."""
    if tc.dim != 2:
        raise ValueError("the rectangle solver needs two-dimensional coefficients")
    f, g = _rect_problem(prob)
    interp = TrigInterpolant([tc.q.component(i, j) for i in range(2) for j in range(2)] + [tc.m])

    def lookup(X, Y):
        points = np.stack([X.ravel(), Y.ravel()], axis=1) / eps
        return interp(points).T.reshape((5,) + X.shape)

    def coefficient(X, Y):
        return lookup(X, Y)[:4].reshape((2, 2) + X.shape)

    def rhs(X, Y):
        return f(X, Y) * lookup(X, Y)[4]

    return solve_divergence_rect2d(coefficient, rhs, g, prob.domain, rect_shape(prob, eps, mesh_per_period))


def solve_homogenized_rect2d(a_bar, prob: Rect2DConfig, shape):
    f, g = _rect_problem(prob)
    a_bar = np.asarray(a_bar, dtype=float)

    def coefficient(X, Y):
        return np.broadcast_to(a_bar.reshape(2, 2, 1, 1), (2, 2) + X.shape)

    return solve_divergence_rect2d(coefficient, f, g, prob.domain, shape)


def rect_error_norms(u_eps: RectSolution, u: RectSolution):
    hx, hy = u_eps.x[1] - u_eps.x[0], u_eps.y[1] - u_eps.y[0]
    e = u_eps.values - u.values
    l2 = math.sqrt(float((e ** 2).sum()) * hx * hy)
    grad = (np.diff(e, axis=0) ** 2).sum() * hy / hx + (np.diff(e, axis=1) ** 2).sum() * hx / hy
    return {"L2": l2, "H1_raw": math.sqrt(l2 ** 2 + float(grad))}


def _rect_point(tc, a_bar, prob, eps):
    u_eps = solve_eps_rect2d(tc, prob, eps)
    u = solve_homogenized_rect2d(a_bar, prob, rect_shape(prob, eps))
    row = {"eps": eps}
    row.update(rect_error_norms(u_eps, u))
    return row


async def _run_rect_sweep(tc, a_bar, prob):
    return await asyncio.gather(*[asyncio.to_thread(_rect_point, tc, a_bar, prob, eps) for eps in prob.eps])


def rect2d_sweep(tc: TransformedCoefficients, a_bar, prob: Rect2DConfig) -> RateReport:
    logger.warning("the rectangle solver is experimental: rectangles are not C^{1,1} domains")
    rows = asyncio.run(_run_rect_sweep(tc, a_bar, prob))
    slopes = {name: fit_rate(prob.eps, [r[name] for r in rows]) for name in ("L2", "H1_raw")}
    checks = {"L2_slope": slopes["L2"].slope is not None and slopes["L2"].slope >= 0.8}
    return RateReport(np.asarray(a_bar, dtype=float).tolist(), rows, slopes, None, None, checks)
