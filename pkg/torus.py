"""Periodic fields on a uniform grid of the flat torus R^d/Z^d.

Values are stored with numpy in ``indexing="ij"`` order, so a flat view is
row-major over (k_1, ..., k_d). Derivatives, Poisson solves and
interpolation are spectral (scipy.fft).
"""
import os
import csv
import json
from functools import cached_property

import numpy as np
import scipy.fft as sfft
import scipy.linalg
from scipy.interpolate import RegularGridInterpolator
from scipy.sparse.linalg import LinearOperator, gmres

from log_config import logger
from utils import ConfigError, EllipticityError, ResolutionError, SolvabilityError

# dense augmented solves above this many unknowns switch to GMRES
DIRECT_LIMIT = 2048
DIRECT_BLOCK = 256
MODE_CUTOFF = 1e-15
DEALIAS_FACTOR = 2


class TorusGrid:
    def __init__(self, shape):
        shape = tuple(int(n) for n in np.atleast_1d(shape))
        if not 1 <= len(shape) <= 3:
            raise ConfigError(f"torus dimension must be 1, 2 or 3, got {len(shape)}")
        for n in shape:
            if n < 8 or n % 2:
                raise ConfigError(f"grid size {n} must be even and >= 8")
        self.shape = shape

    @property
    def dim(self):
        return len(self.shape)

    @property
    def size(self):
        return int(np.prod(self.shape))

    @property
    def max_wavenumber(self):
        return max(self.shape) // 2

    def __eq__(self, other):
        return isinstance(other, TorusGrid) and other.shape == self.shape

    def __hash__(self):
        return hash(self.shape)

    def __repr__(self):
        return f"TorusGrid({self.shape})"

    @cached_property
    def coordinates(self):
        """Node coordinates, shape (d, *shape)."""
        axes = [np.arange(n) / n for n in self.shape]
        return np.stack(np.meshgrid(*axes, indexing="ij"))

    @cached_property
    def wavenumbers(self):
        """Integer wavenumbers per axis, each broadcastable to `shape`."""
        out = []
        for axis, n in enumerate(self.shape):
            k = sfft.fftfreq(n, 1.0 / n)
            view = [1] * self.dim
            view[axis] = n
            out.append(k.reshape(view))
        return out

    @cached_property
    def derivative_symbols(self):
        symbols = []
        for axis, n in enumerate(self.shape):
            k = self.wavenumbers[axis].copy()
            k[k == -n // 2] = 0.0
            symbols.append(2j * np.pi * k)
        return symbols

    @cached_property
    def laplacian_symbol(self):
        return -4.0 * np.pi ** 2 * sum(k ** 2 for k in self.wavenumbers)

    @property
    def axes(self):
        return tuple(range(-self.dim, 0))

    def fft(self, values):
        return sfft.fftn(values, axes=self.axes)

    def ifft(self, hat):
        return sfft.ifftn(hat, axes=self.axes).real


def spectral_derivative(values, grid: TorusGrid, axis: int):
    """d/dy_{axis+1} of an array whose trailing axes are the grid."""
    return grid.ifft(grid.fft(values) * grid.derivative_symbols[axis])


def spectral_laplacian(values, grid: TorusGrid):
    return grid.ifft(grid.fft(values) * grid.laplacian_symbol)


def inverse_laplacian(values, grid: TorusGrid):
    """Mean-zero h with Δh = values minus its mean."""
    symbol = grid.laplacian_symbol
    hat = grid.fft(values)
    with np.errstate(divide="ignore", invalid="ignore"):
        hat = np.where(symbol == 0, 0.0, hat / np.where(symbol == 0, 1.0, symbol))
    return grid.ifft(hat)


def _frozen(values):
    values = np.array(values, dtype=float)
    values.setflags(write=False)
    return values


# Products of fields are formed on a grid with DEALIAS_FACTOR times the modes
# per axis and truncated back, so no product mode folds onto a resolved one.

def _slab(ndim, axis, start, stop):
    index = [slice(None)] * ndim
    index[axis] = slice(start, stop)
    return tuple(index)


def _pad_axis(hat, axis, n, m):
    """Zero-pad an fft-ordered spectrum from n to m modes; the Nyquist mode is split evenly."""
    shape = list(hat.shape)
    shape[axis] = m
    out = np.zeros(shape, dtype=complex)
    half = n // 2
    nd = hat.ndim
    out[_slab(nd, axis, 0, half)] = hat[_slab(nd, axis, 0, half)]
    out[_slab(nd, axis, m - half + 1, m)] = hat[_slab(nd, axis, n - half + 1, n)]
    nyquist = 0.5 * hat[_slab(nd, axis, half, half + 1)]
    out[_slab(nd, axis, half, half + 1)] = nyquist
    out[_slab(nd, axis, m - half, m - half + 1)] = nyquist
    return out


def _truncate_axis(hat, axis, n, m):
    """Keep the n lowest of m fft-ordered modes; ±n/2 fold onto the coarse Nyquist mode."""
    shape = list(hat.shape)
    shape[axis] = n
    out = np.zeros(shape, dtype=complex)
    half = n // 2
    nd = hat.ndim
    out[_slab(nd, axis, 0, half)] = hat[_slab(nd, axis, 0, half)]
    out[_slab(nd, axis, half + 1, n)] = hat[_slab(nd, axis, m - half + 1, m)]
    out[_slab(nd, axis, half, half + 1)] = (hat[_slab(nd, axis, half, half + 1)]
                                            + hat[_slab(nd, axis, m - half, m - half + 1)])
    return out


def upsample(values, grid: TorusGrid, factor: int = DEALIAS_FACTOR):
    """Trigonometric interpolant of `values` sampled on the grid refined `factor` times per axis."""
    hat = grid.fft(values)
    for axis, n in zip(grid.axes, grid.shape):
        hat = _pad_axis(hat, axis, n, factor * n)
    return sfft.ifftn(hat, axes=grid.axes).real * factor ** grid.dim


def restrict(fine, grid: TorusGrid, factor: int = DEALIAS_FACTOR):
    """Inverse of `upsample`: drop every mode the coarse grid cannot hold."""
    hat = sfft.fftn(fine, axes=grid.axes)
    for axis, n in zip(grid.axes, grid.shape):
        hat = _truncate_axis(hat, axis, n, factor * n)
    return grid.ifft(hat) / factor ** grid.dim


def dealiased_product(left, right, grid: TorusGrid):
    """Pointwise product of two sampled fields without aliasing; leading axes broadcast."""
    return restrict(upsample(left, grid) * upsample(right, grid), grid)


class ScalarField:
    def __init__(self, grid: TorusGrid, values):
        values = np.asarray(values, dtype=float)
        if values.shape != grid.shape:
            if values.size != grid.size:
                raise ValueError(f"{values.size} values do not fit grid {grid.shape}")
            values = values.reshape(grid.shape)
        self.grid = grid
        self.values = _frozen(values)

    @cached_property
    def hat(self):
        hat = self.grid.fft(self.values)
        hat.setflags(write=False)
        return hat

    @property
    def coefficients(self):
        return self.hat / self.grid.size

    def mean(self):
        return float(self.values.mean())

    def min(self):
        return float(self.values.min())

    def max(self):
        return float(self.values.max())

    def norm_inf(self):
        return float(np.abs(self.values).max())

    def _other(self, other):
        if isinstance(other, ScalarField):
            if other.grid != self.grid:
                raise ValueError("fields live on different grids")
            return other.values
        return other

    def __add__(self, other):
        return ScalarField(self.grid, self.values + self._other(other))

    __radd__ = __add__

    def __sub__(self, other):
        return ScalarField(self.grid, self.values - self._other(other))

    def __rsub__(self, other):
        return ScalarField(self.grid, self._other(other) - self.values)

    def __mul__(self, other):
        if isinstance(other, ScalarField):
            return ScalarField(self.grid, dealiased_product(self.values, self._other(other), self.grid))
        return ScalarField(self.grid, self.values * other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return ScalarField(self.grid, self.values / self._other(other))

    def __rtruediv__(self, other):
        return ScalarField(self.grid, self._other(other) / self.values)

    def __neg__(self):
        return ScalarField(self.grid, -self.values)


class VectorField:
    """d components stacked as values[i] (shape (d, *grid))."""

    def __init__(self, grid: TorusGrid, values):
        values = np.asarray(values, dtype=float)
        if values.shape != (grid.dim,) + grid.shape:
            raise ValueError(f"vector field values must have shape {(grid.dim,) + grid.shape}, got {values.shape}")
        self.grid = grid
        self.values = _frozen(values)

    @classmethod
    def from_components(cls, components):
        grid = components[0].grid
        return cls(grid, np.stack([c.values for c in components]))

    def component(self, i):
        return ScalarField(self.grid, self.values[i])

    def components(self):
        return [self.component(i) for i in range(self.grid.dim)]

    def means(self):
        return self.values.reshape(self.grid.dim, -1).mean(axis=1)

    def norm_inf(self):
        return float(np.abs(self.values).max())


class MatrixField:
    """d x d components stacked as values[i, j]; `symmetry` is checked exactly."""

    SYMMETRIES = ("none", "symmetric", "antisymmetric")

    def __init__(self, grid: TorusGrid, values, symmetry="none"):
        values = np.asarray(values, dtype=float)
        d = grid.dim
        if values.shape != (d, d) + grid.shape:
            raise ValueError(f"matrix field values must have shape {(d, d) + grid.shape}, got {values.shape}")
        if symmetry not in self.SYMMETRIES:
            raise ValueError(f"unknown symmetry flag {symmetry!r}")
        transposed = np.swapaxes(values, 0, 1)
        if symmetry == "symmetric" and not np.array_equal(values, transposed):
            raise ValueError("matrix field flagged symmetric is not exactly symmetric")
        if symmetry == "antisymmetric" and not np.array_equal(values, -transposed):
            raise ValueError("matrix field flagged antisymmetric is not exactly antisymmetric")
        self.grid = grid
        self.values = _frozen(values)
        self.symmetry = symmetry

    def component(self, i, j):
        return ScalarField(self.grid, self.values[i, j])

    def symmetric_part(self):
        values = 0.5 * (self.values + np.swapaxes(self.values, 0, 1))
        return MatrixField(self.grid, values, "symmetric")

    def antisymmetric_part(self):
        values = 0.5 * (self.values - np.swapaxes(self.values, 0, 1))
        return MatrixField(self.grid, values, "antisymmetric")

    def row_divergence(self):
        """(div M)_i = sum_j d_j M_ij."""
        d = self.grid.dim
        return VectorField(self.grid, np.stack([
            sum(spectral_derivative(self.values[i, j], self.grid, j) for j in range(d)) for i in range(d)
        ]))

    def pointwise(self):
        """Values as (*grid, d, d) for batched linear algebra."""
        return np.moveaxis(self.values, (0, 1), (-2, -1))

    def norm_inf(self):
        return float(np.abs(self.values).max())


def divergence_operator(matrix, vector, grid: TorusGrid, reference):
    """u -> -d_i(A_ij d_j u - V_i u) for arrays (A: (d, d, *grid), V: (d, *grid) or None).

    The constant part reference*I of A goes through the exact Laplacian symbol so
    the Nyquist modes stay invertible.
    """
    d = grid.dim
    excess = upsample(np.array(matrix, dtype=float) - reference * np.eye(d).reshape((d, d) + (1,) * d), grid)
    drift = None if vector is None else upsample(np.asarray(vector, dtype=float), grid)

    def apply(u):
        grads = [upsample(spectral_derivative(u, grid, j), grid) for j in range(d)]
        fine_u = None if drift is None else upsample(u, grid)
        flux = 0.0
        for i in range(d):
            component = sum(excess[i, j] * grads[j] for j in range(d))
            if drift is not None:
                component = component - drift[i] * fine_u
            flux = flux + spectral_derivative(restrict(component, grid), grid, i)
        return -reference * spectral_laplacian(u, grid) - flux

    return apply


def nondivergence_operator(matrix, vector, grid: TorusGrid, reference):
    """u -> -A_ik d_i d_k u - V_i d_i u, constant part as in divergence_operator."""
    d = grid.dim
    excess = upsample(np.array(matrix, dtype=float) - reference * np.eye(d).reshape((d, d) + (1,) * d), grid)
    drift = upsample(np.asarray(vector, dtype=float), grid)

    def apply(u):
        grads = [spectral_derivative(u, grid, k) for k in range(d)]
        fine = 0.0
        for i in range(d):
            for k in range(d):
                fine = fine + excess[i, k] * upsample(spectral_derivative(grads[k], grid, i), grid)
            fine = fine + drift[i] * upsample(grads[i], grid)
        return -reference * spectral_laplacian(u, grid) - restrict(fine, grid)

    return apply


def operator_scale(matrix_sup, vector_sup, grid: TorusGrid):
    """Crude bound on the discrete operator norm, used to normalise residuals."""
    k = 2.0 * np.pi * grid.max_wavenumber
    return grid.dim * (matrix_sup * k ** 2 + vector_sup * k)


def mean(field: ScalarField) -> float:
    return field.mean()


def partial_derivative(field: ScalarField, axis: int) -> ScalarField:
    """Fourier-multiplier derivative along `axis` (1-based); Nyquist mode is dropped."""
    if not 1 <= axis <= field.grid.dim:
        raise ValueError(f"axis {axis} out of range for dimension {field.grid.dim}")
    return ScalarField(field.grid, spectral_derivative(field.values, field.grid, axis - 1))


def laplacian(field: ScalarField) -> ScalarField:
    return ScalarField(field.grid, spectral_laplacian(field.values, field.grid))


def solve_poisson_torus(rhs: ScalarField, tol: float = 1e-10) -> ScalarField:
    avg = rhs.mean()
    if abs(avg) > tol:
        raise SolvabilityError(f"Poisson right-hand side has mean {avg:.3e} > {tol:.1e}; no periodic solution")
    return ScalarField(rhs.grid, inverse_laplacian(rhs.values, rhs.grid))


def eigenvalue_bounds(field: MatrixField):
    """(min over nodes of the smallest eigenvalue of sym(M), max spectral norm of M)."""
    mats = field.pointwise()
    sym = 0.5 * (mats + np.swapaxes(mats, -1, -2))
    lowest = np.linalg.eigvalsh(sym)[..., 0]
    norms = np.linalg.norm(mats, ord=2, axis=(-2, -1))
    return float(lowest.min()), float(norms.max())


def pointwise_matrix_sqrt(field: MatrixField, lam: float) -> MatrixField:
    if field.symmetry != "symmetric":
        raise ValueError("pointwise_matrix_sqrt needs a field flagged symmetric")
    w, v = np.linalg.eigh(field.pointwise())
    lowest = w[..., 0]
    if lowest.min() < lam:
        node = np.unravel_index(int(np.argmin(lowest)), field.grid.shape)
        coords = tuple(round(float(k) / n, 12) for k, n in zip(node, field.grid.shape))
        raise EllipticityError(f"smallest eigenvalue {lowest.min():.6g} < {lam:.6g} at node {tuple(int(k) for k in node)} (y = {coords})")
    root = (v * np.sqrt(w)[..., None, :]) @ np.swapaxes(v, -1, -2)
    root = 0.5 * (root + np.swapaxes(root, -1, -2))
    return MatrixField(field.grid, np.moveaxis(root, (-2, -1), (0, 1)), "symmetric")


def antiderivative_1d(field: ScalarField):
    """Return (mean, P) with int_0^y g = mean*y + P(y), P periodic and P(0) = 0."""
    grid = field.grid
    if grid.dim != 1:
        raise ValueError("antiderivative_1d needs a 1D field")
    symbol = grid.derivative_symbols[0]
    hat = field.hat.copy()
    hat[0] = 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        hat = np.where(symbol == 0, 0.0, hat / np.where(symbol == 0, 1.0, symbol))
    periodic = grid.ifft(hat)
    return field.mean(), ScalarField(grid, periodic - periodic[0])


class TrigInterpolant:
    """Trigonometric interpolation of several fields sharing one grid.

    Only modes above MODE_CUTOFF relative to each field's largest coefficient
    are kept, so band-limited coefficients are evaluated exactly and cheaply.
    """

    def __init__(self, fields, cutoff=MODE_CUTOFF, block=4096):
        grid = fields[0].grid
        coeffs = [f.coefficients for f in fields]
        mask = np.zeros(grid.shape, dtype=bool)
        for c in coeffs:
            mag = np.abs(c)
            mask |= mag > cutoff * max(mag.max(), np.finfo(float).tiny)
        mask.flat[0] = True
        idx = np.nonzero(mask)
        self.grid = grid
        self.k = np.stack([np.broadcast_to(grid.wavenumbers[a], grid.shape)[idx] for a in range(grid.dim)])
        self.c = np.stack([c[idx] for c in coeffs])
        self._re = np.ascontiguousarray(self.c.real.T)
        self._im = np.ascontiguousarray(self.c.imag.T)
        # per axis: the distinct wavenumbers and, for each kept mode, its column among them
        self._axes = [np.unique(k_axis, return_inverse=True) for k_axis in self.k]
        self.block = block

    @property
    def n_modes(self):
        return self.k.shape[1]

    def __call__(self, points):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        out = np.empty((points.shape[0], self.c.shape[0]))
        for start in range(0, points.shape[0], self.block):
            chunk = points[start:start + self.block]
            cos = sin = None
            for axis, (waves, column) in enumerate(self._axes):
                phase = (2.0 * np.pi) * chunk[:, axis, None] * waves
                cos_a, sin_a = np.cos(phase)[:, column], np.sin(phase)[:, column]
                if cos is None:
                    cos, sin = cos_a, sin_a
                else:
                    cos, sin = cos * cos_a - sin * sin_a, sin * cos_a + cos * sin_a
            out[start:start + self.block] = cos @ self._re - sin @ self._im
        return out


class LinearInterpolant:
    """Multilinear periodic interpolation (RegularGridInterpolator on a wrapped grid)."""

    def __init__(self, fields):
        grid = fields[0].grid
        stacked = np.stack([f.values for f in fields], axis=-1)
        padded = np.pad(stacked, [(0, 1)] * grid.dim + [(0, 0)], mode="wrap")
        axes = [np.arange(n + 1) / n for n in grid.shape]
        self.grid = grid
        self._interp = RegularGridInterpolator(axes, padded, method="linear")

    def __call__(self, points):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        return self._interp(np.mod(points, 1.0))


def make_interpolant(fields, method="trig"):
    if method == "trig":
        return TrigInterpolant(fields)
    if method == "linear":
        return LinearInterpolant(fields)
    raise ConfigError(f"unknown interpolation method {method!r}")


def interpolate(fields, points, method="trig"):
    """Evaluate `fields` (list of ScalarFields) at points of shape (P, d); returns (P, len(fields))."""
    return make_interpolant(list(fields), method)(points)


def solve_periodic(operator, rhs, grid: TorusGrid, *, mean_value=0.0, scale=1.0, precondition=1.0,
                   tol=1e-10, max_iterations=500, order=("fixed_point", "direct", "krylov"), label="periodic"):
    """Solve operator(u) = rhs on the torus with mean(u) = mean_value.

    `operator` maps arrays (..., *grid.shape) to the same shape and must have
    range in the mean-zero functions. `scale` bounds the operator norm and
    normalizes the residual; `precondition` is the diffusion constant of the
    Laplacian preconditioner. Strategies in `order` are tried until one meets
    `tol`; returns (u, info).
    """
    rhs = np.asarray(rhs, dtype=float)
    shape = grid.shape

    def residual(u):
        r = rhs - operator(u)
        denom = scale * np.abs(u).max() + np.abs(rhs).max()
        return float(np.abs(r).max() / denom) if denom > 0 else float(np.abs(r).max())

    def precond(r):
        return inverse_laplacian(r, grid) / (-precondition)

    best = None
    for method in order:
        if method == "fixed_point":
            u = np.full(shape, mean_value, dtype=float)
            res0 = res = residual(u)
            iterations = 0
            while res > tol and iterations < max_iterations:
                u = u + precond(rhs - operator(u))
                iterations += 1
                res = residual(u)
                if not np.isfinite(res) or res > 1e3 * max(res0, 1e-300):
                    break
            info = {"method": "fixed_point", "iterations": iterations, "residual": res}
        elif method == "direct":
            if grid.size > DIRECT_LIMIT:
                continue
            n = grid.size
            eye = np.eye(n)
            columns = np.concatenate([
                operator(eye[start:start + DIRECT_BLOCK].reshape((-1,) + shape)).reshape(-1, n)
                for start in range(0, n, DIRECT_BLOCK)
            ])
            matrix = columns.T.copy()
            b = rhs.ravel().copy()
            matrix[0, :] = 1.0 / n
            b[0] = mean_value
            try:
                u = scipy.linalg.solve(matrix, b).reshape(shape)
            except (np.linalg.LinAlgError, ValueError) as e:
                raise ResolutionError(f"{label}: augmented system is singular ({e}); refine the grid")
            res = residual(u) if np.all(np.isfinite(u)) else np.inf
            info = {"method": "direct", "iterations": 1, "residual": res}
        elif method == "krylov":
            n = grid.size
            base = np.full(shape, mean_value, dtype=float)
            target = (rhs - operator(base)).ravel()

            def matvec(w):
                w = w.reshape(shape)
                return operator(w - w.mean()).ravel()

            A = LinearOperator((n, n), matvec=matvec, dtype=float)
            M = LinearOperator((n, n), matvec=lambda r: precond(r.reshape(shape)).ravel(), dtype=float)
            steps = []
            w, _ = gmres(A, target, rtol=min(tol * 1e-2, 1e-12), atol=0.0, restart=80,
                            maxiter=max_iterations, M=M, callback=steps.append, callback_type="pr_norm")
            w = w.reshape(shape)
            u = base + w - w.mean()
            res = residual(u)
            info = {"method": "krylov", "iterations": len(steps), "residual": res}
        else:
            raise ValueError(f"unknown solver strategy {method!r}")

        if best is None or info["residual"] < best[1]["residual"]:
            best = (u, info)
        if info["residual"] <= tol:
            logger.info(f"{label}: {info['method']} converged (iterations={info['iterations']}, residual={info['residual']:.2e})")
            return u, info
        logger.info(f"{label}: {info['method']} stopped at residual {info['residual']:.2e}")

    if best is None:
        raise ResolutionError(f"{label}: no applicable solver strategy among {order}")
    raise ResolutionError(f"{label}: residual {best[1]['residual']:.2e} above {tol:.1e}; refine the grid")


# Field files: <name>.json header plus <name>.csv with one column per component.

def _component_names(field):
    d = field.grid.dim
    if isinstance(field, ScalarField):
        return ["value"], field.values[None]
    if isinstance(field, VectorField):
        return [f"c{i + 1}" for i in range(d)], field.values
    return [f"c{i + 1}{j + 1}" for i in range(d) for j in range(d)], field.values.reshape((d * d,) + field.grid.shape)


def write_field(out_dir, name, field):
    from models import FieldHeader
    from utils import write_json

    names, columns = _component_names(field)
    header = {"name": name, "shape": list(field.grid.shape), "components": names,
              "symmetry": getattr(field, "symmetry", "none")}
    json_path = write_json(os.path.join(out_dir, f"{name}.json"), header, FieldHeader)
    csv_path = os.path.join(out_dir, f"{name}.csv")
    flat = columns.reshape(len(names), -1).T
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\r\n")
        writer.writerow(names)
        for row in flat:
            writer.writerow([repr(float(v)) for v in row])
    return [json_path, csv_path]


def read_field(out_dir, name):
    with open(os.path.join(out_dir, f"{name}.json")) as f:
        header = json.load(f)
    with open(os.path.join(out_dir, f"{name}.csv"), newline="") as f:
        rows = list(csv.reader(f))
    if rows[0] != header["components"]:
        raise ConfigError(f"field file {name}.csv columns {rows[0]} do not match header")
    grid = TorusGrid(header["shape"])
    data = np.array([[float(v) for v in row] for row in rows[1:]]).T
    d = grid.dim
    names = header["components"]
    if names == ["value"]:
        return ScalarField(grid, data[0])
    if all(len(n) == 2 for n in names):
        return VectorField(grid, data.reshape((d,) + grid.shape))
    return MatrixField(grid, data.reshape((d, d) + grid.shape), header.get("symmetry", "none"))
