from typing import Dict, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from log_config import logger
from utils import ExpressionError


class GridConfig(BaseModel):
    sizes: List[int]

    @field_validator("sizes")
    @classmethod
    def check_sizes(cls, sizes):
        if not 1 <= len(sizes) <= 3:
            raise ValueError("grid must have 1 to 3 axes")
        for n in sizes:
            if n < 8 or n % 2:
                raise ValueError(f"grid size {n} must be even and >= 8")
        return sizes


class Tolerances(BaseModel):
    solver: float = 1e-10
    divergence: float = 1e-8
    centering: float = 1e-8
    centering_warning: float = 1e-4
    consistency: float = 1e-8
    corrector: float = 1e-7
    max_iterations: int = 500


def _check_eps(eps):
    if any(not 0 < e < 1 for e in eps):
        raise ValueError("eps values must lie in (0, 1)")
    if any(later >= earlier for earlier, later in zip(eps, eps[1:])):
        raise ValueError("eps values must be strictly decreasing")
    return eps


class ProblemConfig(BaseModel):
    domain: Tuple[float, float] = (0.0, 1.0)
    f: str = "1"
    g: Tuple[float, float] = (0.0, 0.0)
    eps: List[float] = Field(default_factory=lambda: [2.0 ** -k for k in range(3, 8)])
    mesh_per_period: int = 64

    @field_validator("eps")
    @classmethod
    def check_eps(cls, eps):
        return _check_eps(eps)

    @field_validator("domain")
    @classmethod
    def check_domain(cls, domain):
        if not domain[0] < domain[1]:
            raise ValueError("domain endpoints must satisfy x0 < x1")
        return domain

    @field_validator("mesh_per_period")
    @classmethod
    def check_mesh(cls, n):
        if n < 2:
            raise ValueError("mesh_per_period must be >= 2")
        return n


class LipschitzConfig(ProblemConfig):
    f: str = "0"
    g: Tuple[float, float] = (0.0, 1.0)
    eps: List[float] = Field(default_factory=lambda: [2.0 ** -k for k in range(4, 8)])


class Rect2DConfig(BaseModel):
    domain: Tuple[Tuple[float, float], Tuple[float, float]] = ((0.0, 1.0), (0.0, 1.0))
    f: str = "1"
    g: str = "0"
    eps: List[float] = Field(default_factory=lambda: [0.25, 0.125, 0.0625, 0.03125])
    mesh_per_period: int = 8

    @field_validator("eps")
    @classmethod
    def check_eps(cls, eps):
        return _check_eps(eps)


class SDEConfig(BaseModel):
    dt: float = 1e-3
    T: float = 50.0
    N: int = 100_000
    seed: int = 0
    interpolation: Literal["trig", "linear"] = "trig"
    chunk_size: int = 5_000
    check_halving: bool = False

    @model_validator(mode="after")
    def check_ranges(self):
        if self.dt <= 0:
            raise ValueError("mc.dt must be positive")
        if self.T < 10:
            raise ValueError("mc.T must be >= 10")
        if self.N < 1000:
            raise ValueError("mc.N must be >= 1000")
        if self.chunk_size < 1:
            raise ValueError("mc.chunk_size must be positive")
        return self


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    preset: Optional[str] = None
    dim: int
    a: List[List[str]]
    b: List[str]
    grid: GridConfig
    problem: Optional[ProblemConfig] = None
    lipschitz: Optional[LipschitzConfig] = None
    rect2d: Optional[Rect2DConfig] = None
    mc: Optional[SDEConfig] = None
    tolerances: Tolerances = Field(default_factory=Tolerances)
    seed: int = 0
    out: str = "out"
    force_noncentered: bool = False
    check: bool = False

    @model_validator(mode="before")
    @classmethod
    def normalize(cls, data):
        if not isinstance(data, dict):
            return data
        data = dict(data)
        a = data.get("a")
        b = data.get("b")
        if isinstance(a, (str, int, float)):
            data["a"] = [[str(a)]]
        elif isinstance(a, list):
            data["a"] = [[str(v) for v in row] if isinstance(row, list) else row for row in a]
        if isinstance(b, (str, int, float)):
            data["b"] = [str(b)]
        elif isinstance(b, list):
            data["b"] = [str(v) for v in b]
        if "dim" not in data and isinstance(data.get("a"), list):
            data["dim"] = len(data["a"])
        if "grid" not in data and "dim" in data:
            data["grid"] = {"sizes": [256] if data["dim"] == 1 else [128] * data["dim"]}
        return data

    @model_validator(mode="after")
    def check_coefficients(self):
        from expression import parse_expression, variables

        d = self.dim
        if not 1 <= d <= 3:
            raise ValueError("dim must be 1, 2 or 3")
        if len(self.a) != d or any(len(row) != d for row in self.a):
            raise ValueError(f"a must be a {d}x{d} matrix of expressions")
        if len(self.b) != d:
            raise ValueError(f"b must have {d} entries")
        if len(self.grid.sizes) != d:
            raise ValueError(f"grid.sizes must have {d} entries")

        for i in range(d):
            for j in range(i + 1, d):
                if self.a[i][j].strip() != self.a[j][i].strip():
                    logger.warning(f"a[{i + 1}][{j + 1}] and a[{j + 1}][{i + 1}] differ as text; using their average")
                    avg = f"(({self.a[i][j]})+({self.a[j][i]}))/2"
                    self.a[i][j] = avg
                    self.a[j][i] = avg

        try:
            for text in [t for row in self.a for t in row] + self.b:
                parse_expression(text, d)
            domain_data = [(block.f, 1) for block in (self.problem, self.lipschitz) if block is not None]
            if self.rect2d is not None:
                domain_data += [(self.rect2d.f, 2), (self.rect2d.g, 2)]
            for text, dim in domain_data:
                if any(kind == "y" for kind, _ in variables(parse_expression(text, dim, allow_x=True))):
                    raise ValueError(f"domain data {text!r} may only use x variables")
        except ExpressionError as e:
            raise ValueError(str(e))
        return self


# Report payloads. Every file the CLI writes is validated against one of these.

class FieldHeader(BaseModel):
    name: str
    shape: List[int]
    components: List[str]
    symmetry: Literal["none", "symmetric", "antisymmetric"] = "none"
    format: Literal["csv-row-major"] = "csv-row-major"


class ValidateReport(BaseModel):
    dim: int
    grid: List[int]
    lam: float
    Lambda: float
    a_sup: float
    div_a_sup: float
    b_sup: float


class MeasureReport(BaseModel):
    residual: float
    min_value: float
    max_value: float
    oscillation: float
    centering_defect: List[float]
    centering: Literal["centered", "warning", "non-centered"]
    method: str
    laminated_conditions: Optional[List[float]] = None


class TransformReport(BaseModel):
    lambda1: float
    Lambda1: float
    divergence_residual: float
    beta_mean: List[float]
    harmonic_residual: float
    valid: bool


class HomogenizeReport(BaseModel):
    q_bar: List[List[float]]
    a_bar: List[List[float]]
    a_bar_direct: List[List[float]]
    lambda1_check: float
    lambda1: float
    cross_formula_gap: float
    chi_gap: float
    residuals: Dict[str, float]
    valid: bool


class FitRecord(BaseModel):
    slope: Optional[float] = None
    intercept: Optional[float] = None
    max_log_residual: Optional[float] = None
    excluded: List[float] = Field(default_factory=list)
    note: Optional[str] = None


class LipschitzReport(BaseModel):
    eps: List[float]
    sup_derivative: List[float]
    holder_seminorm: List[float]
    holder_fit: FitRecord
    holder_growth: Optional[float] = None
    variation: float


class RatesReport(BaseModel):
    a_bar: Union[float, List[List[float]]]
    eps: List[float]
    slopes: Dict[str, FitRecord]
    raw_to_corrected_ratio: Optional[float] = None
    lipschitz: Optional[LipschitzReport] = None
    experimental: bool = False
    checks: Dict[str, bool] = Field(default_factory=dict)


class CounterexampleReport(BaseModel):
    eps: List[float]
    max_error: List[float]
    sup_norm: List[float]
    sup_over_eps: List[float]
    note: str


class HalvingReport(BaseModel):
    D_half: List[List[float]]
    gap: List[List[float]]
    consistent: bool


class MonteCarloReport(BaseModel):
    D: List[List[float]]
    stderr: List[List[float]]
    drift: List[float]
    drift_stderr: List[float]
    a_bar: Optional[List[List[float]]] = None
    consistent: Optional[bool] = None
    dt_halving: Optional[HalvingReport] = None
    aborted_paths: int
    seed: int
    config: SDEConfig


class Manifest(BaseModel):
    subcommand: str
    seed: int
    preset: Optional[str] = None
    tolerances: Tolerances
    versions: Dict[str, Optional[str]]
    files: List[str]
    created_at: str
