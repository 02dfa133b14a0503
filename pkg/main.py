import os
import sys
import json
import argparse
from datetime import datetime, timezone
from functools import cached_property

import numpy as np

from log_config import logger
from models import (
    CounterexampleReport, HomogenizeReport, LipschitzConfig, Manifest, MeasureReport, MonteCarloReport,
    ProblemConfig, RatesReport, RunConfig, SDEConfig, TransformReport, ValidateReport,
)
from utils import AcceptanceError, ConfigError, load_config, package_versions, run_guarded, write_csv, write_json

SUBCOMMANDS = {
    "validate": "parse the coefficients and certify ellipticity of ã",
    "measure": "solve for the invariant measure and test the centering condition",
    "transform": "build β, the flux tensor φ and the drift-free matrix q",
    "homogenize": "solve the cell problems and assemble ā",
    "rates": "run the ε-sweep and fit convergence rates",
    "counterexample": "reproduce the non-centered counterexample",
    "mc": "estimate the effective diffusivity by Monte Carlo",
    "all": "validate, measure, transform, homogenize, rates and mc in one go",
}


def _matrix(a):
    return np.asarray(a, dtype=float).tolist()


class Pipeline:
    """One run: stages are computed on demand and written under `config.out`."""

    def __init__(self, config: RunConfig, subcommand: str):
        self.config = config
        self.subcommand = subcommand
        self.out = config.out
        self.files = []

    def _json(self, name, payload, model):
        self.files.append(os.path.relpath(write_json(os.path.join(self.out, name), payload, model), self.out))
        logger.info(f"wrote {name}")

    def _csv(self, name, header, rows):
        self.files.append(os.path.relpath(write_csv(os.path.join(self.out, name), header, rows), self.out))
        logger.info(f"wrote {name}")

    def _field(self, name, field):
        from torus import write_field
        for path in write_field(self.out, name, field):
            self.files.append(os.path.relpath(path, self.out))

    @cached_property
    def coeffs(self):
        from measure import coefficients_from_config
        return coefficients_from_config(self.config)

    @cached_property
    def measure(self):
        from measure import solve_invariant_measure
        tol = self.config.tolerances
        return solve_invariant_measure(self.coeffs, tol.solver, tol.max_iterations)

    @cached_property
    def transformed(self):
        from transform import transform_coefficients
        return transform_coefficients(self.coeffs, self.measure, self.config.tolerances, self.config.force_noncentered)

    @cached_property
    def homogenized(self):
        from cell import homogenize
        return homogenize(self.coeffs, self.transformed, self.config.tolerances)

    def validate(self):
        c = self.coeffs
        self._json("validate.json", {
            "dim": c.dim, "grid": list(c.grid.shape), "lam": c.lam, "Lambda": c.Lambda,
            "a_sup": c.a_sup, "div_a_sup": c.div_a_sup, "b_sup": c.b_sup,
        }, ValidateReport)
        logger.info(f"ã is elliptic with λ = {c.lam:.6g}, Λ = {c.Lambda:.6g}")

    def measure_step(self):
        from measure import classify_centering, laminated_centering, require_centered
        m = self.measure
        laminated = None
        if self.coeffs.dim > 1:
            try:
                laminated = laminated_centering(self.coeffs).tolist()
            except ConfigError:
                laminated = None
        self._field("m", m.m)
        self._json("measure.json", {
            "residual": m.residual, "min_value": m.min_value, "max_value": m.max_value,
            "oscillation": m.oscillation, "centering_defect": m.centering_defect.tolist(),
            "centering": classify_centering(m.centering_defect, self.config.tolerances),
            "method": m.method, "laminated_conditions": laminated,
        }, MeasureReport)
        require_centered(m.centering_defect, self.config.tolerances, self.config.force_noncentered)

    def transform_step(self):
        tc = self.transformed
        self._field("q", tc.q)
        self._field("phi", tc.phi)
        self._field("beta", tc.beta)
        self._json("transform.json", {
            "lambda1": tc.lambda1, "Lambda1": tc.Lambda1, "divergence_residual": tc.divergence_residual,
            "beta_mean": tc.beta.means().tolist(), "harmonic_residual": tc.harmonic_residual, "valid": tc.valid,
        }, TransformReport)

    def homogenize_step(self):
        cells, tensor = self.homogenized
        for j, chi in enumerate(cells.chi, start=1):
            self._field(f"chi_{j}", chi)
        for j, chi in enumerate(cells.chi_nondiv, start=1):
            self._field(f"chi_nondiv_{j}", chi)
        self._json("homogenize.json", {
            "q_bar": _matrix(tensor.q_bar), "a_bar": _matrix(tensor.a_bar),
            "a_bar_direct": _matrix(tensor.a_bar_direct), "lambda1_check": tensor.lambda1_check,
            "lambda1": tensor.lambda1, "cross_formula_gap": tensor.cross_formula_gap,
            "chi_gap": tensor.chi_gap, "residuals": cells.residuals, "valid": tensor.valid,
        }, HomogenizeReport)

    def _check(self, checks, what):
        failed = [name for name, ok in checks.items() if not ok]
        if self.config.check and failed:
            raise AcceptanceError(f"{what} acceptance checks failed: {', '.join(failed)}")

    def rates_step(self):
        from rates import rate_sweep, rect2d_sweep
        _, tensor = self.homogenized
        if not tensor.valid:
            raise ConfigError("rates need centered coefficients; ā is not defined otherwise")
        dim = self.coeffs.dim
        if dim == 1:
            prob = self.config.problem or ProblemConfig()
            lipschitz = self.config.lipschitz or LipschitzConfig()
            report = rate_sweep(self.transformed, float(tensor.a_bar[0, 0]), prob, lipschitz_prob=lipschitz)
            columns = ["eps", "L2", "Linf", "H1_raw", "H1_corrected", "Lip"]
            lipschitz_summary = report.lipschitz
            experimental = False
        elif dim == 2 and self.config.rect2d is not None:
            report = rect2d_sweep(self.transformed, tensor.a_bar, self.config.rect2d)
            columns = ["eps", "L2", "H1_raw"]
            lipschitz_summary = None
            experimental = True
        else:
            raise ConfigError("rates need d = 1, or d = 2 with a rect2d block")
        self._csv("rates.csv", columns, [[row[c] for c in columns] for row in report.rows])
        self._json("rates.json", {
            "a_bar": report.a_bar, "eps": [row["eps"] for row in report.rows], "slopes": report.slopes,
            "raw_to_corrected_ratio": report.raw_to_corrected_ratio, "lipschitz": lipschitz_summary,
            "experimental": experimental, "checks": report.checks,
        }, RatesReport)
        self._check(report.checks, "rate")

    def counterexample_step(self):
        from rates import noncentered_counterexample
        eps = self.config.problem.eps if self.config.problem is not None else None
        result = noncentered_counterexample(eps)
        rows = result["rows"]
        columns = ["eps", "max_error", "sup_norm", "sup_over_eps", "u_at_half"]
        self._csv("counterexample.csv", columns, [[row[c] for c in columns] for row in rows])
        self._json("counterexample.json", {
            "eps": [r["eps"] for r in rows], "max_error": [r["max_error"] for r in rows],
            "sup_norm": [r["sup_norm"] for r in rows], "sup_over_eps": [r["sup_over_eps"] for r in rows],
            "note": result["note"],
        }, CounterexampleReport)
        self._check({
            "closed_form": all(r["max_error"] <= 1e-10 for r in rows),
            "sup_below_eps": all(r["sup_norm"] <= r["eps"] for r in rows),
        }, "counterexample")

    def mc_step(self, endpoints=False):
        from measure import classify_centering
        from sde import dt_halving_check, run_monte_carlo
        cfg = self.config.mc or SDEConfig(seed=self.config.seed)
        a_bar = None
        if classify_centering(self.measure.centering_defect, self.config.tolerances) != "non-centered":
            a_bar = self.homogenized[1].a_bar
        estimate, ensemble, consistent = run_monte_carlo(self.coeffs, cfg, a_bar, self.measure)
        halving = None
        if cfg.check_halving:
            coarse, fine, halving_ok = dt_halving_check(self.coeffs, cfg)
            halving = {"D_half": _matrix(fine.D), "gap": _matrix(np.abs(coarse.D - fine.D)), "consistent": halving_ok}
        self._json("mc.json", {
            "D": _matrix(estimate.D), "stderr": _matrix(estimate.stderr), "drift": estimate.drift.tolist(),
            "drift_stderr": estimate.drift_stderr.tolist(), "a_bar": None if a_bar is None else _matrix(a_bar),
            "consistent": consistent, "dt_halving": halving, "aborted_paths": int(ensemble.aborted.sum()),
            "seed": cfg.seed,
            "config": cfg.model_dump(),
        }, MonteCarloReport)
        if endpoints:
            d = self.coeffs.dim
            header = [f"x0_{i + 1}" for i in range(d)] + [f"xT_{i + 1}" for i in range(d)]
            self._csv("mc_endpoints.csv", header, np.hstack([ensemble.start, ensemble.end]).tolist())
        self._check({
            "consistent": bool(consistent),
            "drift": bool(np.all(np.abs(estimate.drift) <= 3.0 * estimate.drift_stderr)),
            **({} if halving is None else {"dt_halving": halving["consistent"]}),
        }, "Monte Carlo")

    def all_steps(self):
        self.validate()
        self.measure_step()
        self.transform_step()
        self.homogenize_step()
        if self.coeffs.dim == 1 or self.config.rect2d is not None:
            self.rates_step()
        if self.config.mc is not None:
            self.mc_step()

    def write_manifest(self):
        write_json(os.path.join(self.out, "manifest.json"), {
            "subcommand": self.subcommand, "seed": self.config.seed, "preset": self.config.preset,
            "tolerances": self.config.tolerances.model_dump(), "versions": package_versions(),
            "files": sorted(set(self.files)), "created_at": datetime.now(timezone.utc).isoformat(),
        }, Manifest)

    def run(self, endpoints=False):
        steps = {
            "validate": self.validate,
            "measure": self.measure_step,
            "transform": self.transform_step,
            "homogenize": self.homogenize_step,
            "rates": self.rates_step,
            "counterexample": self.counterexample_step,
            "mc": lambda: self.mc_step(endpoints),
            "all": self.all_steps,
        }
        try:
            steps[self.subcommand]()
        finally:
            if self.files:
                self.write_manifest()


def build_parser():
    parser = argparse.ArgumentParser(prog="homog-drift",
                                     description="Homogenization of non-divergence operators with large periodic drift")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in SUBCOMMANDS.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", help="YAML/JSON run configuration (falls back to CONFIG_URL)")
        p.add_argument("--preset", help="built-in configuration name")
        p.add_argument("--seed", type=int, help="master seed, overrides the config")
        p.add_argument("--out", help="output directory")
        p.add_argument("--check", action="store_true", help="exit 5 when acceptance thresholds are missed")
        p.add_argument("--force-noncentered", action="store_true",
                       help="continue past a failed centering condition; outputs are marked invalid")
        if name == "mc":
            p.add_argument("--endpoints", action="store_true", help="also write path endpoints as CSV")
    sub.add_parser("schema", help="print the JSON schema of the run configuration")
    return parser


def _configure(args):
    overrides = {
        "preset": args.preset,
        "out": args.out,
        "seed": args.seed,
        "check": True if args.check else None,
        "force_noncentered": True if args.force_noncentered else None,
    }
    config = load_config(args.config, overrides)
    if args.seed is not None and config.mc is not None:
        config.mc.seed = args.seed
    return config


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.command == "schema":
        print(json.dumps(RunConfig.model_json_schema(), indent=2, sort_keys=True))
        return 0

    def execute():
        config = _configure(args)
        Pipeline(config, args.command).run(getattr(args, "endpoints", False))

    return run_guarded(execute)


if __name__ == "__main__":
    sys.exit(main())
