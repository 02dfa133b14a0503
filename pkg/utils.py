import os
import csv
import json
from importlib import metadata

from log_config import logger, is_debug


class PipelineError(Exception):
    exit_code = 4

    def __init__(self, detail, exit_code=None):
        super().__init__(detail)
        self.detail = detail
        if exit_code is not None:
            self.exit_code = exit_code

class ConfigError(PipelineError):
    exit_code = 2

class CenteringError(PipelineError):
    exit_code = 3

class NumericalError(PipelineError):
    exit_code = 4

class ResolutionError(NumericalError):
    pass

class PositivityError(NumericalError):
    pass

class EllipticityError(NumericalError):
    pass

class ConsistencyError(NumericalError):
    pass

class SolvabilityError(NumericalError):
    pass

class BlowUpError(NumericalError):
    pass

class AcceptanceError(PipelineError):
    exit_code = 5


class ExpressionError(ConfigError):
    pass

class ExpressionSyntaxError(ExpressionError):
    def __init__(self, source, offset, reason):
        super().__init__(f"syntax error at byte {offset}: {reason} in {source!r}")
        self.offset = offset

class UnknownIdentifierError(ExpressionError):
    def __init__(self, name, offset):
        super().__init__(f"unknown identifier '{name}' at byte {offset}")
        self.name = name
        self.offset = offset

class VariableIndexError(ExpressionError):
    def __init__(self, name, dim, offset):
        super().__init__(f"variable '{name}' at byte {offset} out of range for dimension {dim}")
        self.name = name
        self.offset = offset

class EvaluationDomainError(ExpressionError):
    def __init__(self, reason, offset):
        super().__init__(f"domain error at byte {offset}: {reason}")
        self.offset = offset


EPS_SWEEP = [2.0 ** -k for k in range(3, 8)]
LIPSCHITZ_SWEEP = [2.0 ** -k for k in range(4, 8)]

PRESETS = {
    "identity": {
        "dim": 2,
        "a": [["1", "0"], ["0", "1"]],
        "b": ["0", "0"],
        "grid": {"sizes": [32, 32]},
        "rect2d": {"eps": [0.25, 0.125, 0.0625, 0.03125], "mesh_per_period": 8},
    },
    "centered-1d": {
        "dim": 1,
        "a": "1",
        "b": "cos(2*pi*y1)",
        "grid": {"sizes": [256]},
        "problem": {"f": "1", "g": [0.0, 0.0], "eps": EPS_SWEEP},
        "lipschitz": {"f": "0", "g": [0.0, 1.0], "eps": LIPSCHITZ_SWEEP},
    },
    "noncentered-1d": {
        "dim": 1,
        "a": "1",
        "b": "1",
        "grid": {"sizes": [256]},
        "problem": {"f": "-1", "g": [0.0, 0.0], "eps": [0.5, 0.1, 0.05, 0.01, 0.005]},
    },
    "harmonic-1d": {
        "dim": 1,
        "a": "2+sin(2*pi*y1)",
        "b": "0",
        "grid": {"sizes": [256]},
        "problem": {"f": "1", "g": [0.0, 0.0], "eps": EPS_SWEEP},
    },
    "laminated-2d": {
        "dim": 2,
        "a": [["2+sin(2*pi*y1)", "0"], ["0", "1"]],
        "b": ["(2+sin(2*pi*y1))*cos(2*pi*y1)", "cos(2*pi*y1)"],
        "grid": {"sizes": [64, 32]},
    },
    "shear-2d": {
        "dim": 2,
        "a": [["1", "0"], ["0", "1"]],
        "b": ["0", "cos(2*pi*y1)"],
        "grid": {"sizes": [64, 64]},
        "rect2d": {"f": "1", "g": "0", "eps": [0.25, 0.125, 0.0625, 0.03125], "mesh_per_period": 8},
    },
}


def update_config(config_data):
    """Expand a `preset` reference; keys given next to it override the preset."""
    preset = config_data.get("preset")
    if not preset:
        return config_data
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset '{preset}', expected one of {sorted(PRESETS)}")
    merged = json.loads(json.dumps(PRESETS[preset]))
    for key, value in config_data.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key].update(value)
        else:
            merged[key] = value
    return merged


def _fetch_config_url(config_url):
    import httpx
    try:
        response = httpx.get(config_url, timeout=30.0, follow_redirects=True)
        response.raise_for_status()
    except httpx.HTTPError as e:
        raise ConfigError(f"Error fetching config from {config_url}: {e}")
    return response.text


def load_config(path=None, overrides=None):
    """Read a YAML/JSON run config; fall back to CONFIG_URL when no file is found."""
    import yaml
    from pydantic import ValidationError
    from models import RunConfig

    text = None
    if path:
        try:
            with open(path, "r") as f:
                text = f.read()
        except FileNotFoundError:
            logger.error(f"'{path}' not found. Please check the file path.")
        except OSError as e:
            raise ConfigError(f"open '{path}' failed: {e}")

    if text is None:
        config_url = os.environ.get("CONFIG_URL")
        if config_url:
            logger.info(f"Fetching config from {config_url}")
            text = _fetch_config_url(config_url)
        elif path:
            raise ConfigError(f"config file '{path}' not found and CONFIG_URL is not set")
        else:
            text = "{}"

    try:
        conf = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"config is not valid YAML/JSON: {e}")
    if conf is None:
        conf = {}
    if not isinstance(conf, dict):
        raise ConfigError("config must be a mapping")
    conf.update({k: v for k, v in (overrides or {}).items() if v is not None})
    if not conf.get("preset") and "a" not in conf:
        raise ConfigError("config defines no coefficients: give 'a' and 'b' or a 'preset'")

    try:
        return RunConfig.model_validate(update_config(conf))
    except ValidationError as e:
        raise ConfigError(f"invalid config: {e}")


def run_guarded(func, *args, **kwargs):
    """Run one pipeline step and translate failures into exit codes."""
    try:
        func(*args, **kwargs)
        return 0
    except PipelineError as e:
        if isinstance(e, CenteringError):
            logger.error(f"centering violation: {e.detail}")
        else:
            logger.error(f"{type(e).__name__}: {e.detail}")
        return e.exit_code
    except Exception as e:
        if is_debug:
            import traceback
            traceback.print_exc()
        logger.error(f"unexpected failure: {e}")
        return NumericalError.exit_code


def package_versions():
    versions = {}
    for name in ("numpy", "scipy", "pydantic", "PyYAML", "arpeggio", "httpx"):
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = None
    return versions


def write_json(path, payload, model=None):
    """Validate `payload` against a pydantic `model` (if given) and write it deterministically."""
    if model is not None:
        payload = model.model_validate(payload).model_dump(mode="json")
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True, ensure_ascii=False)
        f.write("\n")
    return path


def write_csv(path, header, rows):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\r\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(v)) if isinstance(v, float) else v for v in row])
    return path
