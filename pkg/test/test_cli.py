import os
import sys
import json

import httpx
import numpy as np
import pytest

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
from main import main


def load(path):
    with open(path) as f:
        return json.load(f)


@pytest.fixture
def out(tmp_path):
    return str(tmp_path / "out")


@pytest.fixture
def config_file(tmp_path):
    def write(text):
        path = tmp_path / "run.yaml"
        path.write_text(text)
        return str(path)
    return write


def test_validate_writes_report_and_manifest(out):
    assert main(["validate", "--preset", "identity", "--out", out]) == 0
    report = load(os.path.join(out, "validate.json"))
    assert report["lam"] == pytest.approx(1.0)
    manifest = load(os.path.join(out, "manifest.json"))
    assert manifest["subcommand"] == "validate"
    assert manifest["files"] == ["validate.json"]
    assert "numpy" in manifest["versions"]


def test_noncentered_measure_exits_3(out):
    assert main(["measure", "--preset", "noncentered-1d", "--out", out]) == 3
    report = load(os.path.join(out, "measure.json"))
    assert report["centering"] == "non-centered"
    assert report["centering_defect"][0] == pytest.approx(1.0, abs=1e-10)
    assert os.path.exists(os.path.join(out, "m.csv"))


def test_force_flag_continues(out):
    assert main(["homogenize", "--preset", "noncentered-1d", "--force-noncentered", "--out", out]) == 0
    assert load(os.path.join(out, "homogenize.json"))["valid"] is False


def test_homogenize_harmonic(out):
    assert main(["homogenize", "--preset", "harmonic-1d", "--out", out]) == 0
    report = load(os.path.join(out, "homogenize.json"))
    assert report["a_bar"][0][0] == pytest.approx(np.sqrt(3.0), abs=1e-6)
    assert os.path.exists(os.path.join(out, "chi_1.json"))


def test_laminated_measure_reports_conditions(out):
    assert main(["measure", "--preset", "laminated-2d", "--out", out]) == 0
    report = load(os.path.join(out, "measure.json"))
    np.testing.assert_allclose(report["laminated_conditions"], [0.0, 0.0], atol=1e-10)


def test_counterexample_check(out):
    assert main(["counterexample", "--preset", "noncentered-1d", "--check", "--out", out]) == 0
    with open(os.path.join(out, "counterexample.csv"), newline="") as f:
        lines = f.read().split("\r\n")
    assert lines[0] == "eps,max_error,sup_norm,sup_over_eps,u_at_half"
    assert len(lines) == 5 + 2


def test_rates_need_one_dimension_or_rectangle(out):
    assert main(["rates", "--preset", "laminated-2d", "--out", out]) == 2


def test_all_check_on_centered_preset(out):
    assert main(["all", "--preset", "centered-1d", "--check", "--out", out]) == 0
    rates = load(os.path.join(out, "rates.json"))
    for name in ("L2", "Linf", "H1_corrected"):
        assert rates["slopes"][name]["slope"] >= 0.9
    assert rates["experimental"] is False
    files = load(os.path.join(out, "manifest.json"))["files"]
    assert {"validate.json", "measure.json", "transform.json", "homogenize.json", "rates.csv"} <= set(files)


def test_outputs_are_deterministic(tmp_path):
    first, second = str(tmp_path / "a"), str(tmp_path / "b")
    assert main(["transform", "--preset", "laminated-2d", "--out", first]) == 0
    assert main(["transform", "--preset", "laminated-2d", "--out", second]) == 0
    for name in ("transform.json", "q.csv", "phi.csv", "beta.csv", "m.csv"):
        with open(os.path.join(first, name), "rb") as a, open(os.path.join(second, name), "rb") as b:
            assert a.read() == b.read(), name


def test_monte_carlo_seed_override(config_file, out):
    path = config_file(
        "a: 2+sin(2*pi*y1)\n"
        "b: '0'\n"
        "grid: {sizes: [64]}\n"
        "mc: {dt: 0.01, T: 10, N: 1000, seed: 1}\n"
    )
    assert main(["mc", "--config", path, "--seed", "5", "--endpoints", "--out", out]) == 0
    report = load(os.path.join(out, "mc.json"))
    assert report["seed"] == 5
    assert report["config"]["seed"] == 5
    assert os.path.exists(os.path.join(out, "mc_endpoints.csv"))


def test_monte_carlo_halving_report(config_file, out):
    path = config_file(
        "a: '1'\n"
        "b: cos(2*pi*y1)\n"
        "grid: {sizes: [32]}\n"
        "mc: {dt: 0.02, T: 10, N: 1000, seed: 3, check_halving: true}\n"
    )
    assert main(["mc", "--config", path, "--out", out]) == 0
    report = load(os.path.join(out, "mc.json"))
    assert report["config"]["check_halving"] is True
    halving = report["dt_halving"]
    assert halving["consistent"] is True
    assert len(halving["D_half"]) == 1 and halving["gap"][0][0] >= 0.0


@pytest.mark.parametrize("text", [
    "a: '1'\nb: '0'\ncolour: blue\n",
    "a: '1 +'\nb: '0'\n",
    "a: '1'\nb: 'z'\n",
    "a: [['1', '0'], ['0', '1']]\nb: ['0']\n",
    "- not a mapping\n",
    "preset: nowhere\n",
    "a: '1'\nb: '0'\nproblem: {f: 'y1'}\n",
])
def test_bad_configs_exit_2(config_file, out, text):
    assert main(["validate", "--config", config_file(text), "--out", out]) == 2


def test_missing_coefficients_exit_2(out, monkeypatch):
    monkeypatch.delenv("CONFIG_URL", raising=False)
    assert main(["validate", "--out", out]) == 2


def test_degenerate_diffusion_exits_4(config_file, out):
    assert main(["validate", "--config", config_file("a: 'sin(2*pi*y1)'\nb: '0'\n"), "--out", out]) == 4


def test_schema(capsys):
    assert main(["schema"]) == 0
    schema = json.loads(capsys.readouterr().out)
    assert "a" in schema["properties"]


def serve(monkeypatch, status, text=""):
    url = "https://configs.example.org/run.yaml"
    calls = []

    def fake_get(target, **kwargs):
        calls.append(target)
        return httpx.Response(status, text=text, request=httpx.Request("GET", target))

    monkeypatch.setenv("CONFIG_URL", url)
    monkeypatch.setattr(httpx, "get", fake_get)
    return url, calls


def test_config_url_fallback(monkeypatch, out):
    url, calls = serve(monkeypatch, 200, "preset: identity\n")
    assert main(["validate", "--out", out]) == 0
    assert calls == [url]
    assert load(os.path.join(out, "manifest.json"))["preset"] == "identity"
    assert load(os.path.join(out, "validate.json"))["lam"] == pytest.approx(1.0)


def test_config_url_used_when_file_is_missing(monkeypatch, tmp_path, out):
    url, calls = serve(monkeypatch, 200, "preset: identity\n")
    assert main(["validate", "--config", str(tmp_path / "absent.yaml"), "--out", out]) == 0
    assert calls == [url]


def test_config_url_http_error_exits_2(monkeypatch, out):
    serve(monkeypatch, 404, "not found")
    assert main(["validate", "--out", out]) == 2


def test_config_url_unreachable_exits_2(monkeypatch, out):
    def refuse(target, **kwargs):
        raise httpx.ConnectError("connection refused", request=httpx.Request("GET", target))

    monkeypatch.setenv("CONFIG_URL", "https://configs.example.org/run.yaml")
    monkeypatch.setattr(httpx, "get", refuse)
    assert main(["validate", "--out", out]) == 2
