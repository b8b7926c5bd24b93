"""Secondary acceptance: render every figure kind from real harness output.

Data is produced through the public ``valleysim`` CLI only (the documented
external interface), using the acceptance experiments of the primary suite
at reduced replica counts; the dimension table runs at full scale.  The
fitted-line annotations must match the values recorded in report.json.
"""

import json
import subprocess

import pytest

from plotkit.figures import FigureSpec, render

SEED = 20260810


def run_valleysim(experiment, config, out_dir):
    config_path = out_dir / "config.json"
    config_path.write_text(json.dumps(config))
    proc = subprocess.run(
        ["valleysim", experiment, "--config", str(config_path),
         "--out", str(out_dir), "--threads", "2"],
        capture_output=True, text=True)
    assert proc.returncode == 0, proc.stdout + proc.stderr
    return out_dir


@pytest.fixture(scope="module")
def outputs(tmp_path_factory):
    root = tmp_path_factory.mktemp("harness_outputs")
    dirs = {}

    moments_dir = root / "moments"
    moments_dir.mkdir()
    dirs["moments"] = run_valleysim("moments", {
        "schema_version": 1, "experiment": "moments",
        "grid": {"half_width": 20.0, "n_points": 800},
        "stepper": {"scheme": "semi_implicit", "dt": 0.0025},
        "sigma": {"kind": "linear", "c": 1.0},
        "ic": {"kind": "constant_one"},
        "times": [0.25, 0.5, 1.0], "moment_orders": [1, 2],
        "n_replicas": 400, "master_seed": SEED,
        "oracle_rel_tolerance": 0.25,
    }, moments_dir)

    mass_dir = root / "mass"
    mass_dir.mkdir()
    dirs["mass"] = run_valleysim("mass", {
        "schema_version": 1, "experiment": "mass",
        "grid": {"half_width": 60.0, "n_points": 1200},
        "stepper": {"scheme": "splitting_exponential", "dt": 0.01},
        "sigma": {"kind": "linear", "c": 1.0},
        "ic": {"kind": "bump"},
        "times": [5.0, 10.0, 20.0, 40.0, 60.0, 80.0],
        "n_replicas": 48, "master_seed": SEED,
        "r_squared_min": 0.8,
    }, mass_dir)

    valleys_dir = root / "valleys"
    valleys_dir.mkdir()
    dirs["valleys"] = run_valleysim("valleys", {
        "schema_version": 1, "experiment": "valleys",
        "grid": {"half_width": 60.0, "n_points": 1200},
        "stepper": {"scheme": "splitting_exponential", "dt": 0.01},
        "sigma": {"kind": "linear", "c": 1.0},
        "ic": {"kind": "constant_one"},
        "times": [5.0, 10.0, 20.0, 40.0],
        "n_replicas": 48, "master_seed": SEED,
        "h0": 0.5,
    }, valleys_dir)

    dim_dir = root / "dim"
    dim_dir.mkdir()
    dirs["dim"] = run_valleysim("dim", {
        "schema_version": 1, "experiment": "dim",
        "set": {"kind": "unit_lattice", "n_max": 12},
        "rho_grid": [0.5, 1.0, 1.5, 2.0],
        "expect": {"value": 1.0, "tol": 0.5},
    }, dim_dir)
    return dirs


def test_renders_moment_vs_oracle(outputs, tmp_path):
    out = tmp_path / "moments.svg"
    render(FigureSpec("moment_vs_oracle",
                      {"moments_csv": str(outputs["moments"] / "moments.csv")},
                      str(out)))
    assert "oracle" in out.read_text()
    print("\n[C12a] PASS  moment_vs_oracle rendered from moments.csv")


def test_renders_mass_decay_with_matching_annotation(outputs, tmp_path):
    report = json.loads((outputs["mass"] / "report.json").read_text())
    out = tmp_path / "mass.svg"
    render(FigureSpec("mass_decay",
                      {"series_csv": str(outputs["mass"] / "series.csv"),
                       "report_json": str(outputs["mass"] / "report.json")},
                      str(out)))
    svg = out.read_text()
    expected = (f"fit: slope={report['fit']['slope']:.4f}, "
                f"r2={report['fit']['r_squared']:.4f}")
    assert expected in svg
    print(f"\n[C12b] PASS  mass_decay annotation matches report.json "
          f"({expected!r})")


def test_renders_valley_growth_with_matching_annotation(outputs, tmp_path):
    report = json.loads((outputs["valleys"] / "report.json").read_text())
    out = tmp_path / "valleys.svg"
    render(FigureSpec("valley_growth",
                      {"valleys_csv": str(outputs["valleys"] / "valleys.csv"),
                       "report_json": str(outputs["valleys"] / "report.json")},
                      str(out)))
    svg = out.read_text()
    fit = report["fits"].get("valley_length")
    if fit is not None:
        assert f"slope={fit['slope']:.4f}" in svg
    print("\n[C12c] PASS  valley_growth rendered"
          + ("" if fit is None else " with matching fit annotation"))


def test_renders_dim_partial_sums_with_estimate(outputs, tmp_path):
    report = json.loads((outputs["dim"] / "report.json").read_text())
    out = tmp_path / "dim.svg"
    render(FigureSpec(
        "dim_partial_sums",
        {"dim_csv": str(outputs["dim"] / "dim_partial_sums.csv"),
         "report_json": str(outputs["dim"] / "report.json")},
        str(out)))
    assert f"estimate = {report['estimate']:g}" in out.read_text()
    print("\n[C12d] PASS  dim_partial_sums annotation matches report.json")


def test_cli_renders_from_spec_file(outputs, tmp_path):
    spec_path = tmp_path / "spec.json"
    out = tmp_path / "fig.svg"
    spec_path.write_text(json.dumps({
        "kind": "mass_decay",
        "inputs": {"series_csv": str(outputs["mass"] / "series.csv")},
        "output": str(out),
    }))
    proc = subprocess.run(["plotkit", "render", "--spec", str(spec_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert out.exists()
