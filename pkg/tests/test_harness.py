import json
import os

import numpy as np
import pytest

from valleysim.cli import main
from valleysim.errors import ConfigurationError
from valleysim.harness import (
    load_config,
    parse_grid,
    parse_ic,
    parse_sigma,
    parse_stepper,
    run,
)


def write_config(tmp_path, payload, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(payload))
    return str(path)


def moments_config(n_replicas=200, times=(0.1,)):
    return {
        "schema_version": 1,
        "experiment": "moments",
        "grid": {"half_width": 8.0, "n_points": 160},
        "stepper": {"scheme": "semi_implicit", "dt": 0.01},
        "sigma": {"kind": "linear", "c": 1.0},
        "ic": {"kind": "constant_one"},
        "times": list(times),
        "moment_orders": [1, 2],
        "n_replicas": n_replicas,
        "master_seed": 90125,
    }


def read_bytes(out_dir, name):
    with open(os.path.join(out_dir, name), "rb") as fh:
        return fh.read()


# --- config validation ---------------------------------------------------------

def test_missing_key_is_named(tmp_path):
    cfg = moments_config()
    del cfg["master_seed"]
    path = write_config(tmp_path, cfg)
    status = run(path, str(tmp_path / "out"))
    assert status == 1


def test_unknown_key_is_named():
    with pytest.raises(ConfigurationError, match="grid.n_pointz"):
        parse_grid({"half_width": 4.0, "n_points": 16, "n_pointz": 1})
    with pytest.raises(ConfigurationError, match="stepper.dtt"):
        parse_stepper({"scheme": "semi_implicit", "dt": 0.1, "dtt": 0.2})
    with pytest.raises(ConfigurationError, match="sigma.kind"):
        parse_sigma({"kind": "cubic"})
    with pytest.raises(ConfigurationError, match="ic.kind"):
        parse_ic({"kind": "fractal"})


def test_schema_version_checked(tmp_path):
    path = write_config(tmp_path, {"schema_version": 99, "experiment": "oracle"})
    with pytest.raises(ConfigurationError, match="schema_version"):
        load_config(path)


def test_experiment_subcommand_mismatch(tmp_path):
    path = write_config(tmp_path, moments_config())
    assert run(path, str(tmp_path / "out"), experiment="oracle") == 1


def test_invalid_json_reports_error(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    assert run(str(path), str(tmp_path / "out")) == 1


# --- experiments end to end ------------------------------------------------------

def test_moments_run_outputs(tmp_path):
    path = write_config(tmp_path, moments_config())
    out = str(tmp_path / "out")
    assert run(path, out, n_workers=1) == 0
    report = json.loads(read_bytes(out, "report.json"))
    assert report["passed"]
    names = {c["name"] for c in report["checks"]}
    assert "m2_oracle_t0.1" in names and "oracle_self_consistency" in names
    rows = np.genfromtxt(os.path.join(out, "moments.csv"), delimiter=",",
                         names=True)
    assert set(rows.dtype.names) == {"t", "k", "estimate", "ci", "oracle_value"}
    manifest = json.loads(read_bytes(out, "manifest.json"))
    assert manifest["rng_algorithm"].startswith("philox4x64")
    assert manifest["replica_streams"]["count"] == 200


def test_moments_replay_and_worker_count_are_byte_identical(tmp_path):
    path = write_config(tmp_path, moments_config())
    outs = [str(tmp_path / f"out{i}") for i in range(3)]
    assert run(path, outs[0], n_workers=1) == 0
    assert run(path, outs[1], n_workers=1) == 0
    assert run(path, outs[2], n_workers=2) == 0
    ref_csv = read_bytes(outs[0], "moments.csv")
    ref_rep = read_bytes(outs[0], "report.json")
    for other in outs[1:]:
        assert read_bytes(other, "moments.csv") == ref_csv
        assert read_bytes(other, "report.json") == ref_rep


def test_cli_seed_and_replica_overrides(tmp_path):
    path = write_config(tmp_path, moments_config())
    out_a = str(tmp_path / "a")
    out_b = str(tmp_path / "b")
    assert main(["moments", "--config", path, "--out", out_a,
                 "--threads", "1", "--replicas", "120"]) == 0
    assert main(["moments", "--config", path, "--out", out_b,
                 "--threads", "1", "--replicas", "120", "--seed", "555"]) == 0
    man = json.loads(read_bytes(out_a, "manifest.json"))
    assert man["replica_streams"]["count"] == 120
    assert read_bytes(out_a, "moments.csv") != read_bytes(out_b, "moments.csv")


def test_simulate_run_outputs(tmp_path):
    cfg = {
        "schema_version": 1,
        "experiment": "simulate",
        "grid": {"half_width": 6.0, "n_points": 128},
        "stepper": {"scheme": "splitting_exponential", "dt": 0.01},
        "sigma": {"kind": "linear", "c": 1.0},
        "ic": {"kind": "bump"},
        "t_end": 0.2,
        "snapshot_times": [0.1, 0.2],
        "master_seed": 7,
        "snapshot_format": "binary",
    }
    path = write_config(tmp_path, cfg)
    out = str(tmp_path / "out")
    assert run(path, out) == 0
    series = np.genfromtxt(os.path.join(out, "series.csv"), delimiter=",",
                           names=True)
    assert set(series.dtype.names) == {"t", "l1", "sup", "clip_count", "replica"}
    assert len(series) == 20
    snaps = os.listdir(os.path.join(out, "fields"))
    assert sorted(snaps) == ["u_t0.100000.bin", "u_t0.200000.bin"]


def test_decompose_check_run(tmp_path):
    cfg = {
        "schema_version": 1,
        "experiment": "decompose-check",
        "grid": {"half_width": 6.0, "n_points": 240},
        "stepper": {"scheme": "splitting_exponential", "dt": 0.01},
        "sigma": {"kind": "linear", "c": 1.0},
        "m_bumps": 2,
        "slab_index": 1,
        "master_seed": 3,
    }
    path = write_config(tmp_path, cfg)
    out = str(tmp_path / "out")
    assert run(path, out) == 0
    report = json.loads(read_bytes(out, "report.json"))
    assert report["passed"]
    values = {c["name"]: c["value"] for c in report["checks"]}
    assert values["superposition_residual"] <= 1e-10
    assert values["tail_sup_within_bound"] <= report["tail_bound"]


def test_oracle_run(tmp_path):
    cfg = {"schema_version": 1, "experiment": "oracle", "t_end": 1.0,
           "n_steps": 5000}
    path = write_config(tmp_path, cfg)
    out = str(tmp_path / "out")
    assert run(path, out) == 0
    rows = np.genfromtxt(os.path.join(out, "oracle.csv"), delimiter=",",
                         names=True)
    assert rows["m2"][0] == 1.0
    assert rows["m2"][-1] == pytest.approx(1.9524, abs=1e-3)


def test_dim_run_with_expectation(tmp_path):
    cfg = {
        "schema_version": 1,
        "experiment": "dim",
        "set": {"kind": "unit_lattice", "n_max": 12},
        "rho_grid": [0.5, 1.0, 1.5, 2.0],
        "expect": {"value": 1.0, "tol": 0.5},
    }
    path = write_config(tmp_path, cfg)
    out = str(tmp_path / "out")
    assert run(path, out) == 0
    rows = np.genfromtxt(os.path.join(out, "dim_partial_sums.csv"),
                         delimiter=",", names=True)
    assert set(rows.dtype.names) == {"rho", "n", "nu", "partial_sum"}


def test_qv_run(tmp_path):
    cfg = {
        "schema_version": 1,
        "experiment": "qv",
        "grid": {"half_width": 6.0, "n_points": 120},
        "stepper": {"scheme": "semi_implicit", "dt": 0.005},
        "sigma": {"kind": "linear", "c": 1.0},
        "ic": {"kind": "constant_one"},
        "t_end": 0.1,
        "phi": {"kind": "indicator", "lo": -1.0, "hi": 1.0},
        "n_replicas": 6000,
        "master_seed": 5,
    }
    path = write_config(tmp_path, cfg)
    out = str(tmp_path / "out")
    assert run(path, out, n_workers=2) == 0
    report = json.loads(read_bytes(out, "report.json"))
    assert report["qv"]["equality_case"]
    assert report["passed"]


def test_decompose_check_zero_sigma_tail_is_heat_flow(tmp_path):
    # with sigma = 0 the linearized parts evolve by pure heat flow, so the
    # far-field tail statistic must equal the deterministic flow of the
    # tail data and obey the 2*exp(-L/(4n)) envelope
    from valleysim.dynamics import decompose_unity, semigroup_values
    from valleysim.lattice import Grid

    cfg = {
        "schema_version": 1,
        "experiment": "decompose-check",
        "grid": {"half_width": 10.0, "n_points": 400},
        "stepper": {"scheme": "splitting_exponential", "dt": 0.01},
        "sigma": {"kind": "linear", "c": 0.0},
        "m_bumps": 4,
        "slab_index": 1,
        "master_seed": 12,
    }
    path = write_config(tmp_path, cfg)
    out = str(tmp_path / "out")
    assert run(path, out) == 0
    report = json.loads(read_bytes(out, "report.json"))
    tail_sup = {c["name"]: c for c in report["checks"]}["tail_sup_within_bound"]

    grid = Grid(10.0, 400)
    tail0 = decompose_unity(4, grid)[-1].values
    window = np.abs(grid.sites) <= 2.0
    expected = max(
        float(semigroup_values(tail0, t, grid)[window].max())
        for t in (0.5, 1.0))
    assert tail_sup["value"] == pytest.approx(expected, rel=1e-12)
    assert tail_sup["value"] <= report["tail_bound"]


def test_decompose_check_minimal_m(tmp_path):
    cfg = {
        "schema_version": 1,
        "experiment": "decompose-check",
        "grid": {"half_width": 4.0, "n_points": 160},
        "stepper": {"scheme": "splitting_exponential", "dt": 0.01},
        "sigma": {"kind": "linear", "c": 1.0},
        "m_bumps": 1,
        "slab_index": 1,
        "master_seed": 12,
    }
    path = write_config(tmp_path, cfg)
    out = str(tmp_path / "out")
    assert run(path, out) == 0
    report = json.loads(read_bytes(out, "report.json"))
    assert report["m_bumps"] == 1 and report["passed"]


def test_valleys_single_time_reports_without_fit(tmp_path):
    cfg = {
        "schema_version": 1,
        "experiment": "valleys",
        "grid": {"half_width": 10.0, "n_points": 200},
        "stepper": {"scheme": "splitting_exponential", "dt": 0.01},
        "sigma": {"kind": "linear", "c": 1.0},
        "ic": {"kind": "constant_one"},
        "times": [1.0],
        "n_replicas": 20,
        "master_seed": 4,
    }
    path = write_config(tmp_path, cfg)
    out = str(tmp_path / "out")
    assert run(path, out) == 0
    report = json.loads(read_bytes(out, "report.json"))
    assert report["fits"] == {}
    assert len(report["per_time"]) == 1


def test_short_time_run(tmp_path):
    cfg = {
        "schema_version": 1,
        "experiment": "short-time",
        "grid": {"half_width": 8.0, "n_points": 512},
        "sigma": {"kind": "linear", "c": 1.0},
        "n_values": [2.0, 4.0],
        "gamma": 5.0 / 3.0,
        "beta": 6.0,
        "theta": 0.2,
        "n_replicas": 1200,
        "master_seed": 2024,
        "dt_target": 2e-3,
    }
    path = write_config(tmp_path, cfg)
    out = str(tmp_path / "out")
    assert run(path, out) == 0
    rows = np.genfromtxt(os.path.join(out, "short_time.csv"), delimiter=",",
                         names=True)
    assert set(rows.dtype.names) == {"N", "freq_endpoint_peak",
                                     "freq_running_peak",
                                     "freq_mass_excursion"}
    report = json.loads(read_bytes(out, "report.json"))
    assert report["monotone"]["mass_excursion"]


def test_dim_peaks_set_runs(tmp_path):
    cfg = {
        "schema_version": 1,
        "experiment": "dim",
        "set": {
            "kind": "peaks",
            "n_max": 6,
            "grid": {"half_width": 10.0, "n_points": 200},
            "stepper": {"scheme": "splitting_exponential", "dt": 0.01},
            "sigma": {"kind": "linear", "c": 1.0},
            "ic": {"kind": "constant_one"},
            "times": [0.5, 1.0, 2.0],
            "n_replicas": 4,
            "master_seed": 31,
            "beta": 0.05,
            "theta": 1.0,
        },
        "rho_grid": [0.5, 1.0, 1.5, 2.0],
    }
    path = write_config(tmp_path, cfg)
    out = str(tmp_path / "out")
    assert run(path, out) == 0
    report = json.loads(read_bytes(out, "report.json"))
    assert "estimate" in report           # exploratory: reported, no pass/fail
    rows = np.genfromtxt(os.path.join(out, "dim_partial_sums.csv"),
                         delimiter=",", names=True)
    assert len(rows) == 4 * 6


def test_error_messages_name_offending_key(tmp_path, capsys):
    cfg = moments_config()
    del cfg["master_seed"]
    path = write_config(tmp_path, cfg)
    assert run(path, str(tmp_path / "out")) == 1
    assert "master_seed" in capsys.readouterr().out

    cfg = moments_config()
    cfg["grid"]["n_pointz"] = 3
    path = write_config(tmp_path, cfg, name="c2.json")
    assert run(path, str(tmp_path / "out2")) == 1
    assert "n_pointz" in capsys.readouterr().out
