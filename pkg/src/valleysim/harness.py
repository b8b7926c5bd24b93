"""Experiment orchestration: configs, replica pools, persistence.

A run consumes one JSON config (versioned schema, unknown keys rejected),
writes ``manifest.json``, ``report.json`` and experiment CSVs into the
output directory, and returns a process exit status: 0 on pass, 2 on a
failed statistical check, 1 on configuration or I/O errors.

Replicas are partitioned into fixed-size chunks executed on a process
pool; chunk composition never depends on the worker count and results
are reduced in chunk order, so any run replays byte-identically from its
manifest regardless of parallelism.
"""

from __future__ import annotations

import csv
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import __version__, ensemble, fractal, observables, oracle
from .dynamics import (
    SigmaSpec,
    StepperConfig,
    decompose_unity,
    simulate,
    simulate_coupled,
)
from .errors import ConfigurationError, ValleysimError
from .lattice import Field, Grid, InitialCondition, field_to_binary, field_to_csv
from .noise import RNG_ALGORITHM, SeedSpec
from .observables import (
    MomentCheckParams,
    ValleyParams,
    fit_cube_root,
    qv_bounds_test,
    valley_length,
)

SCHEMA_VERSION = 1
REPLICA_CHUNK = 250

EXPERIMENTS = ("simulate", "moments", "valleys", "mass", "decompose-check",
               "qv", "short-time", "dim", "oracle")


# --- config parsing ----------------------------------------------------------

def _require(cfg: dict, key: str, path: str = ""):
    if key not in cfg:
        raise ConfigurationError(f"missing config key '{path}{key}'")
    return cfg[key]


def _reject_unknown(cfg: dict, allowed, path: str = ""):
    extra = set(cfg) - set(allowed)
    if extra:
        key = sorted(extra)[0]
        raise ConfigurationError(f"unknown config key '{path}{key}'")


def parse_grid(cfg: dict) -> Grid:
    _reject_unknown(cfg, {"half_width", "n_points", "boundary"}, "grid.")
    return Grid(
        half_width=float(_require(cfg, "half_width", "grid.")),
        n_points=int(_require(cfg, "n_points", "grid.")),
        boundary=cfg.get("boundary", "periodic"),
    )


def parse_stepper(cfg: dict) -> StepperConfig:
    _reject_unknown(cfg, {"scheme", "dt", "negativity_policy", "ratio_floor"},
                    "stepper.")
    return StepperConfig(
        scheme=_require(cfg, "scheme", "stepper."),
        dt=float(_require(cfg, "dt", "stepper.")),
        negativity_policy=cfg.get("negativity_policy", "clip_to_zero"),
        ratio_floor=float(cfg.get("ratio_floor", 1e-30)),
    )


def _banded_sigma(l_sigma: float, lip_sigma: float) -> SigmaSpec:
    l, lip = float(l_sigma), float(lip_sigma)

    def fn(u):
        u = np.asarray(u, dtype=np.float64)
        return u * (l + (lip - l) / (1.0 + u * u))

    return SigmaSpec.custom(fn, l, lip)


def parse_sigma(cfg: dict) -> SigmaSpec:
    kind = _require(cfg, "kind", "sigma.")
    if kind == "linear":
        _reject_unknown(cfg, {"kind", "c"}, "sigma.")
        return SigmaSpec.linear(float(_require(cfg, "c", "sigma.")))
    if kind == "banded":
        _reject_unknown(cfg, {"kind", "l_sigma", "lip_sigma"}, "sigma.")
        return _banded_sigma(_require(cfg, "l_sigma", "sigma."),
                             _require(cfg, "lip_sigma", "sigma."))
    raise ConfigurationError(f"unknown config value sigma.kind={kind!r}")


def parse_ic(cfg: dict) -> InitialCondition:
    kind = _require(cfg, "kind", "ic.")
    if kind == "constant_one":
        _reject_unknown(cfg, {"kind"}, "ic.")
        return InitialCondition.constant_one()
    if kind == "bump":
        _reject_unknown(cfg, {"kind", "center", "half_support"}, "ic.")
        return InitialCondition.bump(float(cfg.get("center", 0.0)),
                                     float(cfg.get("half_support", 1.0)))
    if kind == "gaussian":
        _reject_unknown(cfg, {"kind", "s0"}, "ic.")
        return InitialCondition.gaussian(float(cfg.get("s0", 1.0)))
    if kind == "tabulated":
        _reject_unknown(cfg, {"kind", "values"}, "ic.")
        return InitialCondition.tabulated(_require(cfg, "values", "ic."))
    raise ConfigurationError(f"unknown config value ic.kind={kind!r}")


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise ConfigurationError(f"cannot read config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigurationError("config must be a JSON object")
    version = _require(cfg, "schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigurationError(
            f"config schema_version {version} unsupported (expected {SCHEMA_VERSION})")
    return cfg


# --- output helpers ----------------------------------------------------------

def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj)}")


def write_json(path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def write_manifest(out_dir, config: dict, *, n_replicas: int, step_counts,
                   wall_clock_s: float, flags: dict) -> None:
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "code_version": __version__,
        "rng_algorithm": RNG_ALGORITHM,
        "config": config,
        "replica_streams": {
            "rule": "stream_id = replica_index",
            "count": n_replicas,
        },
        "step_counts": step_counts,
        "wall_clock_s": wall_clock_s,
        "flags": flags,
    }
    write_json(os.path.join(out_dir, "manifest.json"), manifest)


def boundary_monitor(grid: Grid, values0: np.ndarray, values_t: np.ndarray) -> dict:
    """Mass fraction in the outer 10% of the domain, against its t=0 level.

    The run is flagged when the ensemble-mean fraction grows by more than
    1% of total mass over its initial level.  The initial level matters
    (translation-invariant data legitimately holds 10% of its mass there),
    and the mean is the right aggregate: intermittent single replicas can
    concentrate anywhere without the truncation being at fault.  The
    worst single-replica fraction is reported alongside as a diagnostic.
    """
    outer = np.abs(grid.sites) >= 0.9 * grid.half_width
    av0, avt = np.abs(values0), np.abs(np.atleast_2d(values_t))
    frac0 = float(av0[..., outer].sum() / max(av0.sum(), 1e-300))
    per_rep = avt[:, outer].sum(axis=-1) / np.maximum(avt.sum(axis=-1), 1e-300)
    return {
        "outer_fraction_initial": frac0,
        "outer_fraction_mean": float(per_rep.mean()),
        "outer_fraction_max": float(per_rep.max()),
        "flagged": bool(per_rep.mean() - frac0 > 0.01),
    }


# --- replica pool ------------------------------------------------------------

@dataclass(frozen=True)
class EnsembleJob:
    """Picklable description of one replica chunk."""

    grid_cfg: dict
    stepper_cfg: dict
    sigma_cfg: dict
    ic_cfg: dict
    master_seed: int
    stream_start: int
    n_streams: int
    n_steps: int
    want_site: int = -1
    site_steps: tuple = ()
    snap_steps: tuple = ()
    want_series: bool = False
    qv_phi: tuple = ()          # (lo, hi) indicator support, or () for none


def _run_job(job: EnsembleJob):
    grid = parse_grid(dict(job.grid_cfg))
    cfg = parse_stepper(dict(job.stepper_cfg))
    sigma = parse_sigma(dict(job.sigma_cfg))
    ic = parse_ic(dict(job.ic_cfg))
    values0 = np.broadcast_to(
        observables._ic_values(ic, grid), (job.n_streams, grid.n_points))
    recs = {}
    if job.want_site >= 0:
        recs["site"] = ensemble.SiteRecorder(job.want_site, job.site_steps)
    if job.snap_steps:
        recs["snap"] = ensemble.SnapshotRecorder(job.snap_steps)
    if job.want_series:
        recs["series"] = ensemble.SeriesRecorder(job.n_steps)
    if job.qv_phi:
        lo, hi = job.qv_phi
        phi = ((grid.sites >= lo) & (grid.sites <= hi)).astype(np.float64)
        recs["qv"] = ensemble.MartingaleRecorder(phi, sigma)
    streams = range(job.stream_start, job.stream_start + job.n_streams)
    values, clips = ensemble.run_ensemble(values0, sigma, cfg, grid,
                                          job.master_seed, streams,
                                          job.n_steps, list(recs.values()))
    out = {"clips": clips, "final": values}
    if "site" in recs:
        out["site"] = recs["site"].samples
    if "snap" in recs:
        out["snap"] = recs["snap"].fields
    if "series" in recs:
        out["series"] = (recs["series"].t, recs["series"].l1, recs["series"].sup)
    if "qv" in recs:
        out["qv"] = (recs["qv"].m, recs["qv"].bracket)
    return out


def run_chunks(job_base: EnsembleJob, n_replicas: int, n_workers: int,
               chunk: int = REPLICA_CHUNK) -> list:
    """Execute replicas in fixed chunks; worker count changes no output."""
    jobs = []
    start = 0
    while start < n_replicas:
        size = min(chunk, n_replicas - start)
        jobs.append(EnsembleJob(**{**job_base.__dict__,
                                   "stream_start": start, "n_streams": size}))
        start += size
    if n_workers <= 1 or len(jobs) == 1:
        return [_run_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n_workers) as pool:
        return list(pool.map(_run_job, jobs))


# --- experiments -------------------------------------------------------------

def _steps_for_times(times, dt: float) -> dict:
    steps = {}
    for t in times:
        k = int(round(t / dt))
        if k < 1 or abs(k * dt - t) > 1e-9 * max(1.0, t):
            raise ConfigurationError(
                f"config key 'times': {t} is not a positive multiple of dt={dt}")
        steps[t] = k
    return steps


def _common(cfg: dict, overrides: dict) -> dict:
    merged = dict(cfg)
    for key in ("master_seed", "n_replicas"):
        if overrides.get(key) is not None:
            merged[key] = overrides[key]
    return merged


def run_moments(cfg: dict, out_dir: str, n_workers: int = 1) -> tuple:
    """Monte Carlo point moments at x=0 against the second-moment oracle."""
    allowed = {"schema_version", "experiment", "grid", "stepper", "sigma", "ic",
               "times", "moment_orders", "n_replicas", "master_seed",
               "oracle_n_steps", "oracle_rel_tolerance"}
    _reject_unknown(cfg, allowed)
    grid = parse_grid(_require(cfg, "grid"))
    stepper = parse_stepper(_require(cfg, "stepper"))
    sigma = parse_sigma(_require(cfg, "sigma"))
    ic = parse_ic(_require(cfg, "ic"))
    times = [float(t) for t in _require(cfg, "times")]
    orders = [int(k) for k in cfg.get("moment_orders", [1, 2])]
    n_replicas = int(_require(cfg, "n_replicas"))
    master_seed = int(_require(cfg, "master_seed"))
    rel_tol = float(cfg.get("oracle_rel_tolerance", 0.05))
    oracle_n = int(cfg.get("oracle_n_steps", 20000))

    steps = _steps_for_times(times, stepper.dt)
    n_steps = max(steps.values())
    t0 = time.perf_counter()
    job = EnsembleJob(grid_cfg=cfg["grid"], stepper_cfg=cfg["stepper"],
                      sigma_cfg=cfg["sigma"], ic_cfg=cfg["ic"],
                      master_seed=master_seed, stream_start=0, n_streams=0,
                      n_steps=n_steps, want_site=grid.origin_index,
                      site_steps=tuple(sorted(set(steps.values()))),
                      snap_steps=(n_steps,))
    results = run_chunks(job, n_replicas, n_workers)
    samples = {t: np.concatenate([r["site"][k] for r in results])
               for t, k in steps.items()}
    clips = int(sum(r["clips"].sum() for r in results))
    finals = np.vstack([r["final"] for r in results])
    ic_vals = observables._ic_values(ic, grid)
    monitor = boundary_monitor(grid, ic_vals, finals)

    # oracle applies to the flat-start linear(|c|=1) case
    has_m2_oracle = (sigma.is_linear and abs(abs(sigma.c) - 1.0) < 1e-12
                     and ic.kind == "constant_one")
    m2 = oracle.volterra_m2(max(times), oracle_n, cache_dir=out_dir) \
        if has_m2_oracle else None

    rows, checks = [], []
    for t in times:
        u = samples[t]
        for k in orders:
            p = u ** k
            est = float(p.mean())
            ci = float(1.96 * p.std(ddof=1) / np.sqrt(len(p)))
            oracle_val = ""
            if k == 1 and ic.kind == "constant_one":
                oracle_val = 1.0
                se = ci / 1.96
                checks.append({
                    "name": f"mean_preservation_t{t}",
                    "value": est, "target": 1.0,
                    "tolerance": 3.0 * se,
                    "passed": bool(abs(est - 1.0) <= 3.0 * se)})
            elif k == 2 and m2 is not None:
                oracle_val = float(m2(t))
                checks.append({
                    "name": f"m2_oracle_t{t}",
                    "value": est, "target": oracle_val,
                    "tolerance": rel_tol * oracle_val,
                    "passed": bool(abs(est - oracle_val) <= rel_tol * oracle_val)})
            rows.append((t, k, est, ci, oracle_val))
    if m2 is not None:
        self_err = abs(m2(max(times)) - oracle.closed_form_m2(max(times)))
        checks.append({"name": "oracle_self_consistency",
                       "value": float(self_err), "target": 0.0,
                       "tolerance": 1e-4, "passed": bool(self_err <= 1e-4)})
    site_steps_total = n_replicas * n_steps * grid.n_points
    clip_rate = clips / site_steps_total
    checks.append({"name": "clip_rate", "value": clip_rate, "target": 0.0,
                   "tolerance": 1e-3, "passed": bool(clip_rate < 1e-3)})

    write_csv(os.path.join(out_dir, "moments.csv"),
              ("t", "k", "estimate", "ci", "oracle_value"), rows)
    passed = all(c["passed"] for c in checks)
    report = {"experiment": "moments", "passed": passed, "checks": checks,
              "n_replicas": n_replicas, "clip_rate": clip_rate,
              "boundary_contamination": monitor,
              "stability_advisory_ok": stepper.stability_advisory_ok(grid)}
    write_json(os.path.join(out_dir, "report.json"), report)
    write_manifest(out_dir, cfg, n_replicas=n_replicas,
                   step_counts={"per_replica": n_steps},
                   wall_clock_s=time.perf_counter() - t0,
                   flags={"boundary_contamination": monitor["flagged"]})
    return report, 0 if passed else 2


def run_mass_decay(cfg: dict, out_dir: str, n_workers: int = 1) -> tuple:
    """Median total-mass decay against the cube-root law."""
    allowed = {"schema_version", "experiment", "grid", "stepper", "sigma", "ic",
               "times", "n_replicas", "master_seed", "r_squared_min"}
    _reject_unknown(cfg, allowed)
    grid = parse_grid(_require(cfg, "grid"))
    stepper = parse_stepper(_require(cfg, "stepper"))
    ic = parse_ic(_require(cfg, "ic"))
    times = [float(t) for t in _require(cfg, "times")]
    n_replicas = int(_require(cfg, "n_replicas"))
    master_seed = int(_require(cfg, "master_seed"))
    r2_min = float(cfg.get("r_squared_min", 0.8))

    steps = _steps_for_times(times, stepper.dt)
    n_steps = max(steps.values())
    t0 = time.perf_counter()
    job = EnsembleJob(grid_cfg=cfg["grid"], stepper_cfg=cfg["stepper"],
                      sigma_cfg=cfg["sigma"], ic_cfg=cfg["ic"],
                      master_seed=master_seed, stream_start=0, n_streams=0,
                      n_steps=n_steps, snap_steps=tuple(sorted(set(steps.values()))))
    results = run_chunks(job, n_replicas, n_workers)
    ic_vals = observables._ic_values(parse_ic(cfg["ic"]), grid)

    rows = []
    medians = []
    for t in times:
        k = steps[t]
        fields = np.vstack([r["snap"][k] for r in results])
        l1 = grid.dx * np.abs(fields).sum(axis=1)
        sup = np.abs(fields).max(axis=1)
        q1, q2, q3 = np.percentile(l1, [25, 50, 75])
        medians.append((t, q2, q1, q3, float(np.median(sup))))
        for rep in range(n_replicas):
            rows.append((t, rep, l1[rep], sup[rep], 0))
    finals = np.vstack([r["final"] for r in results])
    monitor = boundary_monitor(grid, ic_vals, finals)

    fit = fit_cube_root([(t, med) for t, med, *_ in medians])
    checks = [
        {"name": "mass_decay_slope", "value": fit.slope, "target": "< 0",
         "passed": bool(fit.slope < 0)},
        {"name": "mass_decay_r2", "value": fit.r_squared,
         "target": f">= {r2_min}", "passed": bool(fit.r_squared >= r2_min)},
    ]
    write_csv(os.path.join(out_dir, "series.csv"),
              ("t", "replica", "l1", "sup", "clip_count"),
              [(t, rep, l1, sup, c) for (t, rep, l1, sup, c) in rows])
    passed = all(c["passed"] for c in checks)
    report = {"experiment": "mass", "passed": passed, "checks": checks,
              "fit": {"slope": fit.slope, "intercept": fit.intercept,
                      "r_squared": fit.r_squared, "abscissa": "t^(1/3)",
                      "ordinate": "log median ||v||_L1"},
              "medians": [{"t": t, "median_l1": m, "q1_l1": q1, "q3_l1": q3,
                           "median_sup": ms}
                          for t, m, q1, q3, ms in medians],
              "n_replicas": n_replicas,
              "boundary_contamination": monitor,
              "stability_advisory_ok": stepper.stability_advisory_ok(grid)}
    write_json(os.path.join(out_dir, "report.json"), report)
    write_manifest(out_dir, cfg, n_replicas=n_replicas,
                   step_counts={"per_replica": n_steps},
                   wall_clock_s=time.perf_counter() - t0,
                   flags={"boundary_contamination": monitor["flagged"]})
    return report, 0 if passed else 2


def run_valley_growth(cfg: dict, out_dir: str, n_workers: int = 1) -> tuple:
    """Valley length and sup-over-valley growth statistics."""
    allowed = {"schema_version", "experiment", "grid", "stepper", "sigma", "ic",
               "times", "n_replicas", "master_seed", "h0",
               "max_saturation_fraction"}
    _reject_unknown(cfg, allowed)
    grid = parse_grid(_require(cfg, "grid"))
    stepper = parse_stepper(_require(cfg, "stepper"))
    ic = parse_ic(_require(cfg, "ic"))
    if ic.kind != "constant_one":
        raise ConfigurationError("valley growth requires ic.kind=constant_one")
    times = [float(t) for t in _require(cfg, "times")]
    n_replicas = int(_require(cfg, "n_replicas"))
    master_seed = int(_require(cfg, "master_seed"))
    vp = ValleyParams(float(cfg.get("h0", 0.5)))
    max_sat = float(cfg.get("max_saturation_fraction", 0.10))

    steps = _steps_for_times(times, stepper.dt)
    n_steps = max(steps.values())
    t0 = time.perf_counter()
    job = EnsembleJob(grid_cfg=cfg["grid"], stepper_cfg=cfg["stepper"],
                      sigma_cfg=cfg["sigma"], ic_cfg=cfg["ic"],
                      master_seed=master_seed, stream_start=0, n_streams=0,
                      n_steps=n_steps, snap_steps=tuple(sorted(set(steps.values()))))
    results = run_chunks(job, n_replicas, n_workers)

    rows, per_time = [], []
    saturated_total = 0
    for t in times:
        k = steps[t]
        fields = np.vstack([r["snap"][k] for r in results])
        lengths, sups, sats = [], [], []
        for rep in range(n_replicas):
            v = valley_length(Field(grid, fields[rep]), vp)
            lengths.append(v.length)
            sups.append(v.sup_in_valley)
            sats.append(v.saturated)
            rows.append((t, rep, v.length, v.sup_in_valley, v.saturated))
        saturated_total += sum(sats)
        q1, q2, q3 = np.percentile(lengths, [25, 50, 75])
        per_time.append({"t": t, "median_length": float(q2),
                         "q1_length": float(q1), "q3_length": float(q3),
                         "median_sup_in_valley": float(np.median(sups)),
                         "saturation_fraction": float(np.mean(sats))})
    write_csv(os.path.join(out_dir, "valleys.csv"),
              ("t", "replica", "valley_len", "sup_over_valley", "saturated"),
              rows)

    sat_frac = saturated_total / (n_replicas * len(times))
    checks = [{"name": "saturation_fraction", "value": sat_frac,
               "target": f"< {max_sat}", "passed": bool(sat_frac < max_sat)}]
    med_lengths = [p["median_length"] for p in per_time]
    if len(times) >= 2:
        nondec = bool(np.all(np.diff(med_lengths) >= 0))
        checks.append({"name": "median_length_nondecreasing",
                       "value": med_lengths, "passed": nondec})
    fits = {}
    if len(times) >= 3:
        sup_series = [(p["t"], p["median_sup_in_valley"]) for p in per_time
                      if p["median_sup_in_valley"] > 0]
        if len(sup_series) >= 3:
            fit = fit_cube_root(sup_series)
            fits["sup_in_valley"] = {
                "slope": fit.slope, "intercept": fit.intercept,
                "r_squared": fit.r_squared, "abscissa": "t^(1/3)",
                "ordinate": "log median sup-over-valley"}
            checks.append({"name": "sup_in_valley_slope", "value": fit.slope,
                           "target": "< 0", "passed": bool(fit.slope < 0)})
        len_series = [(p["t"], p["median_length"]) for p in per_time
                      if p["median_length"] > 0]
        if len(len_series) >= 3:
            fit = fit_cube_root(len_series)
            fits["valley_length"] = {
                "slope": fit.slope, "intercept": fit.intercept,
                "r_squared": fit.r_squared, "abscissa": "t^(1/3)",
                "ordinate": "log median valley length"}
    passed = all(c["passed"] for c in checks)
    report = {"experiment": "valleys", "passed": passed, "checks": checks,
              "h0": vp.h0, "per_time": per_time, "fits": fits,
              "n_replicas": n_replicas,
              "stability_advisory_ok": stepper.stability_advisory_ok(grid)}
    write_json(os.path.join(out_dir, "report.json"), report)
    write_manifest(out_dir, cfg, n_replicas=n_replicas,
                   step_counts={"per_replica": n_steps},
                   wall_clock_s=time.perf_counter() - t0,
                   flags={"saturation_exceeded": sat_frac >= max_sat})
    return report, 0 if passed else 2


def run_decompose_check(cfg: dict, out_dir: str, n_workers: int = 1) -> tuple:
    """Superposition residual and far-field tail control for the bump split."""
    allowed = {"schema_version", "experiment", "grid", "stepper", "sigma",
               "m_bumps", "slab_index", "n_replicas", "master_seed",
               "residual_tolerance"}
    _reject_unknown(cfg, allowed)
    grid = parse_grid(_require(cfg, "grid"))
    stepper = parse_stepper(_require(cfg, "stepper"))
    sigma = parse_sigma(_require(cfg, "sigma"))
    M = int(_require(cfg, "m_bumps"))
    n_slab = int(cfg.get("slab_index", 1))
    n_replicas = int(cfg.get("n_replicas", 1))
    master_seed = int(_require(cfg, "master_seed"))
    res_tol = float(cfg.get("residual_tolerance", 1e-10))
    if grid.half_width < 2 * M:
        raise ConfigurationError(
            f"grid.half_width must cover [-2*m_bumps, 2*m_bumps] = [-{2*M}, {2*M}]")

    L = M / 2.0
    tail_bound = 2.0 * np.exp(-L / (4.0 * n_slab))
    snap_times = [n_slab - 0.5, float(n_slab)] if n_slab >= 1 else [float(n_slab)]
    if n_slab - 1 > 0:
        snap_times.insert(0, float(n_slab - 1))
    window = np.abs(grid.sites) <= L

    t0 = time.perf_counter()
    residual_max = 0.0
    tail_sup = 0.0
    parts0 = decompose_unity(M, grid)
    u0 = InitialCondition.constant_one()
    for rep in range(n_replicas):
        u_traj, v_trajs = simulate_coupled(
            parts0, sigma, stepper, SeedSpec(master_seed, rep, 0),
            float(n_slab), snapshot_times=snap_times, u_ic=u0, grid=grid)
        for i, t in enumerate(u_traj.times):
            total = np.sum([v.snapshots[i].values for v in v_trajs], axis=0)
            u_vals = u_traj.snapshots[i].values
            scale = max(float(np.max(np.abs(u_vals))), 1e-300)
            residual_max = max(residual_max,
                               float(np.max(np.abs(total - u_vals))) / scale)
            if float(t) >= n_slab - 1:
                tail_sup = max(tail_sup,
                               float(v_trajs[-1].snapshots[i].values[window].max()))
    checks = [
        {"name": "superposition_residual", "value": residual_max,
         "target": f"<= {res_tol}", "passed": bool(residual_max <= res_tol)},
        {"name": "tail_sup_within_bound", "value": tail_sup,
         "target": f"<= {tail_bound}", "passed": bool(tail_sup <= tail_bound)},
    ]
    passed = all(c["passed"] for c in checks)
    report = {"experiment": "decompose-check", "passed": passed,
              "checks": checks, "m_bumps": M, "window_half_width": L,
              "slab_index": n_slab, "tail_bound": float(tail_bound),
              "n_replicas": n_replicas, "sigma": sigma.describe()}
    write_json(os.path.join(out_dir, "report.json"), report)
    write_manifest(out_dir, cfg, n_replicas=n_replicas,
                   step_counts={"per_replica": int(round(n_slab / stepper.dt))},
                   wall_clock_s=time.perf_counter() - t0, flags={})
    return report, 0 if passed else 2


def run_qv_check(cfg: dict, out_dir: str, n_workers: int = 1) -> tuple:
    """Empirical martingale variance against the worthy-measure bounds."""
    allowed = {"schema_version", "experiment", "grid", "stepper", "sigma", "ic",
               "t_end", "phi", "n_replicas", "master_seed", "rel_tolerance"}
    _reject_unknown(cfg, allowed)
    grid = parse_grid(_require(cfg, "grid"))
    stepper = parse_stepper(_require(cfg, "stepper"))
    sigma = parse_sigma(_require(cfg, "sigma"))
    t_end = float(_require(cfg, "t_end"))
    phi_cfg = _require(cfg, "phi")
    _reject_unknown(phi_cfg, {"kind", "lo", "hi"}, "phi.")
    if _require(phi_cfg, "kind", "phi.") != "indicator":
        raise ConfigurationError("unknown config value phi.kind (use 'indicator')")
    lo, hi = float(_require(phi_cfg, "lo", "phi.")), float(_require(phi_cfg, "hi", "phi."))
    n_replicas = int(_require(cfg, "n_replicas"))
    master_seed = int(_require(cfg, "master_seed"))
    rel_tol = float(cfg.get("rel_tolerance", 0.05))

    n_steps = int(round(t_end / stepper.dt))
    t0 = time.perf_counter()
    job = EnsembleJob(grid_cfg=cfg["grid"], stepper_cfg=cfg["stepper"],
                      sigma_cfg=cfg["sigma"], ic_cfg=cfg["ic"],
                      master_seed=master_seed, stream_start=0, n_streams=0,
                      n_steps=n_steps, qv_phi=(lo, hi))
    results = run_chunks(job, n_replicas, n_workers)
    m = np.concatenate([r["qv"][0] for r in results])
    bracket = np.concatenate([r["qv"][1] for r in results])
    qv_report = qv_bounds_test(m, bracket, sigma, rel_tolerance=rel_tol)
    report = {"experiment": "qv", "passed": qv_report.passed,
              "qv": qv_report.to_dict(), "t_end": t_end,
              "phi": {"kind": "indicator", "lo": lo, "hi": hi},
              "sigma": sigma.describe()}
    write_json(os.path.join(out_dir, "report.json"), report)
    write_manifest(out_dir, cfg, n_replicas=n_replicas,
                   step_counts={"per_replica": n_steps},
                   wall_clock_s=time.perf_counter() - t0, flags={})
    return report, 0 if qv_report.passed else 2


def run_short_time(cfg: dict, out_dir: str, n_workers: int = 1) -> tuple:
    """Short-time peak and mass excursion frequencies across N."""
    allowed = {"schema_version", "experiment", "grid", "sigma", "n_values",
               "gamma", "beta", "theta", "n_replicas", "master_seed",
               "dt_target"}
    _reject_unknown(cfg, allowed)
    grid = parse_grid(_require(cfg, "grid"))
    sigma = parse_sigma(_require(cfg, "sigma"))
    params = MomentCheckParams(
        gamma=float(cfg.get("gamma", 5.0 / 3.0)),
        beta=float(cfg.get("beta", 6.0)),
        theta=float(cfg.get("theta", 0.2)))
    n_values = [float(N) for N in _require(cfg, "n_values")]
    n_replicas = int(_require(cfg, "n_replicas"))
    master_seed = int(_require(cfg, "master_seed"))
    dt_target = float(cfg.get("dt_target", 1e-3))

    t0 = time.perf_counter()
    rep = observables.short_time_control_check(
        params, n_values, n_replicas, sigma, grid, master_seed,
        dt_target=dt_target)
    rows = [(N, rep.freq_endpoint_peak[i], rep.freq_running_peak[i],
             rep.freq_mass_excursion[i]) for i, N in enumerate(rep.n_values)]
    write_csv(os.path.join(out_dir, "short_time.csv"),
              ("N", "freq_endpoint_peak", "freq_running_peak",
               "freq_mass_excursion"), rows)
    report = {"experiment": "short-time", "passed": rep.passed,
              **rep.to_dict()}
    write_json(os.path.join(out_dir, "report.json"), report)
    write_manifest(out_dir, cfg, n_replicas=n_replicas, step_counts={},
                   wall_clock_s=time.perf_counter() - t0, flags={})
    return report, 0 if rep.passed else 2


def _build_shell_set(cfg: dict) -> fractal.ShellSet:
    kind = _require(cfg, "kind", "set.")
    n_max = int(cfg.get("n_max", 12))
    if kind == "unit_lattice":
        _reject_unknown(cfg, {"kind", "n_max"}, "set.")
        pts = np.arange(1.0, np.floor(np.exp(n_max)) + 1.0)
        return fractal.ShellSet.from_points(pts, n_max=n_max)
    if kind == "one_per_shell":
        _reject_unknown(cfg, {"kind", "n_max"}, "set.")
        pts = np.exp(np.arange(0, n_max + 1, dtype=np.float64))
        return fractal.ShellSet.from_points(pts, n_max=n_max)
    if kind == "finite":
        _reject_unknown(cfg, {"kind", "n_max", "points"}, "set.")
        return fractal.ShellSet.from_points(
            np.asarray(_require(cfg, "points", "set."), dtype=np.float64),
            n_max=n_max)
    if kind == "csv":
        _reject_unknown(cfg, {"kind", "n_max", "path", "dim"}, "set.")
        return fractal.ShellSet.from_csv(_require(cfg, "path", "set."),
                                         dim=int(cfg.get("dim", 1)),
                                         n_max=n_max)
    if kind == "peaks":
        _reject_unknown(cfg, {"kind", "n_max", "grid", "stepper", "sigma",
                              "ic", "times", "n_replicas", "master_seed",
                              "beta", "theta"}, "set.")
        grid = parse_grid(_require(cfg, "grid", "set."))
        stepper = parse_stepper(_require(cfg, "stepper", "set."))
        sigma = parse_sigma(_require(cfg, "sigma", "set."))
        ic = parse_ic(_require(cfg, "ic", "set."))
        times = [float(t) for t in _require(cfg, "times", "set.")]
        seed = int(_require(cfg, "master_seed", "set."))
        rule = fractal.PeakRule(beta=float(_require(cfg, "beta", "set.")),
                                theta=float(_require(cfg, "theta", "set.")))
        trajs = [simulate(ic, sigma, stepper, SeedSpec(seed, rep, 0),
                          max(times), snapshot_times=times, grid=grid)
                 for rep in range(int(cfg.get("n_replicas", 1)))]
        return fractal.peak_set_extract(trajs, rule, n_max=n_max)
    raise ConfigurationError(f"unknown config value set.kind={kind!r}")


def run_dim(cfg: dict, out_dir: str, n_workers: int = 1) -> tuple:
    """Macroscopic-dimension estimation with full partial-sum tables."""
    allowed = {"schema_version", "experiment", "set", "rho_grid", "tau_sat",
               "expect"}
    _reject_unknown(cfg, allowed)
    E = _build_shell_set(_require(cfg, "set"))
    rho_grid = [float(r) for r in _require(cfg, "rho_grid")]
    tau_sat = float(cfg.get("tau_sat", 1e-2))
    t0 = time.perf_counter()
    est = fractal.dim_estimate(E, rho_grid, tau_sat=tau_sat)
    rows = [(r.rho, int(n), nu, ps)
            for r in est.reports
            for n, nu, ps in zip(r.shells, r.nu_values, r.partial_sums)]
    write_csv(os.path.join(out_dir, "dim_partial_sums.csv"),
              ("rho", "n", "nu", "partial_sum"), rows)
    checks = []
    if "expect" in cfg:
        exp = cfg["expect"]
        _reject_unknown(exp, {"value", "tol"}, "expect.")
        target = float(_require(exp, "value", "expect."))
        tol = float(_require(exp, "tol", "expect."))
        ok = bool(est.converged and abs(est.estimate - target) <= tol)
        checks.append({"name": "dim_estimate", "value": est.estimate,
                       "target": target, "tolerance": tol, "passed": ok})
    passed = all(c["passed"] for c in checks)
    report = {"experiment": "dim", "passed": passed, "checks": checks,
              "estimate": est.estimate, "converged": est.converged,
              "bounded_looking": est.bounded_looking,
              "low_confidence": est.low_confidence, "tau_sat": est.tau_sat}
    write_json(os.path.join(out_dir, "report.json"), report)
    write_manifest(out_dir, cfg, n_replicas=0, step_counts={},
                   wall_clock_s=time.perf_counter() - t0, flags={})
    return report, 0 if passed else 2


def run_oracle(cfg: dict, out_dir: str, n_workers: int = 1) -> tuple:
    """Tabulate the second-moment oracle and cross-check the closed form."""
    allowed = {"schema_version", "experiment", "t_end", "n_steps"}
    _reject_unknown(cfg, allowed)
    t_end = float(cfg.get("t_end", 1.0))
    n_steps = int(cfg.get("n_steps", 20000))
    t0 = time.perf_counter()
    sol = oracle.volterra_m2(t_end, n_steps, cache_dir=out_dir)
    err = float(abs(sol(t_end) - oracle.closed_form_m2(t_end)))
    stride = max(1, n_steps // 1000)
    write_csv(os.path.join(out_dir, "oracle.csv"), ("t", "m2"),
              zip(sol.t_grid[::stride], sol.m2[::stride]))
    passed = err <= 1e-4
    report = {"experiment": "oracle", "passed": passed,
              "checks": [{"name": "oracle_self_consistency", "value": err,
                          "tolerance": 1e-4, "passed": passed}],
              "m2_at_t_end": float(sol(t_end)),
              "closed_form": float(oracle.closed_form_m2(t_end)),
              "t_end": t_end, "n_steps": n_steps, "quadrature": sol.quadrature}
    write_json(os.path.join(out_dir, "report.json"), report)
    write_manifest(out_dir, cfg, n_replicas=0, step_counts={},
                   wall_clock_s=time.perf_counter() - t0, flags={})
    return report, 0 if passed else 2


def run_simulate(cfg: dict, out_dir: str, n_workers: int = 1) -> tuple:
    """Single trajectory with series and snapshot persistence."""
    allowed = {"schema_version", "experiment", "grid", "stepper", "sigma", "ic",
               "t_end", "snapshot_times", "master_seed", "stream_id",
               "snapshot_format"}
    _reject_unknown(cfg, allowed)
    grid = parse_grid(_require(cfg, "grid"))
    stepper = parse_stepper(_require(cfg, "stepper"))
    sigma = parse_sigma(_require(cfg, "sigma"))
    ic = parse_ic(_require(cfg, "ic"))
    t_end = float(_require(cfg, "t_end"))
    snaps = [float(t) for t in cfg.get("snapshot_times", [t_end])]
    master_seed = int(_require(cfg, "master_seed"))
    stream = int(cfg.get("stream_id", 0))
    fmt = cfg.get("snapshot_format", "csv")
    if fmt not in ("csv", "binary"):
        raise ConfigurationError("unknown config value snapshot_format "
                                 f"{fmt!r} (use 'csv' or 'binary')")

    t0 = time.perf_counter()
    traj = simulate(ic, sigma, stepper, SeedSpec(master_seed, stream, 0),
                    t_end, snapshot_times=snaps, grid=grid)
    write_csv(os.path.join(out_dir, "series.csv"),
              ("t", "l1", "sup", "clip_count", "replica"),
              [(t, l1, sup, int(c), stream) for t, l1, sup, c in traj.series])
    fields_dir = os.path.join(out_dir, "fields")
    os.makedirs(fields_dir, exist_ok=True)
    for t, f in zip(traj.times, traj.snapshots):
        stem = os.path.join(fields_dir, f"u_t{float(t):.6f}")
        if fmt == "csv":
            field_to_csv(f, stem + ".csv")
        else:
            field_to_binary(f, stem + ".bin")
    u0 = observables._ic_values(ic, grid)
    monitor = boundary_monitor(grid, u0, traj.snapshots[-1].values)
    report = {"experiment": "simulate", "passed": True, "checks": [],
              "snapped_times": [float(t) for t in traj.times],
              "boundary_contamination": monitor,
              "stability_advisory_ok": stepper.stability_advisory_ok(grid)}
    write_json(os.path.join(out_dir, "report.json"), report)
    write_manifest(out_dir, cfg, n_replicas=1,
                   step_counts={"per_replica": int(round(t_end / stepper.dt))},
                   wall_clock_s=time.perf_counter() - t0,
                   flags={"boundary_contamination": monitor["flagged"]})
    return report, 0


RUNNERS = {
    "simulate": run_simulate,
    "moments": run_moments,
    "valleys": run_valley_growth,
    "mass": run_mass_decay,
    "decompose-check": run_decompose_check,
    "qv": run_qv_check,
    "short-time": run_short_time,
    "dim": run_dim,
    "oracle": run_oracle,
}


def run(config_path, out_dir, *, experiment: str | None = None,
        master_seed: int | None = None, n_replicas: int | None = None,
        n_workers: int = 1) -> int:
    """Load a config, execute its experiment, persist outputs; exit status."""
    try:
        cfg = load_config(config_path)
        kind = cfg.get("experiment", experiment)
        if kind is None:
            raise ConfigurationError("missing config key 'experiment'")
        if experiment is not None and kind != experiment:
            raise ConfigurationError(
                f"config experiment '{kind}' does not match subcommand "
                f"'{experiment}'")
        if kind not in RUNNERS:
            raise ConfigurationError(f"unknown config value experiment={kind!r}")
        cfg = _common(cfg, {"master_seed": master_seed, "n_replicas": n_replicas})
        os.makedirs(out_dir, exist_ok=True)
        _, status = RUNNERS[kind](cfg, out_dir, n_workers=n_workers)
        return status
    except ValleysimError as exc:
        print(f"error: {exc}", flush=True)
        return 1
