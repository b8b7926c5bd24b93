"""Time stepping for the stochastic heat equation and its linearized twin.

The equation is  du = (1/2) u_xx dt + sigma(u) dW  with space-time white
noise discretized as cell increments dW_j ~ N(0, dt*dx) forcing each site
as sigma(u_j) * dW_j / dx.  Two schemes:

* ``semi_implicit``: backward-Euler diffusion, explicit noise; solves
  (I - (dt/2) Lap_h) u' = u + sigma(u) dW/dx spectrally.  Unconditionally
  stable; may produce small negatives, handled by the negativity policy.
* ``splitting_exponential`` (linear sigma(u) = c*u only): exact per-site
  geometric update u * exp(c dW/dx - c^2 dt/(2 dx)) followed by the exact
  discrete heat semigroup.  Strictly positivity- and mean-preserving.

The companion update ``step_tilde`` advances the linear equation driven by
the modulated noise (sigma(u)/u) * dW on the same slices; it is linear in
v, which is what makes superposing solutions from a partitioned initial
profile exact at the discrete level.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np
import scipy.fft

from .errors import (
    AbortedRunError,
    ConfigurationError,
    CouplingError,
    ParameterError,
    UnsupportedSchemeError,
)
from .lattice import DIRICHLET, PERIODIC, Field, Grid, InitialCondition, sample_initial
from .noise import NoiseSlice, SeedSpec, sample_slice

SEMI_IMPLICIT = "semi_implicit"
SPLITTING = "splitting_exponential"
_SCHEMES = (SEMI_IMPLICIT, SPLITTING)

CLIP_TO_ZERO = "clip_to_zero"
ALLOW_NEGATIVE = "allow"
_POLICIES = (CLIP_TO_ZERO, ALLOW_NEGATIVE)

#: test amplitudes for validating declared bounds of a custom coefficient
_SIGMA_PROBE = np.concatenate([
    -np.logspace(-3, 3, 13), np.logspace(-3, 3, 13)
])


def heat_kernel(t: float, x) -> np.ndarray | float:
    """Fundamental solution (2 pi t)^(-1/2) exp(-x^2 / (2t)), t > 0."""
    if t <= 0:
        raise ParameterError("heat_kernel requires t > 0")
    x = np.asarray(x, dtype=np.float64)
    out = np.exp(-x * x / (2.0 * t)) / np.sqrt(2.0 * np.pi * t)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class SigmaSpec:
    """Multiplicative coefficient sigma with its declared bounds.

    ``linear(c)``: sigma(u) = c*u, bounds |c| exactly.  ``custom`` takes a
    vectorized callable with declared L and Lip constants; the declared
    sandwich L|a| <= |sigma(a)| <= Lip|a| is spot-checked on a probe set
    at construction.
    """

    kind: str
    c: float = 0.0
    fn: Callable | None = None
    l_sigma: float = 0.0
    lip_sigma: float = 0.0

    @classmethod
    def linear(cls, c: float) -> "SigmaSpec":
        return cls(kind="linear", c=float(c), l_sigma=abs(c), lip_sigma=abs(c))

    @classmethod
    def custom(cls, fn: Callable, l_sigma: float, lip_sigma: float) -> "SigmaSpec":
        if not 0 < l_sigma <= lip_sigma:
            raise ParameterError("need 0 < L_sigma <= Lip_sigma")
        spec = cls(kind="custom", fn=fn, l_sigma=float(l_sigma),
                   lip_sigma=float(lip_sigma))
        if abs(float(fn(np.zeros(1))[0])) > 0.0:
            raise ParameterError("sigma(0) must equal 0")
        a = _SIGMA_PROBE
        s = np.abs(np.asarray(fn(a), dtype=np.float64))
        slack = 1.0 + 1e-9
        if np.any(s > lip_sigma * np.abs(a) * slack):
            raise ParameterError("sigma exceeds declared Lip_sigma on probe set")
        if np.any(s * slack < l_sigma * np.abs(a)):
            raise ParameterError("sigma falls below declared L_sigma on probe set")
        return spec

    @property
    def is_linear(self) -> bool:
        return self.kind == "linear"

    def apply(self, u: np.ndarray) -> np.ndarray:
        return self.c * u if self.is_linear else np.asarray(self.fn(u))

    def ratio(self, u: np.ndarray, eps: float):
        """sigma(u)/u with the floor rule; scalar c for the linear kind.

        Where |u| < eps the ratio is evaluated at sign(u)*eps, and at
        u == 0 exactly it is Lip_sigma; the true ratio always lies in
        [L_sigma, Lip_sigma] in magnitude, so the floor never leaves
        that interval materially.
        """
        if self.is_linear:
            return self.c
        safe = np.where(np.abs(u) >= eps, u, np.where(u < 0, -eps, eps))
        r = np.asarray(self.fn(safe)) / safe
        return np.where(u == 0.0, self.lip_sigma, r)

    def describe(self) -> str:
        if self.is_linear:
            return f"linear(c={self.c})"
        return f"custom(L={self.l_sigma}, Lip={self.lip_sigma})"


@dataclass(frozen=True)
class StepperConfig:
    scheme: str
    dt: float
    negativity_policy: str = CLIP_TO_ZERO
    ratio_floor: float = 1e-30

    def __post_init__(self):
        if self.scheme not in _SCHEMES:
            raise ParameterError(f"unknown scheme {self.scheme!r}")
        if self.dt <= 0:
            raise ParameterError("dt must be positive")
        if self.negativity_policy not in _POLICIES:
            raise ParameterError(
                f"unknown negativity_policy {self.negativity_policy!r}")
        if self.ratio_floor <= 0:
            raise ParameterError("ratio_floor must be positive")

    def stability_advisory_ok(self, grid: Grid) -> bool:
        """Noise-accuracy advisory dt <= dx^2 (recorded, not enforced)."""
        return self.dt <= grid.dx ** 2


@dataclass
class Trajectory:
    """Snapshots plus per-step scalar series of one simulated path."""

    grid: Grid
    seed: SeedSpec
    times: np.ndarray                  # snapshot times, as snapped
    snapshots: list                    # Field per snapshot time
    series: np.ndarray                 # rows (t, l1, sup, clip_count)
    scheme: str = ""
    sigma: str = ""

    SERIES_COLUMNS = ("t", "l1", "sup", "clip_count")


# --- spectral kernels --------------------------------------------------------

@lru_cache(maxsize=256)
def _eigenvalues(n: int, dx: float, boundary: str) -> np.ndarray:
    """Eigenvalues of -(1/2)*Lap_h for the given boundary."""
    if boundary == PERIODIC:
        theta = 2.0 * np.pi * np.arange(n // 2 + 1) / n
    else:
        theta = np.pi * (np.arange(n) + 1.0) / (n + 1.0)
    lam = (1.0 - np.cos(theta)) / dx ** 2
    lam.setflags(write=False)
    return lam


@lru_cache(maxsize=256)
def _semigroup_multiplier(n: int, dx: float, boundary: str, t: float) -> np.ndarray:
    mult = np.exp(-_eigenvalues(n, dx, boundary) * t)
    mult.setflags(write=False)
    return mult


@lru_cache(maxsize=256)
def _solve_multiplier(n: int, dx: float, boundary: str, dt: float) -> np.ndarray:
    mult = 1.0 / (1.0 + dt * _eigenvalues(n, dx, boundary))
    mult.setflags(write=False)
    return mult


def _apply_multiplier(values: np.ndarray, mult: np.ndarray, boundary: str) -> np.ndarray:
    n = values.shape[-1]
    if boundary == PERIODIC:
        return scipy.fft.irfft(scipy.fft.rfft(values, axis=-1) * mult, n=n, axis=-1)
    coeff = scipy.fft.dst(values, type=1, axis=-1)
    return scipy.fft.idst(coeff * mult, type=1, axis=-1)


def _clamp_nonneg_rows(before: np.ndarray, after: np.ndarray) -> np.ndarray:
    """Clamp rounding negatives where the exact operator preserves sign.

    The discrete heat semigroup has a strictly positive kernel, so rows
    that enter nonnegative leave nonnegative in exact arithmetic; any
    negative output there is FFT round-off (|.| ~ 1e-16 * scale).
    """
    if after.ndim == 1:
        if before.min() >= 0.0:
            np.maximum(after, 0.0, out=after)
        return after
    mask = before.min(axis=-1) >= 0.0
    if mask.any():
        np.maximum(after[mask], 0.0, out=after[mask])
    return after


def semigroup_values(values: np.ndarray, t: float, grid: Grid) -> np.ndarray:
    """Exact discrete heat semigroup on raw (possibly batched) values."""
    if t < 0:
        raise ParameterError("semigroup time must be nonnegative")
    if t == 0:
        return values.copy()
    mult = _semigroup_multiplier(grid.n_points, grid.dx, grid.boundary, t)
    out = _apply_multiplier(values, mult, grid.boundary)
    return _clamp_nonneg_rows(values, out)


def apply_semigroup(f: Field, t: float) -> Field:
    """Heat semigroup S_t: spectral multiplier exp(-lambda_k t).

    Periodic boundary conserves the discrete L1 mass of nonnegative
    fields exactly (zero mode untouched); t = 0 is the identity.
    """
    if t == 0:
        return f
    return Field(f.grid, semigroup_values(f.values, t, f.grid))


# --- single-step updates -----------------------------------------------------

def _check_slice(cfg: StepperConfig, grid: Grid, w: NoiseSlice) -> None:
    if w.grid != grid:
        raise CouplingError("noise slice grid does not match field grid")
    if w.dt != cfg.dt:
        raise CouplingError(f"noise slice dt={w.dt} differs from config dt={cfg.dt}")


def _bare_field(grid: Grid, values: np.ndarray) -> Field:
    # hot-path constructor: skips validation so blow-ups surface through
    # the simulate-level abort check rather than as a type error
    f = object.__new__(Field)
    object.__setattr__(f, "grid", grid)
    values.setflags(write=False)
    object.__setattr__(f, "values", values)
    return f


def advance_values(values: np.ndarray, coeff, sigma_values: np.ndarray | None,
                   cfg: StepperConfig, grid: Grid, dW: np.ndarray):
    """One scheme step on raw values; returns (new_values, clip_count).

    Exactly one of ``coeff`` (multiplicative rate field/scalar; used by the
    splitting scheme and by linearized forcing) and ``sigma_values``
    (pre-evaluated sigma(u); semi-implicit only) drives the noise term.
    Shared by Field-level steps and by the batched ensemble driver so both
    compute the same arithmetic.
    """
    if cfg.scheme == SPLITTING:
        arg = coeff * dW / grid.dx - (coeff * coeff) * (cfg.dt / (2.0 * grid.dx))
        new = semigroup_values(values * np.exp(arg), cfg.dt, grid)
        return new, 0
    if sigma_values is None:
        sigma_values = coeff * values
    rhs = values + sigma_values * dW / grid.dx
    mult = _solve_multiplier(grid.n_points, grid.dx, grid.boundary, cfg.dt)
    new = _apply_multiplier(rhs, mult, grid.boundary)
    clip_count = 0
    if cfg.negativity_policy == CLIP_TO_ZERO:
        neg = new < 0.0
        clip_count = int(np.count_nonzero(neg))
        if clip_count:
            new[neg] = 0.0
    return new, clip_count


def step_with_count(u: Field, sigma: SigmaSpec, cfg: StepperConfig,
                    w: NoiseSlice) -> tuple:
    """As `step`, additionally returning the clipped-site count."""
    _check_slice(cfg, u.grid, w)
    if cfg.scheme == SPLITTING:
        if not sigma.is_linear:
            raise UnsupportedSchemeError(
                "splitting_exponential supports linear sigma only")
        new, clips = advance_values(u.values, sigma.c, None, cfg, u.grid, w.dW)
    else:
        new, clips = advance_values(u.values, None, sigma.apply(u.values),
                                    cfg, u.grid, w.dW)
    return _bare_field(u.grid, new), clips


def step(u: Field, sigma: SigmaSpec, cfg: StepperConfig, w: NoiseSlice) -> Field:
    """Advance the nonlinear equation by one noise slab."""
    return step_with_count(u, sigma, cfg, w)[0]


def step_tilde_with_count(v: Field, u_prev: Field, sigma: SigmaSpec,
                          cfg: StepperConfig, w: NoiseSlice) -> tuple:
    _check_slice(cfg, v.grid, w)
    if u_prev.grid != v.grid:
        raise CouplingError("v and u_prev live on different grids")
    r = sigma.ratio(u_prev.values, cfg.ratio_floor)
    if cfg.scheme == SPLITTING:
        new, clips = advance_values(v.values, r, None, cfg, v.grid, w.dW)
    else:
        new, clips = advance_values(v.values, None, r * v.values, cfg,
                                    v.grid, w.dW)
    return _bare_field(v.grid, new), clips


def step_tilde(v: Field, u_prev: Field, sigma: SigmaSpec, cfg: StepperConfig,
               w: NoiseSlice) -> Field:
    """Advance the linear companion equation on the slice that advanced u.

    The multiplicative rate is sigma(u_prev)/u_prev evaluated with the
    floor rule, applied as a linear-coefficient step; the update is linear
    in v, and for linear sigma it reproduces `step` exactly.
    """
    return step_tilde_with_count(v, u_prev, sigma, cfg, w)[0]


# --- partition of unity ------------------------------------------------------

def decompose_unity(M: int, grid: Grid) -> list:
    """Split the flat profile 1 into 2M unit hats plus a far-field tail.

    Hats sit at integer centers i = -M .. M-1 with supports [i-1, i+1];
    the tail is the exact complement 1 - sum(hats): zero on [-M, M-1],
    ramping to 1 at x = M on the right and x = -M-1 on the left (the hat
    family is one center short of symmetric, as indexed).
    """
    if M < 1:
        raise ParameterError("M must be a positive integer")
    if grid.half_width < M + 1:
        raise ConfigurationError(
            f"grid half-width {grid.half_width} does not cover [-{M + 1}, {M + 1}]")
    x = grid.sites
    parts = [Field(grid, np.maximum(0.0, 1.0 - np.abs(x - i)))
             for i in range(-M, M)]
    tail = np.clip(np.maximum(x - (M - 1.0), -x - M), 0.0, 1.0)
    parts.append(Field(grid, tail))
    return parts


# --- trajectories ------------------------------------------------------------

def _snap_times(times: Sequence[float], dt: float, n_steps: int) -> np.ndarray:
    idx = []
    for t in times:
        k = int(round(t / dt))
        if not 0 <= k <= n_steps:
            raise ParameterError(f"snapshot time {t} outside [0, {n_steps * dt}]")
        idx.append(k)
    return np.asarray(idx, dtype=np.int64)


def _as_field(ic, grid: Grid) -> Field:
    if isinstance(ic, Field):
        if ic.grid != grid:
            raise CouplingError("field initial condition on a different grid")
        return ic
    if isinstance(ic, InitialCondition):
        return sample_initial(ic, grid)
    raise ConfigurationError(f"cannot interpret initial condition {ic!r}")


def _series_row(t, values, dx, clips):
    av = np.abs(values)
    return (t, dx * av.sum(), av.max(), clips)


def simulate(ic, sigma: SigmaSpec, cfg: StepperConfig, seed: SeedSpec,
             t_end: float, snapshot_times: Sequence[float] = (),
             grid: Grid | None = None) -> Trajectory:
    """Advance one path to t_end, recording scalar series each step.

    ``ic`` may be an InitialCondition (requires ``grid``) or a Field.
    Snapshot times are snapped to the nearest step boundary and recorded
    as snapped.  Deterministic in ``seed``: slab k draws the slice
    (master_seed, stream_id, k).
    """
    if isinstance(ic, Field):
        grid = ic.grid
    if grid is None:
        raise ConfigurationError("simulate needs a grid when ic is not a Field")
    u = _as_field(ic, grid)
    n_steps = int(round(t_end / cfg.dt))
    if n_steps < 1 or abs(n_steps * cfg.dt - t_end) > 1e-9 * max(1.0, t_end):
        raise ParameterError(f"t_end={t_end} is not a multiple of dt={cfg.dt}")
    snap_idx = _snap_times(snapshot_times, cfg.dt, n_steps)

    snapshots, snap_t = [], []
    series = np.empty((n_steps, 4))
    for pos in np.flatnonzero(snap_idx == 0):
        snapshots.append(u)
        snap_t.append(0.0)
    for k in range(n_steps):
        w = sample_slice(SeedSpec(seed.master_seed, seed.stream_id, k), grid, cfg.dt)
        u, clips = step_with_count(u, sigma, cfg, w)
        t = (k + 1) * cfg.dt
        if not np.all(np.isfinite(u.values)):
            raise AbortedRunError(
                f"non-finite field at t={t}", last_valid_time=k * cfg.dt)
        series[k] = _series_row(t, u.values, grid.dx, clips)
        for pos in np.flatnonzero(snap_idx == k + 1):
            snapshots.append(u)
            snap_t.append(t)
    return Trajectory(grid=grid, seed=seed, times=np.asarray(snap_t),
                      snapshots=snapshots, series=series,
                      scheme=cfg.scheme, sigma=sigma.describe())


def simulate_coupled(ic_list, sigma: SigmaSpec, cfg: StepperConfig,
                     seed: SeedSpec, t_end: float,
                     snapshot_times: Sequence[float] = (),
                     grid: Grid | None = None, u_ic=None) -> tuple:
    """Advance u plus companion v-parts on the identical noise slices.

    The u initial profile is the sum of the parts (checked pointwise to
    1e-12 against ``u_ic`` when that is supplied).  Every slab advances u
    and all parts on the same slice, so the superposition identity
    sum(v_parts) = u holds at the discrete-update level throughout.
    """
    if not ic_list:
        raise ConfigurationError("ic_list must contain at least one part")
    if grid is None:
        probe = ic_list[0]
        if not isinstance(probe, Field):
            raise ConfigurationError("simulate_coupled needs a grid or Field parts")
        grid = probe.grid
    parts = [_as_field(ic, grid) for ic in ic_list]
    total = np.sum([p.values for p in parts], axis=0)
    if u_ic is not None:
        u0 = _as_field(u_ic, grid)
        if np.max(np.abs(total - u0.values)) > 1e-12:
            raise CouplingError("sum of parts does not match the u initial condition")
    else:
        u0 = Field(grid, total)

    n_steps = int(round(t_end / cfg.dt))
    if n_steps < 1 or abs(n_steps * cfg.dt - t_end) > 1e-9 * max(1.0, t_end):
        raise ParameterError(f"t_end={t_end} is not a multiple of dt={cfg.dt}")
    snap_idx = _snap_times(snapshot_times, cfg.dt, n_steps)

    u = u0
    vs = list(parts)
    n_parts = len(vs)
    u_series = np.empty((n_steps, 4))
    v_series = [np.empty((n_steps, 4)) for _ in range(n_parts)]
    u_snaps, v_snaps, snap_t = [], [[] for _ in range(n_parts)], []

    def take_snapshot(t):
        snap_t.append(t)
        u_snaps.append(u)
        for i in range(n_parts):
            v_snaps[i].append(vs[i])

    if np.any(snap_idx == 0):
        take_snapshot(0.0)
    for k in range(n_steps):
        w = sample_slice(SeedSpec(seed.master_seed, seed.stream_id, k), grid, cfg.dt)
        u_next, u_clips = step_with_count(u, sigma, cfg, w)
        t = (k + 1) * cfg.dt
        for i in range(n_parts):
            vs[i], clips = step_tilde_with_count(vs[i], u, sigma, cfg, w)
            v_series[i][k] = _series_row(t, vs[i].values, grid.dx, clips)
        u = u_next
        if not np.all(np.isfinite(u.values)):
            raise AbortedRunError(
                f"non-finite field at t={t}", last_valid_time=k * cfg.dt)
        u_series[k] = _series_row(t, u.values, grid.dx, u_clips)
        if np.any(snap_idx == k + 1):
            take_snapshot(t)

    times = np.asarray(snap_t)
    u_traj = Trajectory(grid=grid, seed=seed, times=times, snapshots=u_snaps,
                        series=u_series, scheme=cfg.scheme, sigma=sigma.describe())
    v_trajs = [
        Trajectory(grid=grid, seed=seed, times=times, snapshots=v_snaps[i],
                   series=v_series[i], scheme=cfg.scheme,
                   sigma=f"tilde[{sigma.describe()}]")
        for i in range(n_parts)
    ]
    return u_traj, v_trajs


def mild_decompose(traj: Trajectory, ic) -> np.ndarray:
    """Stochastic-convolution sup:  rows (t, sup_x |u(t) - S_t u0|)."""
    u0 = _as_field(ic, traj.grid)
    out = np.empty((len(traj.times), 2))
    for i, (t, f) in enumerate(zip(traj.times, traj.snapshots)):
        flow = semigroup_values(u0.values, float(t), traj.grid)
        out[i] = (t, np.max(np.abs(f.values - flow)))
    return out
