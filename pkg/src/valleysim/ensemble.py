"""Vectorized multi-replica execution of the stepping schemes.

Replicas are rows of a (n_replicas, n_points) array advanced in lockstep;
row i draws its slices from stream_ids[i], bit-identical to running that
replica alone through `noise.sample_slice`.  Recorders observe the state
each step.  Worker processes (harness level) split replicas into fixed
contiguous chunks so the thread count never changes any output.
"""

from __future__ import annotations

import numpy as np

from .dynamics import (
    CLIP_TO_ZERO,
    SEMI_IMPLICIT,
    SPLITTING,
    SigmaSpec,
    StepperConfig,
    _apply_multiplier,
    _clamp_nonneg_rows,
    _semigroup_multiplier,
    _solve_multiplier,
)
from .errors import AbortedRunError, UnsupportedSchemeError
from .lattice import Grid
from .noise import SliceSampler


class Recorder:
    """Base hook; subclasses override what they need."""

    def start(self, values: np.ndarray, grid: Grid, cfg: StepperConfig):
        pass

    def before_step(self, k: int, values: np.ndarray, dW: np.ndarray):
        pass

    def after_step(self, k: int, t: float, values: np.ndarray):
        pass


class SeriesRecorder(Recorder):
    """Per-replica (l1, sup, clips) series at every step."""

    def __init__(self, n_steps: int):
        self.n_steps = n_steps

    def start(self, values, grid, cfg):
        B = values.shape[0]
        self.dx = grid.dx
        self.t = cfg.dt * np.arange(1, self.n_steps + 1)
        self.l1 = np.empty((B, self.n_steps))
        self.sup = np.empty((B, self.n_steps))

    def after_step(self, k, t, values):
        av = np.abs(values)
        self.l1[:, k] = self.dx * av.sum(axis=1)
        self.sup[:, k] = av.max(axis=1)


class SnapshotRecorder(Recorder):
    """Full fields at selected step indices."""

    def __init__(self, snap_steps):
        self.snap_steps = sorted(set(int(s) for s in snap_steps))
        self.fields = {}

    def start(self, values, grid, cfg):
        if 0 in self.snap_steps:
            self.fields[0] = values.copy()

    def after_step(self, k, t, values):
        if k + 1 in self.snap_steps:
            self.fields[k + 1] = values.copy()


class SiteRecorder(Recorder):
    """Values at one site at selected step indices (for point moments)."""

    def __init__(self, site: int, snap_steps):
        self.site = site
        self.snap_steps = sorted(set(int(s) for s in snap_steps))
        self.samples = {}

    def start(self, values, grid, cfg):
        if 0 in self.snap_steps:
            self.samples[0] = values[:, self.site].copy()

    def after_step(self, k, t, values):
        if k + 1 in self.snap_steps:
            self.samples[k + 1] = values[:, self.site].copy()


class MartingaleRecorder(Recorder):
    """Accumulates M_t(phi) = sum phi_j sigma(u)_j dW_j and its compensator.

    The compensator integrand is the same-replica estimate
    sum_steps dt*dx*sum_j phi_j^2 u_j^2, the linear-reference bracket that
    the two-sided coefficient bounds multiply.
    """

    def __init__(self, phi: np.ndarray, sigma: SigmaSpec):
        self.phi = phi
        self.sigma = sigma

    def start(self, values, grid, cfg):
        B = values.shape[0]
        self.dt_dx = cfg.dt * grid.dx
        self.m = np.zeros(B)
        self.bracket = np.zeros(B)

    def before_step(self, k, values, dW):
        sig = self.sigma.apply(values)
        self.m += (self.phi * sig * dW).sum(axis=1)
        self.bracket += self.dt_dx * ((self.phi * values) ** 2).sum(axis=1)


def run_ensemble(values0: np.ndarray, sigma: SigmaSpec, cfg: StepperConfig,
                 grid: Grid, master_seed: int, stream_ids, n_steps: int,
                 recorders=(), check_every: int = 32):
    """Advance all replicas n_steps; returns (values, clip_counts).

    Ensembles run the plain equation only; coupled (linearized-companion)
    systems advance at Field level where the per-slab barrier is explicit.
    """
    if cfg.scheme == SPLITTING and not sigma.is_linear:
        raise UnsupportedSchemeError("splitting_exponential supports linear sigma only")

    values = np.array(values0, dtype=np.float64)
    B, n = values.shape
    sampler = SliceSampler(master_seed, stream_ids)
    scale = float(np.sqrt(cfg.dt * grid.dx))
    dW = np.empty((B, n))
    clip_counts = np.zeros(B, dtype=np.int64)
    clip = cfg.scheme == SEMI_IMPLICIT and cfg.negativity_policy == CLIP_TO_ZERO

    if cfg.scheme == SPLITTING:
        mult = _semigroup_multiplier(n, grid.dx, grid.boundary, cfg.dt)
        drift = sigma.c * sigma.c * cfg.dt / (2.0 * grid.dx)
    else:
        mult = _solve_multiplier(n, grid.dx, grid.boundary, cfg.dt)

    for r in recorders:
        r.start(values, grid, cfg)

    for k in range(n_steps):
        sampler.sample_block(k, n, scale, out=dW)
        for r in recorders:
            r.before_step(k, values, dW)
        if cfg.scheme == SPLITTING:
            arg = sigma.c * dW / grid.dx - drift
            np.exp(arg, out=arg)
            values *= arg
            out = _apply_multiplier(values, mult, grid.boundary)
            values = _clamp_nonneg_rows(values, out)
        else:
            rhs = values + sigma.apply(values) * dW / grid.dx
            values = _apply_multiplier(rhs, mult, grid.boundary)
            if clip:
                neg = values < 0.0
                clip_counts += neg.sum(axis=1)
                values[neg] = 0.0
        if (k + 1) % check_every == 0 or k + 1 == n_steps:
            if not np.all(np.isfinite(values)):
                raise AbortedRunError(
                    f"non-finite replica values near t={(k + 1) * cfg.dt}",
                    last_valid_time=k * cfg.dt)
        t = (k + 1) * cfg.dt
        for r in recorders:
            r.after_step(k, t, values)
    return values, clip_counts
