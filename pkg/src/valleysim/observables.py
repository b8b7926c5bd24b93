"""Scalar statistics: valleys, peak/mass ratios, martingale diagnostics,
moments, quadratic-variation bounds, and cube-root scaling fits.

Statistics are pure folds over replica outputs; anything random lives in
the simulation inputs, so every report is reproducible from a manifest.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import ensemble
from .dynamics import SigmaSpec, StepperConfig
from .errors import (
    AggregationError,
    HeavyTailWarning,
    ParameterError,
    PowerWarning,
    UndefinedStatisticError,
)
from .lattice import Field, Grid, l1_norm, sample_initial, sup_norm


@dataclass(frozen=True)
class ValleyParams:
    """Level h0 defining a valley: the set where the solution stays <= h0."""

    h0: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.h0 < 1.0:
            raise ParameterError("h0 must lie in (0, 1)")


@dataclass(frozen=True)
class ValleyMeasurement:
    length: float            # largest lattice ell with max_{|x|<=ell} f <= h0
    saturated: bool          # ell reached the domain half-width
    sup_in_valley: float     # max of f over the reported window


@dataclass(frozen=True)
class ScalingFit:
    slope: float
    intercept: float
    r_squared: float


@dataclass(frozen=True)
class MomentCheckParams:
    """Exponent bookkeeping for the short-time control checks."""

    k: float = 2.0
    gamma: float = 5.0 / 3.0
    beta: float = 6.0
    theta: float = 0.2

    def __post_init__(self):
        if self.k < 2:
            raise ParameterError("moment order k must be >= 2")
        if not 4.0 / 3.0 < self.gamma <= 2.0:
            raise ParameterError("gamma must lie in (4/3, 2]")
        if self.beta < 6.0 / (3.0 * self.gamma - 4.0):
            raise ParameterError("beta must be >= 6/(3*gamma - 4)")
        if not 0.0 < self.theta < 0.25:
            raise ParameterError("theta must lie in (0, 1/4)")


def valley_length(f: Field, p: ValleyParams) -> ValleyMeasurement:
    """Half-length of the symmetric sub-h0 window around the origin.

    Returns the largest lattice multiple ell = m*dx such that every site
    with |x_j| <= ell has f(x_j) <= h0; zero when the origin site itself
    exceeds h0 (sup_in_valley then reports the origin value).  When the
    window exhausts the grid the length is capped at R and flagged
    saturated: the valley may extend past the truncated domain.
    """
    vals = f.values
    grid = f.grid
    j0 = grid.origin_index
    left = np.maximum.accumulate(vals[j0::-1])     # max over [j0-m, j0]
    right = np.maximum.accumulate(vals[j0:])       # max over [j0, j0+m]
    m_sym = min(len(left), len(right))
    window_max = np.maximum(left[:m_sym], right[:m_sym])
    ok = window_max <= p.h0
    if not ok[0]:
        return ValleyMeasurement(0.0, False, float(vals[j0]))
    if ok.all():
        # the symmetric window covers [x_0, x_{n-1}]; include the lone
        # leftmost site (x = -R) to decide saturation at ell = R
        if vals.max() <= p.h0:
            return ValleyMeasurement(grid.half_width, True, float(vals.max()))
        m = m_sym - 1
    else:
        m = int(np.argmin(ok)) - 1
    return ValleyMeasurement(m * grid.dx, False, float(window_max[m]))


def peak_mass_ratio(f: Field) -> float:
    """sup-norm over L1-norm; undefined for zero mass."""
    mass = l1_norm(f)
    if mass == 0.0:
        raise UndefinedStatisticError("peak/mass ratio undefined for zero mass")
    return sup_norm(f) / mass


def fit_cube_root(series) -> ScalingFit:
    """OLS of log(y) against t^(1/3); slope is the fitted decay-rate proxy.

    A constant series fits exactly with slope 0 and r^2 reported as 1.
    """
    arr = np.asarray(series, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2 or arr.shape[0] < 3:
        raise ParameterError("need >= 3 (t, y) points")
    t, y = arr[:, 0], arr[:, 1]
    if np.any(np.diff(t) <= 0):
        raise ParameterError("times must be strictly increasing")
    if np.any(y <= 0):
        raise ParameterError("y values must be positive for a log fit")
    xs = np.cbrt(t)
    ys = np.log(y)
    slope, intercept = np.polyfit(xs, ys, 1)
    resid = ys - (slope * xs + intercept)
    ss_tot = float(np.sum((ys - ys.mean()) ** 2))
    ss_res = float(np.sum(resid ** 2))
    r2 = 1.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    return ScalingFit(float(slope), float(intercept), r2)


# --- martingale diagnostics --------------------------------------------------

@dataclass
class MartingaleReport:
    times: np.ndarray
    mean_mass: np.ndarray
    std_error: np.ndarray
    z_scores: np.ndarray
    reference: float
    z_threshold: float
    passed: bool

    def to_dict(self) -> dict:
        return {
            "statistic": "mass_martingale",
            "reference": self.reference,
            "z_threshold": self.z_threshold,
            "passed": bool(self.passed),
            "times": self.times.tolist(),
            "mean_mass": self.mean_mass.tolist(),
            "std_error": self.std_error.tolist(),
            "z_scores": self.z_scores.tolist(),
        }


def _mass_table(replicas) -> tuple:
    first = replicas[0]
    times = first.series[:, 0]
    masses = np.empty((len(replicas), len(times)))
    for i, traj in enumerate(replicas):
        if traj.series.shape != first.series.shape or not np.array_equal(
                traj.series[:, 0], times):
            raise AggregationError("replica time grids are inconsistent")
        masses[i] = traj.series[:, 1]
    return times, masses


def mass_martingale_test(replicas, initial_mass: float,
                         z_threshold: float = 3.0,
                         times: np.ndarray | None = None,
                         masses: np.ndarray | None = None) -> MartingaleReport:
    """Per-time z-scores of the ensemble mean mass against its t=0 value.

    The total mass is a martingale, so the mean at every recorded time
    must sit within a CLT band around `initial_mass`.  Accepts a list of
    Trajectory replicas, or precomputed (times, masses) arrays with
    masses shaped (n_replicas, n_times).
    """
    if masses is None:
        times, masses = _mass_table(replicas)
    n = masses.shape[0]
    if n < 1000:
        warnings.warn(f"only {n} replicas; martingale check is underpowered",
                      PowerWarning, stacklevel=2)
    mean = masses.mean(axis=0)
    se = masses.std(axis=0, ddof=1) / np.sqrt(n)
    dev = mean - initial_mass
    # per-replica masses are conserved only up to FFT round-off, so a
    # noiseless ensemble shows se and dev at the 1e-16 scale; both count
    # as exactly zero, while a larger dev over a degenerate se is a
    # genuine failure
    tiny = 1e-9 * max(1.0, abs(initial_mass))
    stochastic = se > tiny
    exact = np.abs(dev) <= tiny
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(stochastic, dev / np.where(stochastic, se, 1.0),
                     np.where(exact, 0.0, np.inf * np.sign(dev)))
    passed = bool(np.all(np.abs(z) <= z_threshold))
    return MartingaleReport(times, mean, se, z, initial_mass, z_threshold, passed)


# --- quadratic variation -----------------------------------------------------

@dataclass
class QvReport:
    n_replicas: int
    var_empirical: float
    var_ci_halfwidth: float
    bracket_mean: float
    lower_bound: float
    upper_bound: float
    equality_case: bool
    rel_tolerance: float
    passed: bool

    def to_dict(self) -> dict:
        return {
            "statistic": "qv_bounds",
            "n_replicas": self.n_replicas,
            "var_empirical": self.var_empirical,
            "var_ci_halfwidth": self.var_ci_halfwidth,
            "bracket_mean": self.bracket_mean,
            "lower_bound": self.lower_bound,
            "upper_bound": self.upper_bound,
            "equality_case": self.equality_case,
            "rel_tolerance": self.rel_tolerance,
            "passed": bool(self.passed),
        }


def accumulate_qv(ic, sigma: SigmaSpec, cfg: StepperConfig, grid: Grid,
                  master_seed: int, n_replicas: int, t: float,
                  phi: Field) -> tuple:
    """Per-replica martingale values M_t(phi) and bracket integrals.

    M_t(phi) = sum_steps sum_j phi_j sigma(u)_j dW_j accumulated along
    the discrete path; the bracket is the linear-reference integrand
    sum_steps dt*dx*sum_j phi_j^2 u_j^2 from the same replicas.
    """
    n_steps = int(round(t / cfg.dt))
    if abs(n_steps * cfg.dt - t) > 1e-9 * max(1.0, t):
        raise ParameterError(f"t={t} is not a multiple of dt={cfg.dt}")
    values0 = np.broadcast_to(_ic_values(ic, grid), (n_replicas, grid.n_points))
    rec = ensemble.MartingaleRecorder(phi.values, sigma)
    ensemble.run_ensemble(values0, sigma, cfg, grid, master_seed,
                          range(n_replicas), n_steps, [rec])
    return rec.m, rec.bracket


def qv_bounds_test(m_values: np.ndarray, brackets: np.ndarray,
                   sigma: SigmaSpec, rel_tolerance: float = 0.05) -> QvReport:
    """Check Var[M_t(phi)] against the two-sided coefficient bounds.

    The worthy-measure sandwich bounds the variance between L^2 and Lip^2
    times the bracket; for a linear coefficient the two sides coincide
    and the check is an equality within `rel_tolerance`.
    """
    n = len(m_values)
    if n < 1000:
        warnings.warn(f"only {n} replicas; variance check is underpowered",
                      PowerWarning, stacklevel=2)
    var_hat = float(np.var(m_values, ddof=1))
    # CI of the variance estimate from the fourth moment
    centered = m_values - m_values.mean()
    var_of_var = (np.mean(centered ** 4) - var_hat ** 2) / n
    ci = 1.96 * float(np.sqrt(max(var_of_var, 0.0)))
    bm = float(np.mean(brackets))
    lo = sigma.l_sigma ** 2 * bm
    hi = sigma.lip_sigma ** 2 * bm
    if sigma.is_linear:
        target = sigma.c ** 2 * bm
        passed = (abs(var_hat - target) <= rel_tolerance * target
                  if target > 0 else var_hat == 0.0)
    else:
        passed = lo <= var_hat <= hi
    return QvReport(n, var_hat, ci, bm, lo, hi, sigma.is_linear,
                    rel_tolerance, passed)


# --- Monte Carlo moments -----------------------------------------------------

@dataclass
class MomentEstimate:
    k: float
    t: float
    estimate: float
    ci_halfwidth: float
    n_replicas: int
    excess_kurtosis: float

    def to_dict(self) -> dict:
        return {
            "statistic": "mc_moment",
            "k": self.k,
            "t": self.t,
            "estimate": self.estimate,
            "ci_halfwidth": self.ci_halfwidth,
            "n_replicas": self.n_replicas,
            "excess_kurtosis": self.excess_kurtosis,
        }


def _ic_values(ic, grid: Grid) -> np.ndarray:
    if isinstance(ic, Field):
        return ic.values
    return sample_initial(ic, grid).values


def moment_samples(ic, sigma: SigmaSpec, cfg: StepperConfig, grid: Grid,
                   master_seed: int, n_replicas: int, times, x: float = 0.0,
                   stream_offset: int = 0) -> dict:
    """u(t, x) samples per requested time, one row of replicas each."""
    steps = {float(t): int(round(t / cfg.dt)) for t in times}
    for t, k in steps.items():
        if abs(k * cfg.dt - t) > 1e-9 * max(1.0, t):
            raise ParameterError(f"time {t} is not a multiple of dt={cfg.dt}")
    site = int(round((x + grid.half_width) / grid.dx))
    if not 0 <= site < grid.n_points:
        raise ParameterError(f"x={x} is outside the grid")
    n_steps = max(steps.values())
    rec = ensemble.SiteRecorder(site, steps.values())
    values0 = np.broadcast_to(_ic_values(ic, grid), (n_replicas, grid.n_points))
    ensemble.run_ensemble(values0, sigma, cfg, grid, master_seed,
                          range(stream_offset, stream_offset + n_replicas),
                          n_steps, [rec])
    return {t: rec.samples[k] for t, k in steps.items()}


def mc_moment(ic, sigma: SigmaSpec, cfg: StepperConfig, grid: Grid,
              master_seed: int, k: float, t: float, n_replicas: int,
              x: float = 0.0, kurtosis_threshold: float = 100.0) -> MomentEstimate:
    """Monte Carlo mean of u(t, x)^k with a normal-approximation CI.

    Warns when the sample kurtosis exceeds `kurtosis_threshold`: moments
    of the multiplicative equation grow quickly, and the CI quality
    degrades on such heavy-tailed samples.
    """
    if k < 1:
        raise ParameterError("moment order k must be >= 1")
    if n_replicas < 100:
        raise ParameterError("need at least 100 replicas")
    u = moment_samples(ic, sigma, cfg, grid, master_seed, n_replicas, [t], x)[t]
    p = u ** k
    est = float(p.mean())
    se = float(p.std(ddof=1) / np.sqrt(n_replicas))
    c = p - est
    var = float(np.mean(c ** 2))
    kurt = float(np.mean(c ** 4) / var ** 2 - 3.0) if var > 0 else 0.0
    if kurt > kurtosis_threshold:
        warnings.warn(
            f"excess kurtosis {kurt:.1f} of u(t,x)^{k}; CI may be optimistic",
            HeavyTailWarning, stacklevel=2)
    return MomentEstimate(k, t, est, 1.96 * se, n_replicas, kurt)


# --- short-time control ------------------------------------------------------

@dataclass
class ShortTimeReport:
    params: MomentCheckParams
    n_values: list
    n_replicas: int
    freq_endpoint_peak: list      # ||v(N^-gamma)||_inf >= N
    freq_running_peak: list       # sup_{t<=N^-gamma} ||v||_inf >= 2N
    freq_mass_excursion: list     # inf mass <= 1/2 or sup mass >= 2
    fitted_constants: dict
    monotone: dict
    passed: bool

    def to_dict(self) -> dict:
        return {
            "statistic": "short_time_control",
            "gamma": self.params.gamma,
            "beta": self.params.beta,
            "theta": self.params.theta,
            "n_values": self.n_values,
            "n_replicas": self.n_replicas,
            "freq_endpoint_peak": self.freq_endpoint_peak,
            "freq_running_peak": self.freq_running_peak,
            "freq_mass_excursion": self.freq_mass_excursion,
            "fitted_constants": self.fitted_constants,
            "monotone": self.monotone,
            "passed": bool(self.passed),
        }


def short_time_control_check(params: MomentCheckParams, n_values,
                             n_replicas: int, sigma: SigmaSpec, grid: Grid,
                             master_seed: int, dt_target: float = 1e-3,
                             n_min_steps: int = 8) -> ShortTimeReport:
    """Frequencies of short-time peak and mass excursions across N.

    Initial data is the hat of height N and half-support 1/N (unit mass,
    sup exactly N).  Each N runs to the horizon N^-gamma; the events are
    one-sided exponential-tail bounds in the theory, so the check fits
    the constants and requires the frequencies to be nonincreasing in N.
    """
    if n_replicas < 1000:
        warnings.warn(f"only {n_replicas} replicas; short-time frequencies "
                      "are underpowered", PowerWarning, stacklevel=2)
    n_values = sorted(float(N) for N in n_values)
    freq_end, freq_run, freq_mass = [], [], []
    for N in n_values:
        if N < 1:
            raise ParameterError("N must be >= 1")
        horizon = N ** (-params.gamma)
        n_steps = max(n_min_steps, int(round(horizon / dt_target)))
        dt = horizon / n_steps
        cfg_n = StepperConfig(scheme="splitting_exponential" if sigma.is_linear
                              else "semi_implicit", dt=dt)
        x = grid.sites
        hat = np.maximum(0.0, 1.0 - np.abs(x) * N) * N
        mass = grid.dx * hat.sum()
        if mass <= 0:
            raise ParameterError(f"grid too coarse to resolve hat of width 1/{N}")
        hat = hat / mass                     # normalize ||v0||_1 = 1 exactly
        values0 = np.broadcast_to(hat, (n_replicas, grid.n_points))
        rec = ensemble.SeriesRecorder(n_steps)
        ensemble.run_ensemble(values0, sigma, cfg_n, grid, master_seed,
                              range(n_replicas), n_steps, [rec])
        sup_max = rec.sup.max(axis=1)
        sup_end = rec.sup[:, -1]
        mass_lo = rec.l1.min(axis=1)
        mass_hi = rec.l1.max(axis=1)
        freq_end.append(float(np.mean(sup_end >= N)))
        freq_run.append(float(np.mean(sup_max >= 2.0 * N)))
        freq_mass.append(float(np.mean((mass_lo <= 0.5) | (mass_hi >= 2.0))))

    Ns = np.asarray(n_values)
    e_half = np.exp(Ns ** ((3.0 * params.gamma - 4.0) / 2.0))
    e_third = np.exp(Ns ** ((3.0 * params.gamma - 4.0) / 3.0))
    fitted = {
        "endpoint_peak": float(np.max(np.asarray(freq_end) * e_half)),
        "running_peak": float(np.max(np.asarray(freq_run) * e_half)),
        "mass_excursion": float(np.max(np.asarray(freq_mass) * e_third)),
    }
    monotone = {
        "endpoint_peak": bool(np.all(np.diff(freq_end) <= 0)),
        "running_peak": bool(np.all(np.diff(freq_run) <= 0)),
        "mass_excursion": bool(np.all(np.diff(freq_mass) <= 0)),
    }
    passed = all(monotone.values())
    return ShortTimeReport(params, list(n_values), n_replicas, freq_end,
                           freq_run, freq_mass, fitted, monotone, passed)
