"""Spatial discretization: grids, fields, norms, initial data.

The continuum domain is the real line; we work on a truncated interval
[-R, R) with a uniform lattice of n_points sites, x_j = -R + j*dx.
Periodic wrap is the default boundary (exact for spectral diffusion and
mass-conserving); Dirichlet-zero is available for tail experiments.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ParameterError

PERIODIC = "periodic"
DIRICHLET = "dirichlet_zero"
_BOUNDARIES = (PERIODIC, DIRICHLET)

_BINARY_MAGIC = b"VSF1"


@dataclass(frozen=True)
class Grid:
    """Uniform lattice on [-R, R) with site spacing dx = 2R/n_points."""

    half_width: float
    n_points: int
    boundary: str = PERIODIC

    def __post_init__(self):
        if self.half_width <= 0:
            raise ParameterError("half_width must be positive")
        if self.n_points < 8 or self.n_points % 2 != 0:
            raise ParameterError("n_points must be an even integer >= 8")
        if self.boundary not in _BOUNDARIES:
            raise ParameterError(f"unknown boundary {self.boundary!r}")

    @property
    def dx(self) -> float:
        return 2.0 * self.half_width / self.n_points

    @property
    def sites(self) -> np.ndarray:
        return -self.half_width + self.dx * np.arange(self.n_points)

    @property
    def origin_index(self) -> int:
        # x = 0 sits exactly at index n/2 because n_points is even
        return self.n_points // 2


@dataclass(frozen=True)
class Field:
    """Real-valued function sampled on a grid.  Values are read-only."""

    grid: Grid
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.shape != (self.grid.n_points,):
            raise ConfigurationError(
                f"field length {values.shape} does not match grid "
                f"n_points={self.grid.n_points}"
            )
        if not np.all(np.isfinite(values)):
            raise ParameterError("field values must all be finite")
        values = values.copy()
        values.setflags(write=False)
        object.__setattr__(self, "values", values)


@dataclass(frozen=True)
class InitialCondition:
    """Initial profile u_0.

    Kinds: ``constant_one`` (flat 1), ``bump`` (piecewise-linear hat),
    ``gaussian`` (heat kernel of width s0), ``tabulated`` (explicit values).
    """

    kind: str
    center: float = 0.0
    half_support: float = 1.0
    s0: float = 1.0
    table: np.ndarray | None = None
    description: str = ""

    @classmethod
    def constant_one(cls) -> "InitialCondition":
        return cls(kind="constant_one", description="u0 = 1")

    @classmethod
    def bump(cls, center: float = 0.0, half_support: float = 1.0) -> "InitialCondition":
        if half_support <= 0:
            raise ParameterError("bump half_support must be positive")
        return cls(
            kind="bump",
            center=center,
            half_support=half_support,
            description=f"hat at {center}, half-support {half_support}",
        )

    @classmethod
    def gaussian(cls, s0: float = 1.0) -> "InitialCondition":
        if s0 <= 0:
            raise ParameterError("gaussian s0 must be positive")
        return cls(kind="gaussian", s0=s0, description=f"heat kernel p_{s0}")

    @classmethod
    def tabulated(cls, values) -> "InitialCondition":
        table = np.asarray(values, dtype=np.float64)
        return cls(kind="tabulated", table=table, description="tabulated values")


def sample_initial(ic: InitialCondition, grid: Grid) -> Field:
    """Evaluate an initial condition pointwise at the grid sites."""
    x = grid.sites
    if ic.kind == "constant_one":
        values = np.ones(grid.n_points)
    elif ic.kind == "bump":
        values = np.maximum(0.0, 1.0 - np.abs(x - ic.center) / ic.half_support)
    elif ic.kind == "gaussian":
        values = np.exp(-x * x / (2.0 * ic.s0)) / np.sqrt(2.0 * np.pi * ic.s0)
    elif ic.kind == "tabulated":
        if ic.table is None or len(ic.table) != grid.n_points:
            got = 0 if ic.table is None else len(ic.table)
            raise ConfigurationError(
                f"tabulated initial condition has {got} values, grid needs "
                f"{grid.n_points}"
            )
        values = ic.table
    else:
        raise ConfigurationError(f"unknown initial condition kind {ic.kind!r}")
    return Field(grid, values)


def l1_norm(f: Field) -> float:
    """Discrete L1 norm: dx * sum_j |f_j| (Riemann sum at grid resolution)."""
    return float(f.grid.dx * np.sum(np.abs(f.values)))


def sup_norm(f: Field) -> float:
    """max_j |f_j|, standing in for the essential supremum."""
    return float(np.max(np.abs(f.values)))


# --- serialization -----------------------------------------------------------

def field_to_csv(f: Field, path) -> None:
    """Write (x, value) rows with a header line."""
    data = np.column_stack([f.grid.sites, f.values])
    np.savetxt(path, data, delimiter=",", header="x,value", comments="",
               fmt="%.17g")


def field_to_binary(f: Field, path) -> None:
    """Compact snapshot: magic, R, n_points, boundary code, float64 LE values."""
    code = _BOUNDARIES.index(f.grid.boundary)
    header = _BINARY_MAGIC + struct.pack(
        "<dqB", f.grid.half_width, f.grid.n_points, code
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(f.values.astype("<f8").tobytes())


def field_from_binary(path) -> Field:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _BINARY_MAGIC:
            raise ConfigurationError(f"{path}: not a field snapshot")
        half_width, n_points, code = struct.unpack("<dqB", fh.read(17))
        raw = fh.read(8 * n_points)
    if code >= len(_BOUNDARIES):
        raise ConfigurationError(f"{path}: bad boundary code {code}")
    grid = Grid(half_width, int(n_points), _BOUNDARIES[code])
    values = np.frombuffer(raw, dtype="<f8")
    return Field(grid, values)
