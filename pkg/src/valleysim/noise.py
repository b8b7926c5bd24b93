"""Reproducible discretized space-time white noise.

One time slab of forcing is the vector of cell increments
dW_j ~ iid Normal(0, dt*dx) — the cell average of white noise over a
dt-by-dx cell.  Slices are derived counter-style from the triple
(master_seed, stream_id, step_index): the key of a Philox generator is
hashed from (master_seed, stream_id) and the 256-bit counter block is
selected by step_index, so any slab of any replica can be generated
independently, in any order, on any worker, with bit-identical results.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ParameterError
from .lattice import Grid

#: Recorded in run manifests; the exact derivation contract.
RNG_ALGORITHM = (
    "philox4x64: key=SeedSequence(master_seed, spawn_key=(stream_id,)), "
    "counter=(0,0,step_index,0); gaussians via numpy Generator.standard_normal "
    "(ziggurat)"
)


@dataclass(frozen=True)
class SeedSpec:
    """Pure address of one noise slice: (master seed, replica, time slab)."""

    master_seed: int
    stream_id: int
    step_index: int

    def __post_init__(self):
        for name in ("master_seed", "stream_id", "step_index"):
            v = getattr(self, name)
            if v < 0:
                raise ParameterError(f"{name} must be a nonnegative integer")


@dataclass(frozen=True)
class NoiseSlice:
    grid: Grid
    dt: float
    dW: np.ndarray

    def __post_init__(self):
        if self.dW.shape != (self.grid.n_points,):
            raise ParameterError("noise slice length does not match grid")


@lru_cache(maxsize=65536)
def _stream_key(master_seed: int, stream_id: int) -> tuple:
    ss = np.random.SeedSequence(entropy=master_seed, spawn_key=(stream_id,))
    return tuple(int(w) for w in ss.generate_state(2, np.uint64))


def _slice_generator(seed: SeedSpec) -> np.random.Generator:
    key = np.array(_stream_key(seed.master_seed, seed.stream_id), dtype=np.uint64)
    counter = np.zeros(4, dtype=np.uint64)
    counter[2] = seed.step_index
    return np.random.Generator(np.random.Philox(counter=counter, key=key))


def sample_slice(seed: SeedSpec, grid: Grid, dt: float) -> NoiseSlice:
    """Draw the (master_seed, stream_id, step_index) slice: iid N(0, dt*dx)."""
    if dt <= 0:
        raise ParameterError("dt must be positive")
    gen = _slice_generator(seed)
    dW = gen.standard_normal(grid.n_points) * np.sqrt(dt * grid.dx)
    dW.setflags(write=False)
    return NoiseSlice(grid, dt, dW)


class SliceSampler:
    """Batched slice generation for many replicas sharing a master seed.

    Reuses one Philox bit generator, resetting its counter/key per row;
    rows are bit-identical to `sample_slice` for the same triple, which
    keeps replica batching out of the reproducibility contract.
    """

    def __init__(self, master_seed: int, stream_ids):
        self.master_seed = master_seed
        self.stream_ids = list(int(s) for s in stream_ids)
        self._keys = np.array(
            [_stream_key(master_seed, s) for s in self.stream_ids],
            dtype=np.uint64,
        ).reshape(len(self.stream_ids), 2)
        self._bitgen = np.random.Philox(key=np.zeros(2, dtype=np.uint64))
        self._gen = np.random.Generator(self._bitgen)
        # reused state template; assignment to .state copies the values in
        self._state = self._bitgen.state
        self._state["buffer_pos"] = 4
        self._state["has_uint32"] = 0
        self._state["uinteger"] = 0

    def sample_block(self, step_index: int, n_points: int, scale: float,
                     out: np.ndarray | None = None) -> np.ndarray:
        """Fill a (n_replicas, n_points) block of N(0, scale^2) draws."""
        B = len(self.stream_ids)
        if out is None:
            out = np.empty((B, n_points))
        state = self._state
        inner = state["state"]
        counter = inner["counter"]
        key = inner["key"]
        bitgen = self._bitgen
        gen = self._gen
        keys = self._keys
        for i in range(B):
            counter[:] = 0
            counter[2] = step_index
            key[:] = keys[i]
            bitgen.state = state
            gen.standard_normal(out=out[i])
        out *= scale
        return out
