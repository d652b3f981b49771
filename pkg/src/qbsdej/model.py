"""Discrete filtration: time grid, finite mark space, recombining lattice and paths.

The lattice backend uses a one-dimensional Brownian motion and at most one
jump per step. From every node there are ``2 (m + 1)`` branches: a Brownian
move ``+-sqrt(dt)`` combined with either no jump (probability
``(1 - lambda dt) / 2`` each) or a jump of mark ``x_j`` (probability
``w_j dt / 2`` each). States recombine on ``(b, c_1, ..., c_m)`` where ``b``
is the signed number of Brownian up-moves and ``c_j`` counts past jumps of
mark ``j``.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

__all__ = [
    "TimeGrid",
    "MarkSpace",
    "LatticeState",
    "Lattice",
    "PathSet",
    "build_lattice",
    "simulate_paths",
]

# Branch order inside a group: index 0 is the Brownian up-move, index 1 the down-move.
SIGNS = np.array([1.0, -1.0])
_BLOCK = 1024


@dataclass(frozen=True)
class TimeGrid:
    """Uniform subdivision ``0 = t_0 < ... < t_n = T``."""

    horizon: float
    steps: int

    def __post_init__(self):
        if int(self.steps) != self.steps or self.steps < 1:
            raise ValueError(f"steps must be a positive integer, got {self.steps}")
        if not (self.horizon > 0 and math.isfinite(self.horizon)):
            raise ValueError(f"horizon must be positive and finite, got {self.horizon}")

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    @property
    def times(self) -> np.ndarray:
        t = np.arange(self.steps + 1) * self.dt
        t[-1] = self.horizon
        return t


@dataclass(frozen=True)
class MarkSpace:
    """Finite jump-mark set with a deterministic, piecewise-constant compensator.

    ``weights`` is either one row of ``m`` masses (time-constant compensator) or
    ``len(breaks) + 1`` rows; row ``i`` applies on ``[breaks[i-1], breaks[i])``.
    """

    sizes: tuple = ()
    weights: tuple = ()
    breaks: tuple = ()

    def __post_init__(self):
        sizes = tuple(float(x) for x in self.sizes)
        w = np.asarray(self.weights, dtype=float)
        if w.size == 0:
            w = np.zeros((1, len(sizes)))
        if w.ndim == 1:
            w = w[None, :]
        if w.shape[1] != len(sizes):
            raise ValueError("weights must have one entry per mark")
        if w.shape[0] != len(self.breaks) + 1:
            raise ValueError("need len(breaks) + 1 weight rows")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("compensator weights must be finite and nonnegative")
        if any(x == 0.0 for x in sizes):
            raise ValueError("marks must be nonzero")
        if len(set(sizes)) != len(sizes):
            raise ValueError("marks must be distinct")
        if list(self.breaks) != sorted(self.breaks):
            raise ValueError("breaks must be increasing")
        object.__setattr__(self, "sizes", sizes)
        object.__setattr__(self, "weights", tuple(tuple(r) for r in w.tolist()))
        object.__setattr__(self, "breaks", tuple(float(b) for b in self.breaks))

    @classmethod
    def empty(cls) -> "MarkSpace":
        return cls()

    @property
    def m(self) -> int:
        return len(self.sizes)

    @property
    def kernel(self) -> np.ndarray:
        """``1 /\\ |x_j|`` for every mark."""
        return np.minimum(1.0, np.abs(np.asarray(self.sizes, dtype=float)))

    def weights_at(self, t: float) -> np.ndarray:
        row = int(np.searchsorted(self.breaks, t, side="right"))
        return np.asarray(self.weights[row], dtype=float)

    def intensity(self, t: float) -> float:
        return float(self.weights_at(t).sum())

    def shifted(self, t0: float) -> "MarkSpace":
        """Same compensator viewed from time ``t0`` onwards."""
        return MarkSpace(self.sizes, self.weights, tuple(b - t0 for b in self.breaks))

    def check_thinning(self, grid: TimeGrid) -> None:
        for k, t in enumerate(grid.times[:-1]):
            lam_dt = self.intensity(t) * grid.dt
            if lam_dt >= 1.0:
                raise ValueError(
                    f"lambda*dt = {lam_dt:.6g} >= 1 on step {k}; "
                    "at-most-one-jump thinning is invalid, refine the grid"
                )


class LatticeState(NamedTuple):
    k: int
    b: int
    jump_counts: tuple


def _compositions(m: int, total_max: int) -> np.ndarray:
    """All ``c`` in ``N^m`` with ``sum(c) <= total_max`` in lexicographic order."""
    if m == 0:
        return np.zeros((1, 0), dtype=np.int64)
    grid = np.indices((total_max + 1,) * m).reshape(m, -1).T
    return grid[grid.sum(axis=1) <= total_max]


def _keys(bidx: np.ndarray, counts: np.ndarray, radix: int) -> np.ndarray:
    key = bidx.astype(np.int64)
    for j in range(counts.shape[1]):
        key = key * radix + counts[:, j]
    return key


class Lattice:
    """Recombining state enumeration with branch structure.

    Attributes:
      states: per slice ``k``, an int array ``(N_k, 1 + m)`` of ``(b, c_1..c_m)``.
      children: per step ``k < n``, an int array ``(N_k, m + 1, 2)`` indexing
        slice ``k + 1``; axis 1 is the jump group (0 = no jump), axis 2 the
        Brownian sign (0 = up).
      group_probs: per step, ``(m + 1,)`` probabilities ``[1 - lambda dt, w_1 dt, ...]``.
    """

    def __init__(self, grid: TimeGrid, marks: MarkSpace):
        marks.check_thinning(grid)
        self.grid = grid
        self.marks = marks
        m = marks.m
        dt = grid.dt
        self.states: list[np.ndarray] = []
        self.children: list[np.ndarray] = []
        self.group_probs: list[np.ndarray] = []
        keys_per_slice = []
        for k in range(grid.steps + 1):
            comps = _compositions(m, k)
            bidx = np.repeat(np.arange(k + 1), len(comps))
            counts = np.tile(comps, (k + 1, 1))
            self.states.append(np.column_stack([2 * bidx - k, counts]).astype(np.int64))
            keys_per_slice.append(_keys(bidx, counts, k + 1))
        eye = np.vstack([np.zeros((1, m), dtype=np.int64), np.eye(m, dtype=np.int64)])
        for k in range(grid.steps):
            st = self.states[k]
            bidx = (st[:, 0] + k) // 2
            counts = st[:, 1:]
            ch = np.empty((len(st), m + 1, 2), dtype=np.int64)
            for g in range(m + 1):
                c_child = counts + eye[g]
                for s, shift in enumerate((1, 0)):
                    key = _keys(bidx + shift, c_child, k + 2)
                    ch[:, g, s] = np.searchsorted(keys_per_slice[k + 1], key)
            self.children.append(ch)
            w = marks.weights_at(grid.times[k])
            self.group_probs.append(np.concatenate([[1.0 - w.sum() * dt], w * dt]))

    @property
    def steps(self) -> int:
        return self.grid.steps

    @property
    def m(self) -> int:
        return self.marks.m

    @property
    def dt(self) -> float:
        return self.grid.dt

    def n_states(self, k: int) -> int:
        return len(self.states[k])

    def brownian(self, k: int) -> np.ndarray:
        return self.states[k][:, 0] * math.sqrt(self.grid.dt)

    def counts(self, k: int) -> np.ndarray:
        return self.states[k][:, 1:]

    def state(self, k: int, i: int) -> LatticeState:
        row = self.states[k][i]
        return LatticeState(k, int(row[0]), tuple(int(c) for c in row[1:]))

    def branch_probs(self, k: int) -> np.ndarray:
        """``(m + 1, 2)`` probabilities of every branch out of a slice-``k`` node."""
        return np.repeat(self.group_probs[k][:, None] / 2.0, 2, axis=1)

    def brownian_increments(self) -> np.ndarray:
        return SIGNS * math.sqrt(self.grid.dt)

    def expectation(self, k: int, values_next: np.ndarray) -> np.ndarray:
        """``E_k[V_{k+1}]`` for node values ``V`` on slice ``k + 1``."""
        vals = values_next[self.children[k]]
        return vals.mean(axis=-1) @ self.group_probs[k]

    def node_probabilities(self) -> list[np.ndarray]:
        """Unconditional probability of every node, slice by slice."""
        probs = [np.ones(1)]
        for k in range(self.steps):
            ch = self.children[k]
            mass = probs[-1][:, None, None] * self.branch_probs(k)[None]
            probs.append(np.bincount(ch.ravel(), weights=mass.ravel(),
                                     minlength=self.n_states(k + 1)))
        return probs

    def __repr__(self):
        return (f"Lattice(T={self.grid.horizon}, n={self.steps}, m={self.m}, "
                f"nodes={sum(len(s) for s in self.states)})")


def build_lattice(grid: TimeGrid, marks: MarkSpace | None = None) -> Lattice:
    """Enumerate the recombining lattice for ``grid`` and ``marks``.

    Raises:
      ValueError: if ``lambda_t * dt >= 1`` on some step.
    """
    return Lattice(grid, marks if marks is not None else MarkSpace())


@dataclass(frozen=True)
class PathSet:
    """Independent Monte Carlo paths of Brownian increments and marked jumps.

    ``jumps[i, k]`` is the index of the mark that jumped on step ``k`` of path
    ``i``, or ``-1`` when there was no jump.
    """

    grid: TimeGrid
    marks: MarkSpace
    dB: np.ndarray = field(repr=False)
    jumps: np.ndarray = field(repr=False)
    seed: int = 0
    stream: int = 0
    increments: str = "gaussian"

    @property
    def count(self) -> int:
        return self.dB.shape[0]

    @property
    def dim(self) -> int:
        return self.dB.shape[2]

    def brownian(self) -> np.ndarray:
        """``(count, n + 1, d)`` Brownian values including ``B_0 = 0``."""
        out = np.zeros((self.count, self.grid.steps + 1, self.dim))
        np.cumsum(self.dB, axis=1, out=out[:, 1:])
        return out

    def jump_counts(self) -> np.ndarray:
        """``(count, n + 1, m)`` cumulative jump counts per mark."""
        m = self.marks.m
        out = np.zeros((self.count, self.grid.steps + 1, m), dtype=np.int64)
        for j in range(m):
            np.cumsum(self.jumps == j, axis=1, out=out[:, 1:, j])
        return out


def _simulate_block(grid, marks, size, seed, stream, block, dim, increments):
    n = grid.steps
    ss_norm = np.random.SeedSequence(seed, spawn_key=(stream, block, 0))
    ss_jump = np.random.SeedSequence(seed, spawn_key=(stream, block, 1))
    rng = np.random.default_rng(ss_norm)
    if increments == "gaussian":
        dB = rng.standard_normal((size, n, dim)) * math.sqrt(grid.dt)
    else:
        dB = (2.0 * rng.integers(0, 2, size=(size, n, dim)) - 1.0) * math.sqrt(grid.dt)
    jumps = np.full((size, n), -1, dtype=np.int64)
    if marks.m:
        unif = np.random.default_rng(ss_jump).random((size, n))
        for k, t in enumerate(grid.times[:-1]):
            cum = np.cumsum(marks.weights_at(t)) * grid.dt
            idx = np.searchsorted(cum, unif[:, k], side="right")
            jumps[:, k] = np.where(idx < marks.m, idx, -1)
    return dB, jumps


def simulate_paths(grid: TimeGrid, marks: MarkSpace | None, count: int, seed: int, *,
                   dim: int = 1, increments: str = "gaussian", stream: int = 0,
                   threads: int = 1) -> PathSet:
    """Draw ``count`` paths with counter-based block streams.

    Paths are generated in fixed blocks of 1024, each block seeded from
    ``(seed, stream, block)``, so the result does not depend on ``threads``.
    ``increments="binomial"`` draws ``+-sqrt(dt)`` Brownian steps, which puts
    the paths on the lattice's Brownian skeleton.
    """
    marks = marks if marks is not None else MarkSpace()
    if count < 1:
        raise ValueError("count must be >= 1")
    if increments not in ("gaussian", "binomial"):
        raise ValueError(f"unknown increments {increments!r}")
    marks.check_thinning(grid)
    sizes = [min(_BLOCK, count - s) for s in range(0, count, _BLOCK)]
    args = [(grid, marks, size, seed, stream, b, dim, increments) for b, size in enumerate(sizes)]
    if threads > 1 and len(args) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda a: _simulate_block(*a), args))
    else:
        parts = [_simulate_block(*a) for a in args]
    dB = np.concatenate([p[0] for p in parts])
    jumps = np.concatenate([p[1] for p in parts])
    return PathSet(grid, marks, dB, jumps, seed=seed, stream=stream, increments=increments)


def compensated_jump_increment(u: np.ndarray, group: np.ndarray | int, weights: np.ndarray,
                               dt: float) -> np.ndarray:
    """One-step ``int u d(mu - nu dt) = u(x_J) 1{jump} - dt sum_j w_j u_j``.

    ``group`` is 0 for no jump and ``j + 1`` for a jump of mark ``j``.
    """
    u = np.asarray(u, dtype=float)
    group = np.asarray(group)
    padded = np.concatenate([np.zeros(u.shape[:-1] + (1,)), u], axis=-1)
    hit = np.take_along_axis(padded, np.broadcast_to(group, u.shape[:-1])[..., None], axis=-1)[..., 0]
    return hit - dt * (u @ weights)

