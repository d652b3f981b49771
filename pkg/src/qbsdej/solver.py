"""Discrete BSDEJ solvers.

Lattice backend: implicit-in-y, explicit-in-(z, u) Euler step

    Y_k = E_k[Y_{k+1}] + g(t_k, Y_k, Z_k, U_k) dt,
    Z_k = E_k[Y_{k+1} dB_k] / dt,
    U_k(x_j) = (jump-j branch mean) - (no-jump branch mean),

with exact conditional expectations. Regression backend: least-squares Monte
Carlo on simulated paths with a resimulated out-of-sample estimate of Y_0.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .generators import ConvergenceError, Generator
from .model import Lattice, PathSet, simulate_paths

__all__ = [
    "NumericalError",
    "StepSizeError",
    "TerminalCondition",
    "LatticeSolution",
    "DiagnosticsReport",
    "BasisSpec",
    "PathSolution",
    "solve_lattice",
    "backward_from",
    "one_step",
    "bmo_diagnostics",
    "solve_lsmc",
    "apriori_bound",
]

FIXED_POINT_TOL = 1e-12


class NumericalError(ArithmeticError):
    """Non-finite values or breakdown inside a solver."""


class StepSizeError(ValueError):
    """The contraction condition ``C dt < 1`` fails."""


@dataclass(frozen=True)
class TerminalCondition:
    """Bounded terminal payoff ``xi``.

    Args:
      payoff: ``f(B_T, counts)`` returning one value per state, where ``B_T``
        has shape ``(N,)`` (``(N, d)`` on multi-dimensional paths) and
        ``counts`` is ``(N, m)``; or a precomputed array of terminal node values.
      bound: declared ``||xi||_inf``; every evaluation is checked against it.
    """

    payoff: Callable | np.ndarray
    bound: float
    label: str = "xi"

    def _check(self, vals, where):
        vals = np.asarray(vals, dtype=float)
        if not np.all(np.isfinite(vals)):
            raise NumericalError(f"terminal payoff is not finite on {where}")
        worst = float(np.max(np.abs(vals))) if vals.size else 0.0
        if worst > self.bound * (1 + 1e-12) + 1e-15:
            raise ValueError(f"|xi| = {worst:.6g} exceeds the declared bound {self.bound} on {where}")
        return vals

    def on_lattice(self, lattice: Lattice, k: int | None = None) -> np.ndarray:
        k = lattice.steps if k is None else k
        if callable(self.payoff):
            vals = self.payoff(lattice.brownian(k), lattice.counts(k))
            vals = np.broadcast_to(np.asarray(vals, dtype=float), (lattice.n_states(k),)).copy()
        else:
            vals = np.asarray(self.payoff, dtype=float)
            if vals.shape != (lattice.n_states(k),):
                raise ValueError(f"payoff array has shape {vals.shape}, slice {k} has "
                                 f"{lattice.n_states(k)} nodes")
        return self._check(vals, f"lattice slice {k}")

    def on_paths(self, paths: PathSet) -> np.ndarray:
        if not callable(self.payoff):
            raise TypeError("array payoffs are only defined on the lattice")
        B = paths.brownian()[:, -1, :]
        if B.shape[1] == 1:
            B = B[:, 0]
        N = paths.jump_counts()[:, -1, :]
        vals = np.broadcast_to(np.asarray(self.payoff(B, N), dtype=float), (paths.count,)).copy()
        return self._check(vals, "terminal paths")


def one_step(lattice: Lattice, k: int, v_next: np.ndarray):
    """Conditional moments of ``v_next`` (slice ``k + 1``) seen from slice ``k``.

    Returns:
      ``(E, Z, U, D)`` with ``E = E_k[V]``, ``Z = E_k[V dB]/dt``, ``U`` the
      jump coefficients ``(N_k, m)`` and ``D`` the per-group half-differences
      ``(V_up - V_down)/2`` of shape ``(N_k, m + 1)``.
    """
    vals = v_next[lattice.children[k]]
    p = lattice.group_probs[k]
    avg = vals.mean(axis=-1)
    D = (vals[..., 0] - vals[..., 1]) / 2.0
    E = avg @ p
    Z = (D @ p) / math.sqrt(lattice.dt)
    U = avg[:, 1:] - avg[:, :1]
    return E, Z, U, D


def _implicit_y(g: Generator, t, E, z, u, marks, dt, where):
    """Solve ``y = E + g(t, y, z, u) dt`` nodewise."""
    with np.errstate(all="ignore"):
        y = E + g(t, E, z, u, marks) * dt
        if g.depends_on_y:
            for _ in range(10_000):
                y_new = E + g(t, y, z, u, marks) * dt
                if not np.all(np.isfinite(y_new)):
                    break
                done = np.max(np.abs(y_new - y), initial=0.0) <= FIXED_POINT_TOL * max(1.0, np.max(np.abs(y_new), initial=0.0))
                y = y_new
                if done:
                    break
            else:
                raise ConvergenceError(f"fixed point in y did not converge on {where}")
    bad = ~np.isfinite(y)
    if np.any(bad):
        return y, int(np.argmax(bad))
    return y, None


@dataclass
class LatticeSolution:
    """Node-indexed solution ``(Y, Z, U)`` of the discrete BSDEJ.

    ``Y[k]`` has one entry per node of slice ``k`` (``k = start, ..., n``);
    ``Z[k]`` and ``U[k]`` exist for ``k < n``. Slices before ``start`` are ``None``.
    """

    lattice: Lattice
    generator: Generator
    Y: list
    Z: list
    U: list
    start: int = 0
    end: int | None = None

    @property
    def y0(self) -> float:
        return float(self.Y[self.start][0]) if self.start == 0 else math.nan

    def consistency_residual(self) -> float:
        """Max over nodes of ``|Y_k - E_k[Y_{k+1}] - g(t_k, Y_k, Z_k, U_k) dt|``."""
        lat, g = self.lattice, self.generator
        worst = 0.0
        for k in range(self.start, self.end):
            E, _, _, _ = one_step(lat, k, self.Y[k + 1])
            t = lat.grid.times[k]
            gv = g(t, self.Y[k], self.Z[k][:, None], self.U[k], lat.marks)
            worst = max(worst, float(np.max(np.abs(self.Y[k] - E - gv * lat.dt))))
        return worst

    def to_csv(self) -> str:
        """CSV text with columns ``k, state_id, b, c_1..c_m, Y, Z, U_1..U_m``.

        Terminal-slice ``Z`` and ``U`` cells are empty.
        """
        lat = self.lattice
        m = lat.m
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["k", "state_id", "b"] + [f"c_{j + 1}" for j in range(m)]
                   + ["Y", "Z"] + [f"U_{j + 1}" for j in range(m)])
        for k in range(self.start, self.end + 1):
            st = lat.states[k]
            for i in range(len(st)):
                row = [k, i] + [int(x) for x in st[i]] + [fmt(self.Y[k][i])]
                if k < self.end:
                    row += [fmt(self.Z[k][i])] + [fmt(x) for x in self.U[k][i]]
                else:
                    row += [""] * (1 + m)
                w.writerow(row)
        return buf.getvalue()


def fmt(x: float) -> str:
    """Round-trip float formatting with 17 significant digits."""
    return "%.17g" % float(x)


def backward_from(lattice: Lattice, g: Generator, values: np.ndarray, end: int,
                  start: int = 0) -> LatticeSolution:
    """Backward induction from node values on slice ``end`` down to slice ``start``."""
    dt = lattice.dt
    if g.depends_on_y and g.lipschitz_y * dt >= 1.0:
        raise StepSizeError(f"C*dt = {g.lipschitz_y * dt:.6g} >= 1: the implicit step in y is not a "
                            "contraction; increase the number of steps")
    n1 = lattice.steps + 1
    Y = [None] * n1
    Z = [None] * n1
    U = [None] * n1
    Y[end] = np.asarray(values, dtype=float)
    marks = lattice.marks
    for k in range(end - 1, start - 1, -1):
        E, z, u, _ = one_step(lattice, k, Y[k + 1])
        t = lattice.grid.times[k]
        y, bad = _implicit_y(g, t, E, z[:, None], u, marks, dt, f"slice {k}")
        if bad is not None:
            s = lattice.state(k, bad)
            raise NumericalError(f"non-finite generator value at slice k={k}, node {bad} "
                                 f"(b={s.b}, jump_counts={s.jump_counts}), z={z[bad]:.6g}, u={u[bad]}")
        Y[k], Z[k], U[k] = y, z, u
    return LatticeSolution(lattice, g, Y, Z, U, start, end)


def solve_lattice(lattice: Lattice, g: Generator, xi: TerminalCondition | np.ndarray,
                  terminal_index: int | None = None) -> LatticeSolution:
    """Solve the BSDEJ with driver ``g`` and terminal condition ``xi`` on the lattice.

    ``terminal_index`` lets ``xi`` live on an earlier slice (node values),
    which is how conditional evaluations are re-solved.

    Raises:
      StepSizeError: if ``g`` depends on ``y`` and ``C dt >= 1``.
      NumericalError: if ``g`` becomes non-finite; the message names the node.
    """
    end = lattice.steps if terminal_index is None else int(terminal_index)
    if isinstance(xi, TerminalCondition):
        vals = xi.on_lattice(lattice, end)
    else:
        vals = np.asarray(xi, dtype=float)
    return backward_from(lattice, g, vals, end)


@dataclass
class DiagnosticsReport:
    y_sup: float
    bmo_z: float
    bmo_u: float
    tail_profile_z: list
    tail_profile_u: list
    sup_profile: list

    def to_dict(self):
        return dict(self.__dict__)


def bmo_diagnostics(sol: LatticeSolution) -> DiagnosticsReport:
    """Discrete BMO-type sums ``sup_k E_k[sum_{l>=k} |Z_l|^2 dt]`` and the ``U`` analogue.

    The U-part uses ``||U||^2_{L^2(nu)} = sum_j w_j U_j^2``. Also returns the
    unconditional tail profiles ``E[sum_{l>=k} ...]`` (nonincreasing in ``k``)
    and the per-slice node suprema.
    """
    lat = sol.lattice
    dt = lat.dt
    end = sol.end
    tz = np.zeros(lat.n_states(end))
    tu = np.zeros(lat.n_states(end))
    sup_z = sup_u = 0.0
    sup_profile = [0.0] * (end + 1)
    probs = lat.node_probabilities()
    prof_z = [0.0] * (end + 1)
    prof_u = [0.0] * (end + 1)
    for k in range(end - 1, sol.start - 1, -1):
        w = lat.marks.weights_at(lat.grid.times[k])
        tz = sol.Z[k] ** 2 * dt + lat.expectation(k, tz)
        tu = (sol.U[k] ** 2 @ w) * dt + lat.expectation(k, tu)
        sup_z = max(sup_z, float(tz.max()))
        sup_u = max(sup_u, float(tu.max()))
        sup_profile[k] = float((tz + tu).max())
        prof_z[k] = float(probs[k] @ tz)
        prof_u[k] = float(probs[k] @ tu)
    y_sup = max(float(np.max(np.abs(y))) for y in sol.Y[sol.start:end + 1])
    return DiagnosticsReport(y_sup, sup_z, sup_u, prof_z, prof_u, sup_profile)


def apriori_bound(gamma: float, M: float, beta: float, horizon: float, xi_bound: float) -> float:
    """``J = gamma M (e^{beta T} - 1)/beta + gamma e^{beta T} ||xi||`` (``gamma M T`` at ``beta = 0``)."""
    growth = horizon if beta == 0 else math.expm1(beta * horizon) / beta
    return gamma * M * growth + gamma * math.exp(beta * horizon) * xi_bound


# ---------------------------------------------------------------------------
# regression Monte Carlo


@dataclass(frozen=True)
class BasisSpec:
    """Regression basis on the path state ``(B_{t_k}, N_{t_k})``.

    ``kind="polynomial"``: monomials ``B_i^p`` for ``p <= degree`` plus, if
    ``jump_counts``, linear terms in the jump counts. ``kind="indicator"``:
    one-hot on the lattice state ``(b, c)``, valid for binomial increments.
    """

    kind: str = "polynomial"
    degree: int = 2
    jump_counts: bool = True

    def __post_init__(self):
        if self.kind not in ("polynomial", "indicator"):
            raise ValueError(f"unknown basis kind {self.kind!r}")
        if self.degree < 0:
            raise ValueError("degree must be >= 0")

    def size(self, dim: int, m: int, k: int | None = None) -> int:
        if self.kind == "polynomial":
            return 1 + self.degree * dim + (m if self.jump_counts else 0)
        k = k if k is not None else 0
        return (k + 1) * math.comb(k + m, m)


class _Design:
    """Per-slice design: maps path states to basis rows with a fixed column set."""

    def __init__(self, spec: BasisSpec, dt: float):
        self.spec = spec
        self.sqdt = math.sqrt(dt)
        self.keep = None
        self.keys = None

    def raw(self, B, N):
        if self.spec.kind == "polynomial":
            cols = [np.ones(len(B))]
            for i in range(B.shape[1]):
                for p in range(1, self.spec.degree + 1):
                    cols.append(B[:, i] ** p)
            if self.spec.jump_counts:
                cols.extend(N.T.astype(float))
            return np.column_stack(cols)
        b = np.rint(B[:, 0] / self.sqdt).astype(np.int64)
        key = np.column_stack([b, N])
        if self.keys is None:
            self.keys = np.unique(key, axis=0)
        idx = _row_lookup(self.keys, key)
        out = np.zeros((len(B), len(self.keys)))
        hit = idx >= 0
        out[np.nonzero(hit)[0], idx[hit]] = 1.0
        return out

    def fit_columns(self, X):
        if self.spec.kind == "polynomial":
            const = np.ptp(X, axis=0) == 0
            const[0] = False
            self.keep = ~const
        else:
            self.keep = np.ones(X.shape[1], bool)
        return X[:, self.keep]

    def __call__(self, B, N):
        return self.raw(B, N)[:, self.keep]


def _row_lookup(table, rows):
    lookup = {tuple(r): i for i, r in enumerate(table.tolist())}
    return np.array([lookup.get(tuple(r), -1) for r in rows.tolist()], dtype=np.int64)


@dataclass
class PathSolution:
    """Regression estimates of ``(Y, Z, U)`` along simulated paths."""

    Y: np.ndarray
    Z: np.ndarray
    U: np.ndarray
    y0_in_sample: float
    y0: float
    y0_se: float
    residuals: list
    basis: BasisSpec
    coefficients: list = field(repr=False, default_factory=list)


def _noise_design(X, dB, jumps, w, dt):
    """Interact the basis with the one-step noises ``1, dB_i, 1{J=j} - w_j dt``."""
    blocks = [X] + [X * dB[:, i:i + 1] for i in range(dB.shape[1])]
    for j in range(len(w)):
        blocks.append(X * ((jumps == j) - w[j] * dt)[:, None])
    return np.hstack(blocks)


def _cellwise_fit(X, noise, y):
    """Per-cell least squares for a one-hot (indicator) basis.

    Each cell is fitted on its own rows. Noise columns are added greedily and
    kept only when they raise the rank, so a cell that never sees a jump (or
    a single path) gets zero ``U`` (or ``Z``) instead of a singular system.
    """
    cells = np.argmax(X, axis=1)
    q = noise.shape[1]
    beta = np.zeros((q, X.shape[1]))
    resid = np.empty_like(y)
    for c in np.unique(cells):
        rows = cells == c
        A = noise[rows]
        keep = [0]
        for j in range(1, q):
            if np.linalg.matrix_rank(A[:, keep + [j]]) > len(keep):
                keep.append(j)
        coef = np.linalg.lstsq(A[:, keep], y[rows], rcond=None)[0]
        beta[keep, c] = coef
        resid[rows] = y[rows] - A[:, keep] @ coef
    return beta.ravel(), resid


def _split_coefficients(beta, p, d, m):
    b = beta.reshape(1 + d + m, p)
    return b[0], b[1:1 + d], b[1 + d:]


def solve_lsmc(paths: PathSet, g: Generator, xi: TerminalCondition, basis: BasisSpec,
               validation_paths: PathSet | None = None, validation_count: int | None = None
               ) -> PathSolution:
    """Least-squares Monte Carlo backward regression.

    At each slice ``Y_{k+1}`` is regressed on the basis ``phi`` interacted
    with the one-step noises, ``phi (b0 + bz dB + sum_j bu_j (1{J=j} - w_j dt))``,
    so that ``E_k[Y_{k+1}] = phi b0``, ``Z_k = phi bz`` and
    ``U_k(x_j) = phi bu_j`` (a difference of conditional means). ``Y_0`` is then
    re-estimated on independent paths as the mean of
    ``xi + sum g dt - sum Z dB - sum int U dmu~`` using the fitted coefficients.

    Raises:
      ValueError: if there are fewer than 10 paths per basis function.
      NumericalError: on a rank-deficient regression (names the slice).
    """
    grid, marks = paths.grid, paths.marks
    n, dt, m, d = grid.steps, grid.dt, marks.m, paths.dim
    if g.depends_on_y and g.lipschitz_y * dt >= 1.0:
        raise StepSizeError(f"C*dt = {g.lipschitz_y * dt:.6g} >= 1")
    need = 10 * max(basis.size(d, m, k) for k in range(n))
    need *= 1 + d + m
    if paths.count < need:
        raise ValueError(f"solve_lsmc needs at least {need} paths (10x basis size), got {paths.count}")
    Bp = paths.brownian()
    Np = paths.jump_counts()
    Y = np.zeros((paths.count, n + 1))
    Z = np.zeros((paths.count, n, d))
    U = np.zeros((paths.count, n, m))
    Y[:, n] = xi.on_paths(paths)
    residuals = [0.0] * n
    coefs = [None] * n
    for k in range(n - 1, -1, -1):
        t = grid.times[k]
        w = marks.weights_at(t)
        design = _Design(basis, dt)
        X = design.fit_columns(design.raw(Bp[:, k], Np[:, k]))
        p = X.shape[1]
        if basis.kind == "indicator":
            noise = _noise_design(np.ones((len(X), 1)), paths.dB[:, k], paths.jumps[:, k], w, dt)
            beta, resid = _cellwise_fit(X, noise, Y[:, k + 1])
        else:
            full = _noise_design(X, paths.dB[:, k], paths.jumps[:, k], w, dt)
            # interaction columns that never fire carry no information
            live = np.any(full != 0, axis=0)
            live[:p] = True
            A = full[:, live]
            coef, _, rank, _ = np.linalg.lstsq(A, Y[:, k + 1], rcond=None)
            if rank < A.shape[1]:
                raise NumericalError(f"rank-deficient regression at slice k={k}: rank {rank} < {A.shape[1]} columns")
            beta = np.zeros(full.shape[1])
            beta[live] = coef
            resid = Y[:, k + 1] - A @ coef
        residuals[k] = float(np.sqrt(np.mean(resid ** 2)))
        b0, bz, bu = _split_coefficients(beta, p, d, m)
        E, z, u = X @ b0, X @ bz.T, X @ bu.T
        y, bad = _implicit_y(g, t, E, z, u, marks, dt, f"slice {k}")
        if bad is not None:
            raise NumericalError(f"non-finite generator value at slice k={k}, path {bad}")
        Y[:, k], Z[:, k], U[:, k] = y, z, u
        coefs[k] = (design, (b0, bz, bu))

    if validation_paths is None:
        validation_paths = simulate_paths(grid, marks, validation_count or paths.count, paths.seed,
                                          dim=d, increments=paths.increments, stream=paths.stream + 1)
    est = _resimulate(validation_paths, g, xi, coefs)
    y0 = float(est.mean())
    se = float(est.std(ddof=1) / math.sqrt(len(est))) if len(est) > 1 else math.nan
    return PathSolution(Y, Z, U, float(Y[:, 0].mean()), y0, se, residuals, basis, coefs)


def _resimulate(paths: PathSet, g: Generator, xi: TerminalCondition, coefs) -> np.ndarray:
    grid, marks = paths.grid, paths.marks
    dt, m = grid.dt, marks.m
    Bp = paths.brownian()
    Np = paths.jump_counts()
    total = xi.on_paths(paths).copy()
    for k in range(grid.steps):
        t = grid.times[k]
        w = marks.weights_at(t)
        design, (b0, bz, bu) = coefs[k]
        X = design(Bp[:, k], Np[:, k])
        E, z, u = X @ b0, X @ bz.T, X @ bu.T
        y, _ = _implicit_y(g, t, E, z, u, marks, dt, f"slice {k}")
        jump_term = -dt * (u @ w)
        if m:
            hit = paths.jumps[:, k]
            rows = np.nonzero(hit >= 0)[0]
            jump_term[rows] += u[rows, hit[rows]]
        total += g(t, y, z, u, marks) * dt - np.sum(z * paths.dB[:, k], axis=1) - jump_term
    return total
