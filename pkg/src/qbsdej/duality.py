"""Measure changes on the lattice and the dual (penalized) representation.

A measure change is a node-indexed pair ``(mu, v)``. On a branch with
Brownian sign ``s`` and jump group ``g`` the one-step density is

    L = 1 + mu s sqrt(dt) + v_j                          (jump of mark j)
    L = 1 + mu s sqrt(dt) - dt sum_j w_j v_j / (1 - lambda dt)   (no jump)

so that under the new measure ``E[dB] = mu dt`` and mark ``j`` arrives with
intensity ``w_j (1 + v_j)``. With this form
``E^Q_k[Y_{k+1}] = E_k[Y_{k+1}] + (mu Z_k + <v, U_k>) dt`` holds exactly for
the lattice coefficients, which makes weak duality exact on the grid.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .generators import Generator, legendre_transform
from .gexpectation import GExpectation
from .model import Lattice
from .solver import LatticeSolution

__all__ = [
    "AdmissibilityError",
    "MeasureChange",
    "ShiftedLattice",
    "girsanov_shift",
    "penalty",
    "dual_lower_bound",
    "optimal_density",
    "fenchel_young_gap",
    "random_measure_change",
    "dual_report",
]


class AdmissibilityError(ValueError):
    """A density pair leaves the discrete admissible set."""


@dataclass
class MeasureChange:
    """Per-slice ``mu[k] ~ (N_k,)`` and ``v[k] ~ (N_k, m)`` for ``k < n``."""

    mu: list
    v: list

    @classmethod
    def constant(cls, lattice: Lattice, mu: float = 0.0, v=None) -> "MeasureChange":
        m = lattice.m
        v = np.zeros(m) if v is None else np.broadcast_to(np.asarray(v, dtype=float), (m,))
        mus = [np.full(lattice.n_states(k), float(mu)) for k in range(lattice.steps)]
        vs = [np.tile(v, (lattice.n_states(k), 1)) for k in range(lattice.steps)]
        return cls(mus, vs)


def branch_density(lattice: Lattice, k: int, mu: np.ndarray, v: np.ndarray) -> np.ndarray:
    """One-step density ``L`` with shape ``(N_k, m + 1, 2)``."""
    dt = lattice.dt
    p = lattice.group_probs[k]
    w = p[1:] / dt
    brown = mu[:, None] * math.sqrt(dt) * np.array([1.0, -1.0])[None, :]
    extra = np.empty((len(mu), lattice.m + 1))
    extra[:, 0] = -dt * (v @ w) / p[0]
    extra[:, 1:] = v
    return 1.0 + extra[:, :, None] + brown[:, None, :]


@dataclass
class ShiftedLattice:
    """Lattice with reweighted branch probabilities.

    ``probs[k]`` is ``(N_k, m + 1, 2)``; ``density[k]`` is the node-marginal
    density ``Q(node)/P(node)`` (the path density is path dependent on a
    recombining lattice, its conditional mean given the node is this ratio).
    """

    lattice: Lattice
    probs: list
    density: list

    def expectation(self, k: int, values_next: np.ndarray) -> np.ndarray:
        vals = values_next[self.lattice.children[k]]
        return np.sum(self.probs[k] * vals, axis=(1, 2))

    def node_probabilities(self) -> list:
        lat = self.lattice
        out = [np.ones(1)]
        for k in range(lat.steps):
            mass = out[-1][:, None, None] * self.probs[k]
            out.append(np.bincount(lat.children[k].ravel(), weights=mass.ravel(),
                                   minlength=lat.n_states(k + 1)))
        return out


def girsanov_shift(lattice: Lattice, mc: MeasureChange, tol: float = 1e-15) -> ShiftedLattice:
    """Reweight every branch by the one-step density.

    Raises:
      AdmissibilityError: if a shifted probability leaves ``[0, 1]``.
    """
    probs = []
    for k in range(lattice.steps):
        L = branch_density(lattice, k, np.asarray(mc.mu[k], float), np.asarray(mc.v[k], float))
        q = lattice.branch_probs(k)[None] * L
        bad = (q < -tol) | (q > 1 + tol)
        if np.any(bad):
            i = int(np.argmax(bad.any(axis=(1, 2))))
            s = lattice.state(k, i)
            raise AdmissibilityError(f"shifted probability outside [0, 1] at slice k={k}, node {i} "
                                     f"(b={s.b}, jump_counts={s.jump_counts}): mu={mc.mu[k][i]:.6g}, "
                                     f"v={np.asarray(mc.v[k][i]).tolist()}")
        probs.append(q)
    shifted = ShiftedLattice(lattice, probs, [])
    P = lattice.node_probabilities()
    Q = shifted.node_probabilities()
    shifted.density = [np.divide(q, p, out=np.zeros_like(q), where=p > 0) for q, p in zip(Q, P)]
    return shifted


def penalty(g: Generator, lattice: Lattice, k: int, mu: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Nodewise conjugate ``G_{t_k}(mu, v)`` (``inf`` where unbounded)."""
    t = lattice.grid.times[k]
    closed = g.conjugate(t, np.asarray(mu)[:, None], np.asarray(v), lattice.marks)
    if closed is not None:
        return np.asarray(closed, dtype=float)
    return np.array([legendre_transform(g, t, [mu[i]], v[i], lattice.marks) for i in range(len(mu))])


def dual_lower_bound(ge: GExpectation, xi, mc: MeasureChange) -> float:
    """``E^Q[xi - sum_k G_{t_k}(mu_k, v_k) dt]`` at the root; ``-inf`` if some penalty is infinite."""
    lat = ge.lattice
    shifted = girsanov_shift(lat, mc)
    V = ge._terminal(xi, lat.steps)
    for k in range(lat.steps - 1, -1, -1):
        G = penalty(ge.generator, lat, k, mc.mu[k], mc.v[k])
        if not np.all(np.isfinite(G)):
            return -math.inf
        V = shifted.expectation(k, V) - G * lat.dt
    return float(V[0])


def optimal_density(sol: LatticeSolution, g: Generator | None = None, delta: float = 0.0) -> MeasureChange:
    """Nodewise subgradient ``(mu, v) in dg(Z, U)`` as a measure change.

    Raises:
      AdmissibilityError: if ``v <= -1 + delta`` or a shifted probability
        leaves ``[0, 1]``; the message names the node.
    """
    g = g or sol.generator
    lat = sol.lattice
    mus, vs = [], []
    for k in range(sol.start, sol.end):
        t = lat.grid.times[k]
        mu, v = g.subgradient(t, sol.Y[k], sol.Z[k][:, None], sol.U[k], lat.marks)
        mu = np.asarray(mu, dtype=float).reshape(len(sol.Y[k]), -1)[:, 0]
        v = np.asarray(v, dtype=float).reshape(len(sol.Y[k]), lat.m)
        bad = np.any(v <= -1 + delta, axis=1) if lat.m else np.zeros(len(v), bool)
        if np.any(bad):
            i = int(np.argmax(bad))
            s = lat.state(k, i)
            raise AdmissibilityError(f"subgradient v <= -1 + delta at slice k={k}, node {i} "
                                     f"(b={s.b}, jump_counts={s.jump_counts})")
        mus.append(mu)
        vs.append(v)
    mc = MeasureChange(mus, vs)
    girsanov_shift(lat, mc)
    return mc


def fenchel_young_gap(sol: LatticeSolution, mc: MeasureChange, g: Generator | None = None) -> float:
    """Max nodewise ``|mu Z + <v, U> - g(Z, U) - G(mu, v)|``."""
    g = g or sol.generator
    lat = sol.lattice
    worst = 0.0
    for k in range(sol.start, sol.end):
        t = lat.grid.times[k]
        w = lat.marks.weights_at(t)
        lhs = mc.mu[k] * sol.Z[k] + (mc.v[k] * sol.U[k]) @ w
        lhs = lhs - g(t, sol.Y[k], sol.Z[k][:, None], sol.U[k], lat.marks)
        G = penalty(g, lat, k, mc.mu[k], mc.v[k])
        worst = max(worst, float(np.max(np.abs(lhs - G))))
    return worst


def random_measure_change(lattice: Lattice, rng: np.random.Generator, mu_max: float = 2.0,
                          v_range=(-0.5, 1.0)) -> MeasureChange:
    """Random admissible pair: ``|mu| sqrt(dt) <= 0.45`` and ``v`` uniform in ``v_range``."""
    cap = min(mu_max, 0.45 / math.sqrt(lattice.dt))
    mus = [rng.uniform(-cap, cap, lattice.n_states(k)) for k in range(lattice.steps)]
    vs = [rng.uniform(*v_range, (lattice.n_states(k), lattice.m)) for k in range(lattice.steps)]
    mc = MeasureChange(mus, vs)
    girsanov_shift(lattice, mc)
    return mc


def dual_report(ge: GExpectation, xi, candidates: int = 100, seed: int = 0) -> dict:
    """Primal value, random candidate bounds and the subgradient-optimizer gap."""
    sol = ge.solve(xi)
    primal = sol.y0
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(candidates):
        b = dual_lower_bound(ge, xi, random_measure_change(ge.lattice, rng))
        rows.append({"id": i, "bound": b, "gap": primal - b})
    opt = optimal_density(sol)
    opt_bound = dual_lower_bound(ge, xi, opt)
    return {
        "primal": primal,
        "candidates": rows,
        "optimizer_bound": opt_bound,
        "optimizer_gap": primal - opt_bound,
        "fenchel_young_max": fenchel_young_gap(sol, opt),
        "min_slack": min((r["gap"] for r in rows), default=math.inf),
    }


def to_json(report: dict) -> str:
    return json.dumps(report, sort_keys=True)
