"""Nonlinear Doob-Meyer extraction and upcrossing counts for lattice processes."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .duality import MeasureChange, girsanov_shift
from .generators import AssumptionProfile
from .gexpectation import GExpectation
from .model import Lattice, PathSet
from .solver import LatticeSolution, apriori_bound, backward_from, one_step

__all__ = [
    "AdaptedProcess",
    "Classification",
    "DoobMeyer",
    "UpcrossingReport",
    "classify_process",
    "doob_meyer",
    "reflected_solve",
    "count_upcrossings",
    "expected_upcrossings",
    "upcrossing_bound",
    "verify_upcrossing_bound",
    "royer_case_audit",
]


@dataclass
class AdaptedProcess:
    """One value per lattice node and slice; adapted by construction."""

    lattice: Lattice
    values: list

    @classmethod
    def from_solution(cls, sol: LatticeSolution) -> "AdaptedProcess":
        return cls(sol.lattice, [np.asarray(y, dtype=float).copy() for y in sol.Y])

    @classmethod
    def from_function(cls, lattice: Lattice, fn) -> "AdaptedProcess":
        """``fn(t, B, counts)`` evaluated on every slice."""
        vals = []
        for k, t in enumerate(lattice.grid.times):
            v = np.asarray(fn(t, lattice.brownian(k), lattice.counts(k)), dtype=float)
            vals.append(np.broadcast_to(v, (lattice.n_states(k),)).copy())
        return cls(lattice, vals)

    def plus_time(self, delta: float) -> "AdaptedProcess":
        """``X_k + delta t_k``."""
        t = self.lattice.grid.times
        return AdaptedProcess(self.lattice, [v + delta * t[k] for k, v in enumerate(self.values)])

    def sup_norm(self) -> float:
        return max(float(np.max(np.abs(v))) for v in self.values)


@dataclass
class Classification:
    kind: str
    max_drop: float
    max_rise: float
    increments: list

    def to_dict(self):
        return {"kind": self.kind, "max_drop": self.max_drop, "max_rise": self.max_rise}


def _one_step_g(ge: GExpectation, X: AdaptedProcess, k: int) -> np.ndarray:
    return backward_from(ge.lattice, ge.generator, X.values[k + 1], k + 1, start=k).Y[k]


def classify_process(X: AdaptedProcess, ge: GExpectation, tol: float = 1e-10) -> Classification:
    """Compare ``E^g_k[X_{k+1}]`` with ``X_k`` at every node.

    ``max_drop`` is the largest ``X_k - E^g_k[X_{k+1}]`` (a submartingale
    violation), ``max_rise`` the largest ``E^g_k[X_{k+1}] - X_k``.
    """
    incs = [_one_step_g(ge, X, k) - X.values[k] for k in range(ge.lattice.steps)]
    drop = max((float(np.max(-d)) for d in incs), default=0.0)
    rise = max((float(np.max(d)) for d in incs), default=0.0)
    sub, sup = drop <= tol, rise <= tol
    kind = "martingale" if sub and sup else "submartingale" if sub else "supermartingale" if sup else "neither"
    return Classification(kind, max(drop, 0.0), max(rise, 0.0), incs)


@dataclass
class DoobMeyer:
    """Per-slice ``Z``, ``U``, predictable increments ``dA`` and the orthogonal
    residual amplitude ``D - D_bar`` of the one-step decomposition.

    ``A_mean``, ``A_min`` and ``A_max`` summarize the cumulative ``A`` at each
    node over all paths reaching it (``A`` is path dependent in general).
    """

    Z: list
    U: list
    dA: list
    residual_amp: list
    A_mean: list
    A_min: list
    A_max: list
    reconstruction_error: float
    kind: str


def doob_meyer(X: AdaptedProcess, ge: GExpectation, kind: str | None = None,
               tol: float = 1e-9) -> DoobMeyer:
    """One-step nonlinear Doob-Meyer decomposition on the lattice.

    ``dA_k = E_k[X_{k+1}] + g(t_k, X_k, Z_k, U_k) dt - X_k`` where ``(Z, U)``
    represent ``X_{k+1}``; for y-free ``g`` this is ``E^g_k[X_{k+1}] - X_k``.
    On every branch
    ``X_k = X_{k+1} + g dt - Z dB - int U dmu~ - dN - dA`` where ``dN`` is the
    lattice-orthogonal part; the maximal residual of that identity is reported.

    Raises:
      ValueError: if ``dA`` has the wrong sign for ``kind`` (``"sub"`` or
        ``"super"``) beyond ``tol``.
    """
    lat = ge.lattice
    g = ge.generator
    dt = lat.dt
    sq = math.sqrt(dt)
    Zs, Us, dAs, res = [], [], [], []
    worst = 0.0
    for k in range(lat.steps):
        t = lat.grid.times[k]
        w = lat.marks.weights_at(t)
        E, Z, U, D = one_step(lat, k, X.values[k + 1])
        xk = X.values[k]
        gv = g(t, xk, Z[:, None], U, lat.marks)
        dA = E + gv * dt - xk
        amp = D - (Z * sq)[:, None]
        nxt = X.values[k + 1][lat.children[k]]
        comp = -dt * (U @ w)
        for gi in range(lat.m + 1):
            jump = comp + (U[:, gi - 1] if gi else 0.0)
            for si, s in enumerate((1.0, -1.0)):
                rec = nxt[:, gi, si] + gv * dt - Z * s * sq - jump - s * amp[:, gi] - dA
                worst = max(worst, float(np.max(np.abs(rec - xk))))
        Zs.append(Z)
        Us.append(U)
        dAs.append(dA)
        res.append(amp)
    if kind == "sub" and min(float(d.min()) for d in dAs) < -tol:
        raise ValueError("negative A-increment: the process is not a g-submartingale")
    if kind == "super" and max(float(d.max()) for d in dAs) > tol:
        raise ValueError("positive A-increment: the process is not a g-supermartingale")
    A_mean, A_min, A_max = _accumulate(lat, dAs)
    return DoobMeyer(Zs, Us, dAs, res, A_mean, A_min, A_max, worst, kind or "auto")


def _accumulate(lat: Lattice, incs: list):
    """Forward pass of ``A_{k+1} = A_k + dA_k`` keeping mean, min and max per node."""
    mean, lo, hi = [np.zeros(1)], [np.zeros(1)], [np.zeros(1)]
    mass = np.ones(1)
    for k in range(lat.steps):
        ch = lat.children[k]
        bp = lat.branch_probs(k)
        n1 = lat.n_states(k + 1)
        s = np.zeros(n1)
        mm = np.zeros(n1)
        l = np.full(n1, np.inf)
        h = np.full(n1, -np.inf)
        for gi in range(lat.m + 1):
            for si in range(2):
                idx = ch[:, gi, si]
                pm = mass * bp[gi, si]
                s += np.bincount(idx, weights=pm * (mean[-1] + incs[k]), minlength=n1)
                mm += np.bincount(idx, weights=pm, minlength=n1)
                np.minimum.at(l, idx, lo[-1] + incs[k])
                np.maximum.at(h, idx, hi[-1] + incs[k])
        mean.append(np.divide(s, mm, out=np.zeros(n1), where=mm > 0))
        lo.append(l)
        hi.append(h)
        mass = mm
    return mean, lo, hi


def reflected_solve(ge: GExpectation, obstacle: AdaptedProcess):
    """Reflected scheme with lower obstacle:
    ``Y_k = max(X_k, E_k[Y_{k+1}] + g(t_k, Y_k, Z_k, U_k) dt)``, ``Y_n = X_n``.

    Returns ``(Y, K)`` with ``K_k >= 0`` the pushing increment per node.
    For a g-supermartingale obstacle ``Y`` reproduces the obstacle.
    """
    lat = ge.lattice
    Y = [None] * (lat.steps + 1)
    K = [None] * lat.steps
    Y[-1] = obstacle.values[-1].copy()
    for k in range(lat.steps - 1, -1, -1):
        free = backward_from(lat, ge.generator, Y[k + 1], k + 1, start=k).Y[k]
        Y[k] = np.maximum(obstacle.values[k], free)
        K[k] = Y[k] - free
    return Y, K


def count_upcrossings(path, a: float, b: float) -> np.ndarray | int:
    """Completed passages from a value ``<= a`` to a later value ``>= b``.

    ``path`` is a 1-D sequence or an array ``(paths, times)``.
    """
    if not a < b:
        raise ValueError("need a < b")
    x = np.atleast_2d(np.asarray(path, dtype=float))
    armed = np.zeros(x.shape[0], bool)
    count = np.zeros(x.shape[0], dtype=np.int64)
    for j in range(x.shape[1]):
        done = armed & (x[:, j] >= b)
        count += done
        armed = (armed & ~done) | (~armed & (x[:, j] <= a))
    return int(count[0]) if np.ndim(path) == 1 else count


def expected_upcrossings(X: AdaptedProcess, a: float, b: float, probs: list | None = None) -> float:
    """Exact expected number of upcrossings by dynamic programming over (node, armed).

    ``probs[k]`` optionally replaces the lattice branch probabilities
    (shape ``(N_k, m + 1, 2)``), e.g. those of a measure change.
    """
    if not a < b:
        raise ValueError("need a < b")
    lat = X.lattice
    x0 = X.values[0]
    mass = np.zeros((1, 2))
    mass[0, int(x0[0] <= a)] = 1.0
    total = 0.0
    for k in range(lat.steps):
        ch = lat.children[k]
        p = probs[k] if probs is not None else np.broadcast_to(lat.branch_probs(k), ch.shape)
        x1 = X.values[k + 1]
        n1 = lat.n_states(k + 1)
        new = np.zeros((n1, 2))
        for gi in range(lat.m + 1):
            for si in range(2):
                idx = ch[:, gi, si]
                pm = p[:, gi, si]
                v = x1[idx]
                up = v >= b
                low = v <= a
                armed_mass = mass[:, 1] * pm
                idle_mass = mass[:, 0] * pm
                total += float(armed_mass[up].sum())
                to_armed = np.where(low, idle_mass, 0.0) + np.where(up, 0.0, armed_mass)
                to_idle = np.where(low, 0.0, idle_mass) + np.where(up, armed_mass, 0.0)
                new[:, 1] += np.bincount(idx, weights=to_armed, minlength=n1)
                new[:, 0] += np.bincount(idx, weights=to_idle, minlength=n1)
        mass = new
    return total


def upcrossing_bound(a: float, b: float, theta: float, gamma: float, x_sup: float) -> float:
    """``(e^{c ||X||} + e^{c |a|}) / (e^{c b} - e^{c a})`` with ``c = gamma theta / (1 - theta)``."""
    if not 0 < theta < 1:
        raise ValueError(f"theta must lie in (0, 1), got {theta}")
    if not a < b:
        raise ValueError("need a < b")
    c = gamma * theta / (1 - theta)
    return (math.exp(c * x_sup) + math.exp(c * abs(a))) / (math.exp(c * b) - math.exp(c * a))


@dataclass
class UpcrossingReport:
    a: float
    b: float
    theta: float
    expected_count: float
    standard_error: float
    bound: float
    margin: float
    gamma: float
    M: float
    beta: float
    J: float
    k_theta: float
    x_sup: float

    def to_dict(self):
        return asdict(self)


def _mc_upcrossings(X: AdaptedProcess, paths: PathSet, a, b):
    lat = X.lattice
    if paths.increments != "binomial" or paths.grid != lat.grid:
        raise ValueError("Monte Carlo upcrossings need binomial paths on the lattice grid")
    sq = math.sqrt(lat.dt)
    bidx = np.rint(paths.brownian()[:, :, 0] / sq).astype(np.int64)
    counts = paths.jump_counts()
    vals = np.empty(bidx.shape)
    for k in range(lat.steps + 1):
        table = {tuple(r): i for i, r in enumerate(lat.states[k].tolist())}
        keys = np.column_stack([bidx[:, k], counts[:, k]])
        idx = np.array([table[tuple(r)] for r in keys.tolist()])
        vals[:, k] = X.values[k][idx]
    c = count_upcrossings(vals, a, b).astype(float)
    return float(c.mean()), float(c.std(ddof=1) / math.sqrt(len(c))) if len(c) > 1 else math.nan


def verify_upcrossing_bound(X: AdaptedProcess, ge: GExpectation, a: float, b: float, theta: float,
                            profile: AssumptionProfile, paths: PathSet | None = None,
                            tol: float = 1e-10) -> UpcrossingReport:
    """Expected upcrossings of ``[a, b]`` against the explicit convex-case bound.

    Exact by dynamic programming unless ``paths`` (binomial, on the lattice
    grid) are given, in which case a Monte Carlo estimate with standard error
    is used and the margin allows 3 standard errors.

    Raises:
      ValueError: if ``theta`` is outside ``(0, 1)``.
    """
    if not 0 < theta < 1:
        raise ValueError(f"theta must lie in (0, 1), got {theta}")
    x_sup = X.sup_norm()
    T = ge.lattice.grid.horizon
    bound = upcrossing_bound(a, b, theta, profile.gamma, x_sup)
    if paths is None:
        count, se = expected_upcrossings(X, a, b), 0.0
    else:
        count, se = _mc_upcrossings(X, paths, a, b)
    J = apriori_bound(profile.gamma, profile.M, profile.beta, T, x_sup)
    k_theta = profile.gamma * max(profile.C / (1 - theta), profile.M * (2 - theta))
    margin = bound - count + 3 * se
    return UpcrossingReport(a, b, theta, count, se, bound, margin, profile.gamma, profile.M,
                            profile.beta, J, k_theta, x_sup)


def royer_case_audit(X: AdaptedProcess, ge: GExpectation, a: float, b: float, k: float = 0.0,
                     profile: AssumptionProfile | None = None) -> dict:
    """Inequality audit ``E^Q[U_a^b] <= (||X|| + 2k(J + 1)T + |a|) / (b - a)``.

    ``Q`` is the per-step subgradient measure of a positively homogeneous
    y-free driver at the representation coefficients of ``X``; under it
    ``X`` is a classical submartingale, so ``k = 0`` already works.
    """
    g = ge.generator
    if not g.positively_homogeneous or g.depends_on_y:
        raise ValueError("the audit needs a positively homogeneous y-free driver")
    lat = ge.lattice
    mus, vs = [], []
    for kk in range(lat.steps):
        _, Z, U, _ = one_step(lat, kk, X.values[kk + 1])
        mu, v = g.subgradient(lat.grid.times[kk], X.values[kk], Z[:, None], U, lat.marks)
        mus.append(np.asarray(mu)[:, 0])
        vs.append(np.asarray(v))
    shifted = girsanov_shift(lat, MeasureChange(mus, vs))
    count = expected_upcrossings(X, a, b, shifted.probs)
    x_sup = X.sup_norm()
    T = lat.grid.horizon
    J = apriori_bound(profile.gamma, profile.M, profile.beta, T, x_sup) if profile else 0.0
    bound = (x_sup + 2 * k * (J + 1) * T + abs(a)) / (b - a)
    return {"a": a, "b": b, "k": k, "expected_count_Q": count, "bound": bound, "margin": bound - count}
