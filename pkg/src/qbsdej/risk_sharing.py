"""Inf-convolution of drivers and the optimal risk transfer on the lattice."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .generators import ConvergenceError, Entropic, Generator, Linear
from .gexpectation import GExpectation
from .model import Lattice, MarkSpace
from .solver import LatticeSolution, TerminalCondition, backward_from, fmt, one_step

__all__ = [
    "InfConvolutionError",
    "InfConvolution",
    "infconv_generator",
    "optimal_split",
    "check_strong_convexity",
    "RiskTransfer",
    "build_transfer",
    "lq_transfer_formula",
    "suboptimality_audit",
]


class InfConvolutionError(ValueError):
    """``(g1 [] g2)(t, 0, 0) = -inf``: the inf-convolution is not proper."""


def _pair_kind(g1, g2):
    if isinstance(g1, Entropic) and isinstance(g2, Entropic):
        return "entropic_entropic"
    if isinstance(g1, Entropic) and type(g2) is Linear:
        return "entropic_linear"
    if type(g1) is Linear and isinstance(g2, Entropic):
        return "linear_entropic"
    return None


class InfConvolution(Generator):
    """``(g1 [] g2)(t, z, u) = inf_{z1, u1} g1(z1, u1) + g2(z - z1, u - u1)``.

    Closed forms for entropic/entropic and entropic/linear pairs (either
    order); numeric minimization otherwise.
    """

    name = "infconv"
    convex = True

    def __init__(self, g1: Generator, g2: Generator, tol: float = 1e-8):
        if g1.depends_on_y or g2.depends_on_y:
            raise ValueError("inf-convolution is defined for y-free drivers")
        if not (g1.convex and g2.convex):
            raise ValueError("inf-convolution needs two convex drivers")
        self.g1, self.g2 = g1, g2
        self.kind = _pair_kind(g1, g2)
        self.tol = tol
        self.positively_homogeneous = g1.positively_homogeneous and g2.positively_homogeneous
        self.differentiable = self.kind is not None

    def split(self, t, z, u, marks: MarkSpace):
        """Minimizing ``(z1, u1, z2, u2)``; ``z ~ (..., d)``, ``u ~ (..., m)``."""
        z = np.asarray(z, dtype=float)
        u = np.asarray(u, dtype=float)
        if self.kind == "entropic_entropic":
            c = self.g1.theta / (self.g1.theta + self.g2.theta)
            return c * z, c * u, (1 - c) * z, (1 - c) * u
        if self.kind in ("entropic_linear", "linear_entropic"):
            ent, lin = (self.g1, self.g2) if self.kind == "entropic_linear" else (self.g2, self.g1)
            ze = np.broadcast_to(lin.a * ent.theta, z.shape).copy()
            ue = np.broadcast_to(ent.theta * np.log1p(lin.b * marks.kernel), u.shape).copy()
            if self.kind == "entropic_linear":
                return ze, ue, z - ze, u - ue
            return z - ze, u - ue, ze, ue
        return self._numeric_split(t, z, u, marks)

    def _numeric_split(self, t, z, u, marks):
        flat_z = z.reshape(-1, z.shape[-1])
        flat_u = u.reshape(len(flat_z), marks.m)
        z1 = np.empty_like(flat_z)
        u1 = np.empty_like(flat_u)
        for i in range(len(flat_z)):
            z1[i], u1[i] = self._minimize(t, flat_z[i], flat_u[i], marks)
        z1, u1 = z1.reshape(z.shape), u1.reshape(u.shape)
        return z1, u1, z - z1, u - u1

    def _minimize(self, t, z, u, marks):
        d = z.size
        w = marks.weights_at(t)
        g1, g2 = self.g1, self.g2

        def obj(x):
            z1, u1 = x[:d], x[d:]
            return float(g1(t, 0.0, z1, u1, marks) + g2(t, 0.0, z - z1, u - u1, marks))

        def jac(x):
            z1, u1 = x[:d], x[d:]
            m1, v1 = g1.subgradient(t, 0.0, z1, u1, marks)
            m2, v2 = g2.subgradient(t, 0.0, z - z1, u - u1, marks)
            return np.concatenate([np.ravel(m1) - np.ravel(m2), w * (np.ravel(v1) - np.ravel(v2))])

        x0 = np.concatenate([z, u]) / 2
        with np.errstate(all="ignore"):  # unbounded objectives overflow on purpose
            res = minimize(obj, x0, jac=jac, method="BFGS", options={"gtol": self.tol, "maxiter": 10_000})
        if not np.isfinite(res.fun) or res.fun < -1e12 or np.linalg.norm(res.x) > 1e8:
            raise InfConvolutionError(f"inf-convolution is unbounded below at t={t}, z={z}, u={u}")
        if not res.success and np.linalg.norm(jac(res.x)) > 1e-6:
            alt = minimize(obj, res.x, method="Nelder-Mead",
                           options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 20_000})
            if not alt.success:
                raise ConvergenceError(f"optimal split did not converge at t={t}: {res.message}")
            res = alt
        return res.x[:d], res.x[d:]

    def __call__(self, t, y, z, u, marks):
        if self.kind == "entropic_entropic":
            return Entropic(self.g1.theta + self.g2.theta)(t, y, z, u, marks)
        if self.kind is not None:
            ent, lin = (self.g1, self.g2) if self.kind == "entropic_linear" else (self.g2, self.g1)
            th = ent.theta
            a = lin.a
            bk = lin.b * marks.kernel
            w = marks.weights_at(t)
            const = -th * float(a @ a) / 2 + th * float((bk - (1 + bk) * np.log1p(bk)) @ w)
            return np.asarray(z, dtype=float) @ a + (np.asarray(u, dtype=float) @ (w * bk)) + const
        z1, u1, z2, u2 = self.split(t, z, u, marks)
        return self.g1(t, y, z1, u1, marks) + self.g2(t, y, z2, u2, marks)

    def subgradient(self, t, y, z, u, marks):
        z1, u1, _, _ = self.split(t, z, u, marks)
        return self.g1.subgradient(t, y, z1, u1, marks)

    def conjugate(self, t, mu, v, marks):
        a = self.g1.conjugate(t, mu, v, marks)
        b = self.g2.conjugate(t, mu, v, marks)
        if a is None or b is None:
            return None
        return a + b

    def share_z(self, t, z, u, marks, h=1e-6):
        """``rho = d z2 / d z``: agent 2's share of a marginal Brownian exposure."""
        if self.kind == "entropic_entropic":
            return np.full(np.shape(z)[:-1], self.g2.theta / (self.g1.theta + self.g2.theta))
        if self.kind == "entropic_linear":
            return np.ones(np.shape(z)[:-1])
        if self.kind == "linear_entropic":
            return np.zeros(np.shape(z)[:-1])
        z = np.asarray(z, dtype=float)
        _, _, zp, _ = self.split(t, z + h, u, marks)
        _, _, zm, _ = self.split(t, z - h, u, marks)
        return (zp - zm)[..., 0] / (2 * h)

    def check_proper(self, times, marks: MarkSpace) -> None:
        """Raise :class:`InfConvolutionError` unless ``(g1 [] g2)(t, 0, 0) > -inf`` on ``times``."""
        for t in times:
            val = float(self(t, 0.0, np.zeros(1), np.zeros(marks.m), marks))
            if not np.isfinite(val):
                raise InfConvolutionError(f"(g1 [] g2)(t, 0, 0) = {val} at t={t}")

    def params(self):
        return {"g1": self.g1.describe(), "g2": self.g2.describe()}


def infconv_generator(g1: Generator, g2: Generator, marks: MarkSpace | None = None,
                      times=(0.0,)) -> InfConvolution:
    """Inf-convolution of two convex y-free drivers.

    Raises:
      InfConvolutionError: if ``(g1 [] g2)(t, 0, 0) = -inf`` at one of ``times``.
    """
    h = InfConvolution(g1, g2)
    h.check_proper(times, marks if marks is not None else MarkSpace())
    return h


def optimal_split(g1: Generator, g2: Generator, t: float, z, u, marks: MarkSpace):
    """``(z1, u1, z2, u2)`` attaining the inf-convolution at ``(t, z, u)``."""
    z = np.atleast_1d(np.asarray(z, dtype=float))
    u = np.atleast_1d(np.asarray(u, dtype=float)) if marks.m else np.zeros(0)
    return InfConvolution(g1, g2).split(t, z, u, marks)


def check_strong_convexity(g: Generator, marks: MarkSpace, C: float = 1e-2, samples: int = 200,
                           seed: int = 0, horizon: float = 1.0, z_range: float = 5.0,
                           u_range: float = 2.0) -> float:
    """Max midpoint violation of ``g - C/2 (|z|^2 + ||u||^2_{L^2(nu)})`` over samples."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(samples):
        t = rng.uniform(0, horizon)
        w = marks.weights_at(t)
        z1, z2 = rng.uniform(-z_range, z_range, (2, 1))
        u1, u2 = rng.uniform(-u_range, u_range, (2, marks.m))

        def h(z, u):
            return float(g(t, 0.0, z, u, marks)) - C / 2 * (float(z @ z) + float((u * u) @ w))

        mid = h((z1 + z2) / 2, (u1 + u2) / 2) - (h(z1, u1) + h(z2, u2)) / 2
        worst = max(worst, mid)
    return worst


@dataclass
class RiskTransfer:
    """Output of :func:`build_transfer`.

    ``F1``, ``F2`` are terminal node values with ``F1 + F2 = xi``. ``splits[k]``
    holds ``(z1, u1, z2, u2)`` per node of slice ``k``.
    """

    combined: LatticeSolution
    F1: np.ndarray
    F2: np.ndarray
    xi: np.ndarray
    splits: list
    premium: float
    agent_values: tuple
    decomposition_residual: float
    decomposition_ok: bool
    path_spread: float
    g1: Generator = field(repr=False, default=None)
    g2: Generator = field(repr=False, default=None)

    @property
    def lattice(self) -> Lattice:
        return self.combined.lattice

    @property
    def combined_value(self) -> float:
        return self.combined.y0

    def shifted(self, m: float) -> "RiskTransfer":
        """The equally optimal transfer ``(F1 - m, F2 + m)``."""
        return RiskTransfer(self.combined, self.F1 - m, self.F2 + m, self.xi, self.splits,
                            self.premium + m, (self.agent_values[0] - m, self.agent_values[1] + m),
                            self.decomposition_residual, self.decomposition_ok, self.path_spread,
                            self.g1, self.g2)

    def split_csv(self) -> str:
        lat = self.lattice
        st = lat.states[lat.steps]
        head = ["state_id", "b"] + [f"c_{j + 1}" for j in range(lat.m)] + ["xi", "F1", "F2"]
        lines = [",".join(head)]
        for i in range(len(st)):
            row = [str(i)] + [str(int(x)) for x in st[i]] + [fmt(self.xi[i]), fmt(self.F1[i]), fmt(self.F2[i])]
            lines.append(",".join(row))
        return "\n".join(lines) + "\n"

    def report(self) -> dict:
        return {
            "combined_value": self.combined_value,
            "premium": self.premium,
            "agent_values": list(self.agent_values),
            "decomposition_residual": self.decomposition_residual,
            "decomposition_ok": self.decomposition_ok,
            "path_spread": self.path_spread,
        }


def build_transfer(lattice: Lattice, g1: Generator, g2: Generator, xi, *,
                   require_strong_convexity: bool = True, tol: float = 1e-9) -> RiskTransfer:
    """Solve under ``g1 [] g2``, split ``(Z, U)`` nodewise and integrate ``F2`` forward.

    ``F2`` increments on a branch are
    ``-g2(Z2, U2) dt + Z2 dB + int U2 dmu~ + rho dN`` where ``dN`` is the
    part of ``Y_{k+1} - E_k[Y_{k+1}]`` orthogonal to both noises on the
    lattice and ``rho = d z2 / d z``. The decomposition
    ``E^{1,2}_0 = E^{g1}_0(F1) + E^{g2}_0(F2)`` is re-solved and checked.

    Raises:
      ValueError: if ``g1`` fails the sampled strong-convexity check and
        ``require_strong_convexity`` is set.
    """
    marks = lattice.marks
    if require_strong_convexity:
        viol = check_strong_convexity(g1, marks, horizon=lattice.grid.horizon)
        if viol > 1e-10:
            raise ValueError(f"g1 is not strongly convex on samples (violation {viol:.3g}); "
                             "pass require_strong_convexity=False to override")
    h = InfConvolution(g1, g2)
    h.check_proper(lattice.grid.times[:-1], marks)
    xi_vals = xi.on_lattice(lattice) if isinstance(xi, TerminalCondition) else np.asarray(xi, dtype=float)
    sol = backward_from(lattice, h, xi_vals, lattice.steps)
    dt = lattice.dt
    sq = math.sqrt(dt)
    F = np.zeros(1)
    Fmin = np.zeros(1)
    Fmax = np.zeros(1)
    mass = np.ones(1)
    splits = []
    for k in range(lattice.steps):
        t = lattice.grid.times[k]
        w = marks.weights_at(t)
        _, Z, U, D = one_step(lattice, k, sol.Y[k + 1])
        z1, u1, z2, u2 = h.split(t, Z[:, None], U, marks)
        splits.append((z1[:, 0], u1, z2[:, 0], u2))
        rho = h.share_z(t, Z[:, None], U, marks)
        g2v = g2(t, 0.0, z2, u2, marks)
        comp = -dt * (u2 @ w)
        ch = lattice.children[k]
        bp = lattice.branch_probs(k)
        n_next = lattice.n_states(k + 1)
        newF = np.zeros(n_next)
        newmass = np.zeros(n_next)
        lo = np.full(n_next, np.inf)
        hi = np.full(n_next, -np.inf)
        for gi in range(lattice.m + 1):
            jump = comp + (u2[:, gi - 1] if gi else 0.0)
            for si, s in enumerate((1.0, -1.0)):
                resid = s * (D[:, gi] - Z * sq)
                incr = -g2v * dt + z2[:, 0] * s * sq + jump + rho * resid
                idx = ch[:, gi, si]
                pm = mass * bp[gi, si]
                newF += np.bincount(idx, weights=pm * (F + incr), minlength=n_next)
                newmass += np.bincount(idx, weights=pm, minlength=n_next)
                np.minimum.at(lo, idx, Fmin + incr)
                np.maximum.at(hi, idx, Fmax + incr)
        F = np.divide(newF, newmass, out=np.zeros(n_next), where=newmass > 0)
        mass, Fmin, Fmax = newmass, lo, hi
    spread = float(np.max(Fmax - Fmin)) if len(F) else 0.0
    F2 = F
    F1 = xi_vals - F2
    v1 = GExpectation(g1, lattice, cache=False).value(F1)
    v2 = GExpectation(g2, lattice, cache=False).value(F2)
    resid = abs(v1 + v2 - sol.y0)
    return RiskTransfer(sol, F1, F2, xi_vals, splits, v2, (v1, v2), resid,
                        bool(resid <= tol * max(1.0, abs(sol.y0))), spread, g1, g2)


def lq_transfer_formula(lattice: Lattice, gamma: float, alpha: float, beta: float, xi) -> np.ndarray:
    """Explicit entropic/linear transfer at every terminal node:

    ``xi + alpha^2 gamma T / 2 + gamma int sum_j w_j (beta k_j - ln(1 + beta k_j)) dt
    - alpha gamma B_T - gamma sum_j ln(1 + beta k_j) (N_j(T) - int w_j dt)``
    with ``k_j = 1 /\\ |x_j|``. Compensator integrals use the grid's left-point rule.
    """
    marks = lattice.marks
    n = lattice.steps
    dt = lattice.dt
    T = lattice.grid.horizon
    xi_vals = xi.on_lattice(lattice) if isinstance(xi, TerminalCondition) else np.asarray(xi, dtype=float)
    lk = np.log1p(beta * marks.kernel)
    cum_w = sum(marks.weights_at(t) for t in lattice.grid.times[:-1]) * dt if n else np.zeros(marks.m)
    drift = 0.5 * alpha ** 2 * gamma * T + gamma * float((beta * marks.kernel - lk) @ cum_w)
    B = lattice.brownian(n)
    N = lattice.counts(n)
    return xi_vals + drift - alpha * gamma * B - gamma * ((N - cum_w) @ lk)


def suboptimality_audit(rt: RiskTransfer, trials: int = 50, seed: int = 0, scale: float = 1.0) -> dict:
    """Compare ``E^{g1}(xi - F) + E^{g2}(F)`` with ``E^{1,2}_0`` over candidate transfers.

    Candidates: ``F = 0``, constant shifts of ``F2``, random bounded node
    payoffs and random perturbations of ``F2``.
    """
    lat = rt.lattice
    e1 = GExpectation(rt.g1, lat, cache=False)
    e2 = GExpectation(rt.g2, lat, cache=False)
    rng = np.random.default_rng(seed)
    base = rt.combined_value
    N = lat.n_states(lat.steps)
    cands = [("zero", np.zeros(N)), ("F2", rt.F2), ("F2+1", rt.F2 + 1.0), ("F2-0.5", rt.F2 - 0.5)]
    for i in range(trials):
        if i % 2 == 0:
            cands.append((f"random{i}", rng.uniform(-scale, scale, N)))
        else:
            cands.append((f"perturbed{i}", rt.F2 + rng.uniform(-scale, scale, N) * 0.2))
    rows = []
    for name, F in cands:
        total = e1.value(rt.xi - F) + e2.value(F)
        rows.append({"id": name, "total": total, "gap": total - base})
    opt_total = rows[1]["total"]
    return {
        "combined_value": base,
        "candidates": rows,
        "min_gap": min(r["gap"] for r in rows),
        "best_improvement_over_F2": max(opt_total - r["total"] for r in rows),
    }
