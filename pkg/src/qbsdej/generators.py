"""BSDEJ drivers g_t(y, z, u), convex conjugates and sampled assumption checks.

Shapes: ``y`` is ``(...)``, ``z`` is ``(..., d)`` and ``u`` is ``(..., m)``;
``u`` holds the values of a jump function at the marks. Pairings with ``u``
are taken in ``L^2(nu_t)``, i.e. ``<v, u>_t = sum_j w_j(t) v_j u_j``, so a
subgradient ``(mu, v)`` means ``dg/dz = mu`` and ``dg/du_j = w_j v_j``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy.special import xlogy

from .model import MarkSpace

__all__ = [
    "ConvergenceError",
    "Generator",
    "Entropic",
    "Linear",
    "Royer",
    "Zero",
    "FunctionGenerator",
    "Custom",
    "entropic_generator",
    "linear_generator",
    "royer_generator",
    "zero_generator",
    "custom_generator",
    "j_functional",
    "legendre_transform",
    "AssumptionProfile",
    "CheckResult",
    "ValidationReport",
    "validate_assumptions",
]

_EXP_GUARD = 700.0


class ConvergenceError(RuntimeError):
    """Iterative routine stopped before reaching its tolerance."""


def _sq(z):
    z = np.asarray(z, dtype=float)
    return np.sum(z * z, axis=-1)


def j_functional(t: float, u, marks: MarkSpace) -> np.ndarray:
    """``j_t(u) = sum_j w_j(t) (exp(u_j) - 1 - u_j)``, always >= 0.

    Raises:
      OverflowError: if some ``u_j > 700``.
    """
    u = np.asarray(u, dtype=float)
    if np.any(u > _EXP_GUARD):
        raise OverflowError(f"j_functional: u = {np.max(u):.6g} exceeds the exp guard {_EXP_GUARD}")
    w = marks.weights_at(t)
    # expm1(u) - u loses digits near 0; the series keeps it nonnegative there.
    small = np.abs(u) < 1e-4
    body = np.where(small, u * u / 2 * (1 + u / 3), np.expm1(u) - u)
    return body @ w


class Generator:
    """Driver ``g_t(y, z, u)`` with structural flags.

    Subclasses implement :meth:`__call__`; :meth:`subgradient` and
    :meth:`conjugate` are optional. ``conjugate`` returning ``None`` means
    there is no closed form and :func:`legendre_transform` falls back to
    numeric maximization.
    """

    name = "generator"
    depends_on_y = False
    convex = False
    concave = False
    positively_homogeneous = False
    differentiable = False
    lipschitz_y = 0.0

    def __call__(self, t, y, z, u, marks: MarkSpace):
        raise NotImplementedError

    def subgradient(self, t, y, z, u, marks: MarkSpace):
        """Return ``(mu, v)`` with ``mu ~ (..., d)`` and ``v ~ (..., m)``."""
        return _fd_subgradient(self, t, y, z, u, marks)

    def conjugate(self, t, mu, v, marks: MarkSpace):
        return None

    def params(self) -> dict:
        return {}

    def describe(self) -> dict:
        return {
            "name": self.name,
            "params": self.params(),
            "flags": {
                "depends_on_y": self.depends_on_y,
                "convex_in_zu": self.convex,
                "concave_in_zu": self.concave,
                "positively_homogeneous": self.positively_homogeneous,
                "differentiable": self.differentiable,
            },
        }

    def __repr__(self):
        args = ", ".join(f"{k}={v!r}" for k, v in self.params().items())
        return f"{type(self).__name__}({args})"


def _fd_subgradient(g, t, y, z, u, marks, h=1e-5):
    """Central differences; the u-part is divided by ``w_j`` (zero where ``w_j = 0``)."""
    z = np.asarray(z, dtype=float)
    u = np.asarray(u, dtype=float)
    y = np.asarray(y, dtype=float)
    mu = np.empty_like(z)
    for i in range(z.shape[-1]):
        e = np.zeros(z.shape[-1])
        e[i] = h
        mu[..., i] = (g(t, y, z + e, u, marks) - g(t, y, z - e, u, marks)) / (2 * h)
    w = marks.weights_at(t)
    v = np.zeros_like(u)
    for j in range(u.shape[-1]):
        if w[j] <= 0:
            continue
        e = np.zeros(u.shape[-1])
        e[j] = h
        v[..., j] = (g(t, y, z, u + e, marks) - g(t, y, z, u - e, marks)) / (2 * h * w[j])
    return mu, v


class Entropic(Generator):
    """``|z|^2 / (2 theta) + theta j_t(u / theta)`` (risk tolerance ``theta``)."""

    name = "entropic"
    convex = True
    differentiable = True

    def __init__(self, theta: float):
        if not theta > 0:
            raise ValueError(f"entropic risk tolerance must be positive, got {theta}")
        self.theta = float(theta)

    @classmethod
    def from_risk_aversion(cls, gamma: float) -> "Entropic":
        """The ``gamma/2 |z|^2 + j(gamma u)/gamma`` parametrization, i.e. ``theta = 1/gamma``."""
        return cls(1.0 / gamma)

    def __call__(self, t, y, z, u, marks):
        th = self.theta
        return _sq(z) / (2 * th) + th * j_functional(t, np.asarray(u, dtype=float) / th, marks)

    def subgradient(self, t, y, z, u, marks):
        return np.asarray(z, dtype=float) / self.theta, np.expm1(np.asarray(u, dtype=float) / self.theta)

    def conjugate(self, t, mu, v, marks):
        th = self.theta
        v = np.asarray(v, dtype=float)
        w = marks.weights_at(t)
        active = w > 0
        bad = np.any((v < -1) & active, axis=-1)
        one = 1.0 + np.where(active, v, 0.0)
        jump = (xlogy(one, one) - (one - 1.0)) @ w
        val = th * _sq(mu) / 2 + th * jump
        return np.where(bad, np.inf, val)

    def params(self):
        return {"theta": self.theta}


class Linear(Generator):
    """``a z + b sum_j w_j (1 /\\ |x_j|) u_j``."""

    name = "linear"
    convex = True
    concave = True
    positively_homogeneous = True
    differentiable = True

    def __init__(self, a=0.0, b: float = 0.0, delta: float = 1e-12):
        if b < -1.0 + delta:
            raise ValueError(f"linear generator needs b >= -1 + delta, got b={b}")
        self.a = np.atleast_1d(np.asarray(a, dtype=float))
        self.b = float(b)

    def __call__(self, t, y, z, u, marks):
        w = marks.weights_at(t) * marks.kernel
        return np.asarray(z, dtype=float) @ self.a + self.b * (np.asarray(u, dtype=float) @ w)

    def subgradient(self, t, y, z, u, marks):
        z = np.asarray(z, dtype=float)
        u = np.asarray(u, dtype=float)
        return np.broadcast_to(self.a, z.shape).copy(), np.broadcast_to(self.b * marks.kernel, u.shape).copy()

    def conjugate(self, t, mu, v, marks, tol=1e-12):
        mu = np.asarray(mu, dtype=float)
        v = np.asarray(v, dtype=float)
        active = marks.weights_at(t) > 0
        ok = np.all(np.abs(mu - self.a) <= tol * (1 + np.abs(self.a)), axis=-1)
        target = self.b * marks.kernel
        ok &= np.all((np.abs(v - target) <= tol * (1 + np.abs(target))) | ~active, axis=-1)
        return np.where(ok, 0.0, np.inf)

    def params(self):
        a = self.a.tolist()
        return {"a": a[0] if len(a) == 1 else a, "b": self.b}


class Royer(Generator):
    """``eta |z| + sum_j w_j (1 /\\ |x_j|) (eta u_j^+ - C1 u_j^-)``."""

    name = "royer"
    convex = True
    positively_homogeneous = True

    def __init__(self, eta: float, c1: float):
        if not eta > 0:
            raise ValueError(f"eta must be positive, got {eta}")
        if not -1.0 < c1 <= 0.0:
            raise ValueError(f"C1 must lie in (-1, 0], got {c1}")
        self.eta = float(eta)
        self.c1 = float(c1)

    def __call__(self, t, y, z, u, marks):
        u = np.asarray(u, dtype=float)
        w = marks.weights_at(t) * marks.kernel
        jump = self.eta * np.maximum(u, 0.0) - self.c1 * np.maximum(-u, 0.0)
        return self.eta * np.sqrt(_sq(z)) + jump @ w

    def subgradient(self, t, y, z, u, marks):
        z = np.asarray(z, dtype=float)
        u = np.asarray(u, dtype=float)
        nz = np.sqrt(_sq(z))[..., None]
        mu = np.where(nz > 0, self.eta * z / np.where(nz > 0, nz, 1.0), 0.0)
        # any point of [C1, eta] works at u = 0; pick the midpoint
        slope = np.where(u > 0, self.eta, np.where(u < 0, self.c1, 0.5 * (self.eta + self.c1)))
        return mu, slope * marks.kernel

    def conjugate(self, t, mu, v, marks, tol=1e-12):
        mu = np.asarray(mu, dtype=float)
        v = np.asarray(v, dtype=float)
        k = marks.kernel
        active = marks.weights_at(t) > 0
        ok = np.sqrt(_sq(mu)) <= self.eta + tol
        inside = (v >= self.c1 * k - tol) & (v <= self.eta * k + tol)
        ok &= np.all(inside | ~active, axis=-1)
        return np.where(ok, 0.0, np.inf)

    def params(self):
        return {"eta": self.eta, "c1": self.c1}


class Zero(Linear):
    name = "zero"

    def __init__(self):
        super().__init__(0.0, 0.0)

    def params(self):
        return {}


class FunctionGenerator(Generator):
    """Wrap a vectorized function ``f(t, y, z, u, marks)`` as a generator."""

    name = "callable"

    def __init__(self, fn: Callable, *, depends_on_y=False, convex=False, concave=False,
                 positively_homogeneous=False, lipschitz_y=0.0, label="callable"):
        self.fn = fn
        self.depends_on_y = depends_on_y
        self.convex = convex
        self.concave = concave
        self.positively_homogeneous = positively_homogeneous
        self.lipschitz_y = float(lipschitz_y)
        self.label = label

    def __call__(self, t, y, z, u, marks):
        y = np.asarray(y, dtype=float)
        z = np.asarray(z, dtype=float)
        u = np.asarray(u, dtype=float)
        out = self.fn(t, y, z, u, marks)
        shape = np.broadcast_shapes(y.shape, z.shape[:-1], u.shape[:-1])
        return np.broadcast_to(np.asarray(out, dtype=float), shape)

    def params(self):
        return {"label": self.label}


class Custom(FunctionGenerator):
    """Generator from a sympy expression.

    ``g = f(t, y, z) + sum_j w_j(t) h(u_j, x_j)`` where ``expr`` gives ``f``
    (``z`` is the scalar Brownian coefficient) and the optional ``jump``
    expression gives ``h``. Structural flags are declared by the caller.
    """

    name = "custom"

    def __init__(self, expr: str, jump: str | None = None, **flags):
        import sympy as sp

        t, y, z, u, x = sp.symbols("t y z u x", real=True)
        allowed = {"t": t, "y": y, "z": z, "u": u, "x": x}
        f = sp.sympify(expr, locals=allowed)
        extra = f.free_symbols - {t, y, z}
        if extra:
            raise ValueError(f"custom generator: unknown symbols {sorted(map(str, extra))}")
        h = sp.sympify(jump, locals=allowed) if jump else sp.Integer(0)
        extra = h.free_symbols - {u, x}
        if extra:
            raise ValueError(f"custom jump integrand: unknown symbols {sorted(map(str, extra))}")
        if y in f.free_symbols:
            flags.setdefault("depends_on_y", True)
            if not flags.get("lipschitz_y"):
                raise ValueError("custom generator depends on y: declare lipschitz_y")
        f_num = sp.lambdify((t, y, z), f, "numpy")
        h_num = sp.lambdify((u, x), h, "numpy")
        self.expr = str(f)
        self.jump = str(h) if jump else None

        def fn(tt, yy, zz, uu, marks):
            base = f_num(tt, yy, zz[..., 0])
            if marks.m == 0 or not jump:
                return base
            xs = np.asarray(marks.sizes)
            return base + np.asarray(h_num(uu, xs), dtype=float) @ marks.weights_at(tt)

        super().__init__(fn, label=self.expr, **flags)

    def params(self):
        p = {"expr": self.expr}
        if self.jump:
            p["jump"] = self.jump
        return p


def entropic_generator(theta: float) -> Entropic:
    return Entropic(theta)


def linear_generator(a, b: float, delta: float = 1e-12) -> Linear:
    return Linear(a, b, delta)


def royer_generator(eta: float, c1: float) -> Royer:
    return Royer(eta, c1)


def zero_generator() -> Zero:
    return Zero()


def custom_generator(expr: str, jump: str | None = None, **flags) -> Custom:
    return Custom(expr, jump, **flags)


def legendre_transform(g: Generator, t: float, mu, v, marks: MarkSpace, *, y: float = 0.0,
                       method: str = "auto", tol: float = 1e-8, max_iter: int = 10_000) -> float:
    """``G_t(mu, v) = sup_{z,u} { mu.z + <v, u>_t - g_t(y, z, u) }``.

    Closed forms are used for built-ins unless ``method="numeric"``; the
    numeric route is a backtracking gradient ascent started at the origin.

    Returns:
      The conjugate value, or ``inf`` when the supremum is unbounded.

    Raises:
      ConvergenceError: if the ascent stalls before ``tol`` on the gradient norm.
    """
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    v = np.atleast_1d(np.asarray(v, dtype=float)) if marks.m else np.zeros(0)
    if method in ("auto", "closed"):
        val = g.conjugate(t, mu, v, marks)
        if val is not None:
            return float(val)
        if method == "closed":
            raise ValueError(f"{g!r} has no closed-form conjugate")
    if not g.convex:
        raise ValueError("legendre_transform requires a generator convex in (z, u)")
    w = marks.weights_at(t)
    d, m = mu.size, v.size
    active = np.concatenate([np.ones(d, bool), w > 0])
    # Precondition the u-block by 1/w so marks with tiny mass do not stall the ascent.
    scale = np.concatenate([np.ones(d), np.where(w > 0, 1.0 / np.where(w > 0, w, 1.0), 0.0)])

    def phi(x):
        z, u = x[:d], x[d:]
        try:
            return float(mu @ z + (w * v) @ u - g(t, y, z, u, marks))
        except OverflowError:
            return -np.inf

    def grad(x):
        z, u = x[:d], x[d:]
        gm, gv = g.subgradient(t, y, z, u, marks)
        return np.concatenate([mu - np.asarray(gm).reshape(d), w * (v - np.asarray(gv).reshape(m))]) * active

    x = np.zeros(d + m)
    f = phi(x)
    step = 1.0
    prev = None
    for _ in range(max_iter):
        gr = grad(x)
        gnorm = float(np.linalg.norm(gr))
        if gnorm <= tol:
            return f
        direction = gr * scale
        slope = float(gr @ direction)
        if prev is not None:
            # Barzilai-Borwein trial step; the backtracking below keeps ascent.
            s_vec, y_vec = x - prev[0], (gr - prev[1]) * scale
            curv = -float(s_vec @ y_vec)
            if curv > 0:
                step = float(s_vec @ s_vec) / curv
            else:
                step *= 2.0
        prev = (x, gr)
        while True:
            cand = x + step * direction
            fc = phi(cand)
            if np.isfinite(fc) and fc >= f + 1e-4 * step * slope:
                break
            step *= 0.5
            if step < 1e-300:
                raise ConvergenceError(f"line search failed at gradient norm {gnorm:.3e}")
        x, f = cand, fc
        if np.linalg.norm(x) > 1e8 or f > 1e300:
            return math.inf
    raise ConvergenceError(f"legendre_transform: no convergence in {max_iter} iterations "
                           f"(gradient norm {gnorm:.3e})")


@dataclass(frozen=True)
class AssumptionProfile:
    """Growth and regularity constants claimed for a generator.

    ``M`` bounds ``|g(0,0,0)| + alpha``; ``beta``, ``gamma`` are the growth
    weights; ``C`` the Lipschitz constant in ``y``; ``royer`` an optional
    ``(C1, C2, delta)`` with ``C1 >= -1 + delta``.
    """

    M: float = 0.0
    beta: float = 0.0
    gamma: float = 1.0
    C: float = 0.0
    royer: tuple | None = None

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if self.beta < 0 or self.M < 0 or self.C < 0:
            raise ValueError("M, beta and C must be nonnegative")
        if self.royer is not None:
            c1, c2, delta = self.royer
            if not delta > 0 or c1 < -1 + delta or c2 < c1:
                raise ValueError(f"invalid Royer constants {self.royer}")

    @classmethod
    def for_entropic(cls, theta: float) -> "AssumptionProfile":
        return cls(M=0.0, beta=0.0, gamma=1.0 / theta, C=0.0)


@dataclass
class CheckResult:
    name: str
    applicable: bool
    passed: bool
    max_violation: float
    samples: int
    worst_point: dict = field(default_factory=dict)


@dataclass
class ValidationReport:
    generator: dict
    checks: list

    def __getitem__(self, name) -> CheckResult:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks if c.applicable)

    def to_dict(self):
        return {"generator": self.generator, "checks": [asdict(c) for c in self.checks]}

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


def _summarize(name, applicable, viol, samples, points, tol):
    viol = np.where(np.isnan(viol), np.inf, viol)
    i = int(np.argmax(viol))
    worst = {k: np.asarray(p[i]).tolist() for k, p in points.items()}
    mv = float(max(viol[i], 0.0))
    return CheckResult(name, applicable, bool(mv <= tol), mv, samples, worst)


def validate_assumptions(g: Generator, profile: AssumptionProfile, marks: MarkSpace,
                         samples: int = 1000, seed: int = 0, *, horizon: float = 1.0,
                         y_range: float = 5.0, u_range: float = 2.0,
                         tol: float = 1e-9) -> ValidationReport:
    """Sampled checks of growth, Lipschitz-in-y, convexity, homogeneity and Royer bounds.

    The z-samples extend to ``10 max(gamma, 1/gamma)`` so super-quadratic
    drivers are caught. Failures are report entries, never exceptions.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    rng = np.random.default_rng(seed)
    m = marks.m
    gam = profile.gamma
    zmax = 10.0 * max(gam, 1.0 / gam)
    umax = min(u_range, 0.9 * _EXP_GUARD / gam)
    n = samples
    t = rng.uniform(0, horizon, n)

    def draw():
        return (rng.uniform(-y_range, y_range, n), rng.uniform(-zmax, zmax, (n, 1)),
                rng.uniform(-umax, umax, (n, m)))

    y, z, u = draw()
    y2, z2, u2 = draw()

    def G(i, yy, zz, uu):
        return float(g(t[i], yy, zz, uu, marks))

    def rows(fn):
        return np.array([fn(i) for i in range(n)])

    zero_z, zero_u = np.zeros(1), np.zeros(m)
    checks = []
    pts = {"t": t, "y": y, "z": z, "u": u}

    # growth sandwich around g(t, 0, 0, 0)
    def growth(i):
        w = marks.weights_at(t[i])
        g0 = G(i, 0.0, zero_z, zero_u)
        val = G(i, y[i], z[i], u[i]) - g0
        env = profile.M + profile.beta * abs(y[i]) + gam / 2 * float(z[i] @ z[i])
        up = env + float(_jw(gam * u[i], w)) / gam
        lo = -env - float(_jw(-gam * u[i], w)) / gam
        scale = 1.0 + abs(up) + abs(lo)
        return max(val - up, lo - val) / scale

    checks.append(_summarize("growth", True, rows(growth), n, pts, tol))

    def lip(i):
        if y[i] == y2[i]:
            return 0.0
        diff = abs(G(i, y[i], z[i], u[i]) - G(i, y2[i], z[i], u[i]))
        return diff / abs(y[i] - y2[i]) - profile.C

    checks.append(_summarize("lipschitz_y", True, rows(lip), n, pts, tol))

    def midpoint(sign):
        def f(i):
            a = G(i, y[i], z[i], u[i])
            b = G(i, y[i], z2[i], u2[i])
            c = G(i, y[i], (z[i] + z2[i]) / 2, (u[i] + u2[i]) / 2)
            return sign * (c - (a + b) / 2) / (1 + abs(a) + abs(b))
        return f

    checks.append(_summarize("convexity", g.convex, rows(midpoint(1.0)), n, pts, tol))
    checks.append(_summarize("concavity", g.concave, rows(midpoint(-1.0)), n, pts, tol))

    lam = rng.uniform(0.1, 3.0, n)

    def homog(i):
        a = G(i, y[i], lam[i] * z[i], lam[i] * u[i])
        b = lam[i] * G(i, y[i], z[i], u[i])
        return abs(a - b) / (1 + abs(a) + abs(b))

    checks.append(_summarize("homogeneity", g.positively_homogeneous, rows(homog), n, pts, tol))

    if profile.royer is not None:
        c1, c2, _ = profile.royer

        def royer(i):
            w = marks.weights_at(t[i]) * marks.kernel
            d = u[i] - u2[i]
            diff = G(i, y[i], z[i], u[i]) - G(i, y[i], z[i], u2[i])
            bound = float(np.maximum(c1 * d, c2 * d) @ w)
            return (diff - bound) / (1 + abs(diff))

        checks.append(_summarize("royer", True, rows(royer), n, pts, tol))
    return ValidationReport(g.describe(), checks)


def _jw(u, w):
    return (np.expm1(u) - u) @ w
