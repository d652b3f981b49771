"""Command-line experiment runner.

Usage::

    qbsdej <task> --config <file> [--out <dir>] [--seed <u64>] [--threads <k>]

Tasks: solve, properties, dual, infconv, doobmeyer, upcrossing, recover.
Every task writes ``<task>.json`` (plus CSV sidecars) into the output
directory. Exit status: 0 success, 2 configuration error, 3 numerical
failure, 4 property violation (reports are still written).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import __version__
from .config import ConfigError, dumps, load_config, parse_generators, parse_model, parse_payoff
from .decompositions import AdaptedProcess, classify_process, doob_meyer, verify_upcrossing_bound
from .duality import dual_report
from .generators import AssumptionProfile, ConvergenceError, Entropic, validate_assumptions
from .gexpectation import GExpectation, check_axioms, recover_generator
from .model import build_lattice, simulate_paths
from .risk_sharing import build_transfer, lq_transfer_formula, suboptimality_audit
from .solver import BasisSpec, bmo_diagnostics, fmt, solve_lattice, solve_lsmc

log = logging.getLogger("qbsdej")

TASKS = ("solve", "properties", "dual", "infconv", "doobmeyer", "upcrossing", "recover")
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_VIOLATION = 0, 2, 3, 4


class Context:
    def __init__(self, cfg, seed, threads):
        self.cfg = cfg
        self.grid, self.marks, model_seed = parse_model(cfg)
        self.seed = model_seed if seed is None else seed
        self.threads = threads
        self.task = cfg.get("task", {})
        self.generators = parse_generators(cfg)
        self._lattice = None

    @property
    def lattice(self):
        if self._lattice is None:
            self._lattice = build_lattice(self.grid, self.marks)
        return self._lattice

    def generator(self, name="g"):
        if name not in self.generators:
            raise ConfigError(f"task needs generator '{name}'")
        return self.generators[name]

    def payoff(self):
        if "payoff" not in self.task:
            raise ConfigError("missing 'payoff' in [task]")
        return parse_payoff(self.task["payoff"], self.task.get("bound"), self.marks)

    def profile(self, g):
        block = self.cfg.get("profile")
        if block is not None:
            royer = tuple(block["royer"]) if "royer" in block else None
            return AssumptionProfile(float(block.get("M", 0.0)), float(block.get("beta", 0.0)),
                                     float(block.get("gamma", 1.0)), float(block.get("C", 0.0)), royer)
        if isinstance(g, Entropic):
            return AssumptionProfile.for_entropic(g.theta)
        return None


def _solution_csv(sol):
    return sol.to_csv()


def task_solve(ctx: Context):
    g = ctx.generator()
    xi = ctx.payoff()
    backend = ctx.task.get("backend", "lattice")
    if backend == "lattice":
        sol = solve_lattice(ctx.lattice, g, xi)
        report = {
            "backend": "lattice",
            "y0": sol.y0,
            "consistency_residual": sol.consistency_residual(),
            "diagnostics": bmo_diagnostics(sol).to_dict(),
        }
        if isinstance(g, Entropic):
            p = ctx.lattice.node_probabilities()[-1]
            th = g.theta
            vals = xi.on_lattice(ctx.lattice)
            top = vals.max()
            oracle = top + th * np.log(p @ np.exp((vals - top) / th))
            report["oracle"] = float(oracle)
            report["oracle_gap"] = abs(sol.y0 - float(oracle))
        violation = report["consistency_residual"] > 1e-10
        return report, {"solution.csv": _solution_csv(sol)}, violation
    if backend == "lsmc":
        count = int(ctx.task.get("paths", 10_000))
        paths = simulate_paths(ctx.grid, ctx.marks, count, ctx.seed, dim=int(ctx.task.get("dim", 1)),
                               increments=ctx.task.get("increments", "gaussian"), threads=ctx.threads)
        basis = BasisSpec(ctx.task.get("basis", "polynomial"), int(ctx.task.get("degree", 2)),
                          bool(ctx.task.get("jump_counts", True)))
        res = solve_lsmc(paths, g, xi, basis)
        report = {"backend": "lsmc", "paths": count, "y0": res.y0, "y0_se": res.y0_se,
                  "y0_in_sample": res.y0_in_sample, "regression_residuals": res.residuals}
        return report, {}, False
    raise ConfigError(f"unknown backend {backend!r}")


def task_properties(ctx: Context):
    g = ctx.generator()
    tol = float(ctx.task.get("tol", 1e-9))
    trials = int(ctx.task.get("trials", 50))
    axioms = check_axioms(GExpectation(g, ctx.lattice), trials, ctx.seed)
    report = {"axioms": axioms.to_dict(), "tolerance": tol}
    violation = bool(axioms.violations(tol))
    profile = ctx.profile(g)
    if profile is not None:
        val = validate_assumptions(g, profile, ctx.marks, int(ctx.task.get("samples", 500)), ctx.seed,
                                   horizon=ctx.grid.horizon)
        report["assumptions"] = val.to_dict()
        violation |= not val.passed
    return report, {}, violation


def task_dual(ctx: Context):
    ge = GExpectation(ctx.generator(), ctx.lattice)
    rep = dual_report(ge, ctx.payoff(), int(ctx.task.get("candidates", 100)), ctx.seed)
    violation = rep["min_slack"] < -1e-8 or rep["fenchel_young_max"] > 1e-8
    return rep, {}, violation


def task_infconv(ctx: Context):
    g1, g2 = ctx.generator("g1"), ctx.generator("g2")
    xi = ctx.payoff()
    rt = build_transfer(ctx.lattice, g1, g2, xi,
                        require_strong_convexity=bool(ctx.task.get("require_strong_convexity", True)))
    if ctx.task.get("normalize") == "proportional" and isinstance(g1, Entropic) and isinstance(g2, Entropic):
        rt = rt.shifted(g2.theta * rt.combined_value / (g1.theta + g2.theta))
    audit = suboptimality_audit(rt, int(ctx.task.get("trials", 50)), ctx.seed)
    report = rt.report()
    report["audit"] = {"candidates": audit["candidates"], "min_gap": audit["min_gap"]}
    if isinstance(g1, Entropic) and type(g2).__name__ == "Linear":
        f = lq_transfer_formula(ctx.lattice, g1.theta, float(g2.a[0]), g2.b, xi)
        report["formula_residual"] = float(np.max(np.abs(rt.F2 - rt.premium + rt.combined_value - f)))
    violation = (not rt.decomposition_ok) or audit["min_gap"] < -1e-8
    return report, {"split.csv": rt.split_csv()}, violation


def _submartingale(ctx: Context):
    ge = GExpectation(ctx.generator(), ctx.lattice)
    sol = ge.solve(ctx.payoff())
    X = AdaptedProcess.from_solution(sol).plus_time(float(ctx.task.get("delta", 0.1)))
    return ge, X


def task_doobmeyer(ctx: Context):
    ge, X = _submartingale(ctx)
    cls = classify_process(X, ge)
    dm = doob_meyer(X, ge)
    lat = ctx.lattice
    rows = ["k,state_id,X,dA"]
    for k in range(lat.steps):
        for i, (x, a) in enumerate(zip(X.values[k], dm.dA[k])):
            rows.append(f"{k},{i},{fmt(x)},{fmt(a)}")
    report = {
        "classification": cls.to_dict(),
        "reconstruction_error": dm.reconstruction_error,
        "A_min": [float(a.min()) for a in dm.A_min],
        "A_max": [float(a.max()) for a in dm.A_max],
        "times": lat.grid.times.tolist(),
    }
    sign_bad = (cls.kind == "submartingale" and min(float(d.min()) for d in dm.dA) < -1e-9)
    violation = dm.reconstruction_error > 1e-9 or sign_bad
    return report, {"increments.csv": "\n".join(rows) + "\n"}, violation


def task_upcrossing(ctx: Context):
    ge, X = _submartingale(ctx)
    profile = ctx.profile(ge.generator)
    if profile is None:
        raise ConfigError("upcrossing needs a [profile] block for non-entropic drivers")
    cells = []
    for a in ctx.task.get("a", [-0.2]):
        for b in ctx.task.get("b", [0.2]):
            if not a < b:
                continue
            for th in ctx.task.get("theta", [0.5]):
                cells.append(verify_upcrossing_bound(X, ge, float(a), float(b), float(th), profile).to_dict())
    if not cells:
        raise ConfigError("no (a, b) pair with a < b")
    violation = any(c["margin"] < 0 for c in cells)
    return {"cells": cells}, {}, violation


def task_recover(ctx: Context):
    g = ctx.generator()
    ge = GExpectation(g, ctx.lattice)
    h = int(ctx.task.get("h", 1))
    rows = []
    for p in ctx.task.get("points", []):
        u0 = np.asarray(p.get("u0", [0.0] * ctx.marks.m), dtype=float)
        k = int(p.get("k", 0))
        slope = recover_generator(ge, float(p["y0"]), float(p["z0"]), u0, k, h)
        t = ctx.grid.times[k]
        val = float(g(t, float(p["y0"]), np.array([float(p["z0"])]), u0, ctx.marks))
        rows.append({"y0": p["y0"], "z0": p["z0"], "u0": u0.tolist(), "k": k, "slope": slope,
                     "generator": val, "abs_error": abs(slope - val)})
    if not rows:
        raise ConfigError("recover needs [[task.points]] entries")
    return {"h": h, "points": rows}, {}, False


RUNNERS = {
    "solve": task_solve,
    "properties": task_properties,
    "dual": task_dual,
    "infconv": task_infconv,
    "doobmeyer": task_doobmeyer,
    "upcrossing": task_upcrossing,
    "recover": task_recover,
}


def run(task: str, config_path, out_dir=".", seed=None, threads=1) -> int:
    """Run one experiment; returns the exit status."""
    try:
        cfg, digest = load_config(config_path)
        ctx = Context(cfg, seed, threads)
        report, sidecars, violation = RUNNERS[task](ctx)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (ArithmeticError, ConvergenceError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    except (ValueError, TypeError, KeyError) as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    report = {
        "metadata": {"config_sha256": digest, "seed": ctx.seed, "version": __version__, "task": task},
        "result": report,
        "property_violation": bool(violation),
    }
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, f"{task}.json"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps(report) + "\n")
    for name, text in sidecars.items():
        with open(os.path.join(out_dir, f"{task}_{name}"), "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    if violation:
        log.warning("property violation reported in %s.json", task)
        return EXIT_VIOLATION
    return EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="qbsdej", description="Quadratic BSDEJ experiments")
    parser.add_argument("task", choices=TASKS)
    parser.add_argument("--config", required=True)
    parser.add_argument("--out", default=".")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--threads", type=int, default=1)
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    return run(args.task, args.config, args.out, args.seed, args.threads)


if __name__ == "__main__":
    sys.exit(main())
