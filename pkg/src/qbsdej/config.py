"""Experiment configuration (TOML) and deterministic report serialization.

Schema::

    [model]
    horizon = 1.0
    steps = 16
    seed = 7
    marks = [{size = 1.0, weight = 0.3}, {size = -0.5, weight = 0.2}]

    [generator]                 # or [generators.g1] / [generators.g2]
    kind = "entropic"           # entropic | linear | royer | zero | "custom:<expr>"
    theta = 1.0

    [task]
    payoff = "tanh(B)"          # sympy expression in B, N, c1..cm
    bound = 1.0                 # declared sup-norm of the payoff
"""

from __future__ import annotations

import hashlib
import math
import sys

import numpy as np

from .generators import Custom, Entropic, Generator, Linear, Royer, Zero
from .model import MarkSpace, TimeGrid
from .solver import TerminalCondition

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

__all__ = ["ConfigError", "load_config", "parse_model", "parse_generator", "parse_payoff", "dumps"]


class ConfigError(ValueError):
    """Malformed or incomplete experiment configuration."""


def load_config(path) -> tuple[dict, str]:
    """Parse a TOML file; returns ``(config, sha256 of the raw bytes)``."""
    try:
        raw = open(path, "rb").read()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    try:
        cfg = tomllib.loads(raw.decode("utf-8"))
    except (tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(f"invalid TOML: {exc}") from exc
    return cfg, hashlib.sha256(raw).hexdigest()


def _require(block: dict, key: str, where: str):
    if key not in block:
        raise ConfigError(f"missing '{key}' in [{where}]")
    return block[key]


def parse_model(cfg: dict) -> tuple[TimeGrid, MarkSpace, int]:
    model = cfg.get("model")
    if not isinstance(model, dict):
        raise ConfigError("missing [model] block")
    try:
        grid = TimeGrid(float(_require(model, "horizon", "model")), int(_require(model, "steps", "model")))
        marks_cfg = model.get("marks", [])
        sizes = [float(_require(mk, "size", "model.marks")) for mk in marks_cfg]
        weights = [float(_require(mk, "weight", "model.marks")) for mk in marks_cfg]
        marks = MarkSpace(sizes, weights)
        marks.check_thinning(grid)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"[model]: {exc}") from exc
    return grid, marks, int(model.get("seed", 0))


def parse_generator(block: dict, where: str = "generator") -> Generator:
    kind = str(_require(block, "kind", where))
    try:
        if kind == "entropic":
            if "gamma" in block:
                return Entropic.from_risk_aversion(float(block["gamma"]))
            return Entropic(float(block.get("theta", 1.0)))
        if kind == "linear":
            return Linear(block.get("a", 0.0), float(block.get("b", 0.0)))
        if kind == "royer":
            return Royer(float(_require(block, "eta", where)), float(block.get("c1", 0.0)))
        if kind == "zero":
            return Zero()
        if kind.startswith("custom:"):
            flags = {k: block[k] for k in ("convex", "concave", "positively_homogeneous", "lipschitz_y")
                     if k in block}
            return Custom(kind[len("custom:"):], block.get("jump"), **flags)
    except (TypeError, ValueError, SyntaxError) as exc:
        raise ConfigError(f"[{where}]: {exc}") from exc
    raise ConfigError(f"[{where}]: unknown generator kind {kind!r}")


def parse_generators(cfg: dict) -> dict:
    out = {}
    if "generator" in cfg:
        out["g"] = parse_generator(cfg["generator"])
    for name, block in cfg.get("generators", {}).items():
        out[name] = parse_generator(block, f"generators.{name}")
    if not out:
        raise ConfigError("no [generator] or [generators.*] block")
    return out


def parse_payoff(expr: str, bound, marks: MarkSpace) -> TerminalCondition:
    """Payoff ``f(B, N, c1, ..., cm)`` where ``N`` is the total jump count."""
    import sympy as sp

    if bound is None:
        raise ConfigError("payoff needs a declared 'bound'")
    names = ["B", "N"] + [f"c{j + 1}" for j in range(marks.m)]
    syms = sp.symbols(names, real=True)
    try:
        f = sp.sympify(expr, locals=dict(zip(names, syms)))
    except (sp.SympifyError, SyntaxError, TypeError) as exc:
        raise ConfigError(f"cannot parse payoff {expr!r}: {exc}") from exc
    extra = f.free_symbols - set(syms)
    if extra:
        raise ConfigError(f"payoff uses unknown symbols {sorted(map(str, extra))}")
    fn = sp.lambdify(syms, f, "numpy")

    def payoff(B, counts):
        cols = [counts[:, j] for j in range(counts.shape[1])]
        return fn(B, counts.sum(axis=1), *cols)

    return TerminalCondition(payoff, float(bound), label=str(f))


# ---------------------------------------------------------------------------
# deterministic JSON


def _fmt_float(x: float) -> str:
    if math.isnan(x):
        return '"nan"'
    if math.isinf(x):
        return '"inf"' if x > 0 else '"-inf"'
    return "%.17g" % x


def dumps(obj, indent: int = 2, _level: int = 0) -> str:
    """JSON with sorted keys and 17-significant-digit floats (non-finite as strings)."""
    pad = " " * (indent * (_level + 1))
    end = " " * (indent * _level)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{_string(str(k))}: {dumps(obj[k], indent, _level + 1)}" for k in sorted(obj, key=str)]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        items = [pad + dumps(v, indent, _level + 1) for v in obj]
        return "[\n" + ",\n".join(items) + "\n" + end + "]"
    if isinstance(obj, np.ndarray):
        return dumps(obj.tolist(), indent, _level)
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _fmt_float(float(obj))
    if obj is None:
        return "null"
    return _string(str(obj))


def _string(s: str) -> str:
    import json

    return json.dumps(s, ensure_ascii=False)
