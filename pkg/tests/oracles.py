"""Independent reference computations used as test oracles.

Everything here enumerates raw branch sequences directly instead of going
through the recombining lattice, so it shares no indexing code with the
package.
"""

import itertools
import math

import numpy as np


def enumerate_paths(n, weights, dt):
    """Yield ``(prob, signs, groups)`` for every branch sequence of ``n`` steps.

    ``groups[k]`` is 0 for no jump, ``j + 1`` for a jump of mark ``j``.
    Time-constant weights only.
    """
    m = len(weights)
    lam = sum(weights)
    gp = [1.0 - lam * dt] + [w * dt for w in weights]
    for seq in itertools.product(range(2 * (m + 1)), repeat=n):
        prob = 1.0
        signs, groups = [], []
        for br in seq:
            g, s = divmod(br, 2)
            prob *= gp[g] / 2
            signs.append(1 - 2 * s)
            groups.append(g)
        yield prob, signs, groups


def terminal_distribution(n, weights, dt):
    """``{(b, c_1..c_m): probability}`` at the horizon."""
    m = len(weights)
    out = {}
    for prob, signs, groups in enumerate_paths(n, weights, dt):
        key = (sum(signs),) + tuple(groups.count(j + 1) for j in range(m))
        out[key] = out.get(key, 0.0) + prob
    return out


def state_path(signs, groups, m):
    """Sequence of lattice states ``(b, c...)`` visited, including the root."""
    b = 0
    c = [0] * m
    out = [(0,) + tuple(c)]
    for s, g in zip(signs, groups):
        b += s
        if g:
            c[g - 1] += 1
        out.append((b,) + tuple(c))
    return out


def upcrossings(seq, a, b):
    """Plain-python upcrossing count."""
    count, armed = 0, False
    for x in seq:
        if not armed and x <= a:
            armed = True
        elif armed and x >= b:
            count += 1
            armed = False
    return count


def gaussian_expectation(f, T, nodes=200):
    """``E[f(B_T)]`` by Gauss-Hermite quadrature."""
    x, w = np.polynomial.hermite_e.hermegauss(nodes)
    return float(w @ f(math.sqrt(T) * x) / math.sqrt(2 * math.pi))


def binomial_expectation(f, n, T):
    """``E[f(B_n)]`` for the symmetric +-sqrt(dt) walk, summed over the binomial law."""
    sq = math.sqrt(T / n)
    k = np.arange(n + 1)
    logp = np.array([math.lgamma(n + 1) - math.lgamma(i + 1) - math.lgamma(n - i + 1) for i in k]) - n * math.log(2)
    return float(np.exp(logp) @ f((2 * k - n) * sq))
