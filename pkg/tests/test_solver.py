import math

import numpy as np
import pytest

from oracles import enumerate_paths, gaussian_expectation, terminal_distribution
from qbsdej.generators import Custom, Entropic, FunctionGenerator, Linear, Zero
from qbsdej.model import MarkSpace, TimeGrid, build_lattice, simulate_paths
from qbsdej.solver import (BasisSpec, NumericalError, StepSizeError, TerminalCondition,
                           apriori_bound, bmo_diagnostics, solve_lattice, solve_lsmc)

TANH = TerminalCondition(lambda B, N: np.tanh(B), 1.0)


def _oracle_mean(n, weights, f):
    dt = 1.0 / n
    dist = terminal_distribution(n, weights, dt)
    return sum(p * f(b * math.sqrt(dt), np.array(c)) for (b, *c), p in dist.items())


def test_zero_driver_gives_expectation():
    w = [0.3, 0.2]
    lat = build_lattice(TimeGrid(1.0, 4), MarkSpace([-0.5, 1.0], w))
    xi = TerminalCondition(lambda B, N: np.sin(B) + 0.3 * N[:, 0] - 0.2 * N[:, 1] ** 2, 5.0)
    sol = solve_lattice(lat, Zero(), xi)
    oracle = _oracle_mean(4, w, lambda b, c: math.sin(b) + 0.3 * c[0] - 0.2 * c[1] ** 2)
    assert sol.y0 == pytest.approx(oracle, abs=1e-14)


def test_martingale_representation_for_separable_payoff():
    # xi = B + N_1 - 2 N_2 : the orthogonal residual vanishes and (Z, U) are constant
    lat = build_lattice(TimeGrid(1.0, 5), MarkSpace([-0.5, 1.0], [0.3, 0.2]))
    xi = TerminalCondition(lambda B, N: B + N[:, 0] - 2 * N[:, 1], 20.0)
    sol = solve_lattice(lat, Zero(), xi)
    for k in range(5):
        np.testing.assert_allclose(sol.Z[k], 1.0, atol=1e-12)
        np.testing.assert_allclose(sol.U[k], np.tile([1.0, -2.0], (lat.n_states(k), 1)), atol=1e-12)


def test_constant_terminal_is_g_martingale():
    lat = build_lattice(TimeGrid(1.0, 6), MarkSpace([1.0], [0.4]))
    sol = solve_lattice(lat, Entropic(0.8), TerminalCondition(lambda B, N: 0.0 * B + 0.7, 1.0))
    for k in range(7):
        np.testing.assert_allclose(sol.Y[k], 0.7, atol=1e-15)
    for k in range(6):
        np.testing.assert_allclose(sol.Z[k], 0.0, atol=1e-15)
        np.testing.assert_allclose(sol.U[k], 0.0, atol=1e-15)


def test_entropic_matches_exponential_oracle():
    w = [0.3, 0.2]
    n = 6
    lat = build_lattice(TimeGrid(1.0, n), MarkSpace([-0.5, 1.0], w))
    sol = solve_lattice(lat, Entropic(1.0), TANH)
    oracle = math.log(_oracle_mean(n, w, lambda b, c: math.exp(math.tanh(b))))
    # O(dt) scheme error
    assert abs(sol.y0 - oracle) < 0.5 / n


def test_entropic_convergence_order():
    mk = MarkSpace([-0.5, 1.0], [0.3, 0.2])
    errs = []
    for n in (8, 16, 32):
        lat = build_lattice(TimeGrid(1.0, n), mk)
        p = lat.node_probabilities()[-1]
        oracle = math.log(p @ np.exp(TANH.on_lattice(lat)))
        errs.append(abs(solve_lattice(lat, Entropic(1.0), TANH).y0 - oracle))
    orders = np.log2(np.array(errs[:-1]) / errs[1:])
    assert np.all(orders >= 0.8)


def test_consistency_residual_y_dependent():
    lat = build_lattice(TimeGrid(1.0, 8), MarkSpace([1.0], [0.5]))
    g = Custom("-0.5*y + z**2/2", jump="exp(u)-1-u", lipschitz_y=0.5, convex=True)
    sol = solve_lattice(lat, g, TANH)
    assert sol.consistency_residual() <= 1e-10
    assert np.array_equal(sol.Y[-1], TANH.on_lattice(lat))


def test_step_size_error():
    lat = build_lattice(TimeGrid(1.0, 2), MarkSpace())
    g = Custom("3*y", lipschitz_y=3.0)
    with pytest.raises(StepSizeError, match="C\\*dt"):
        solve_lattice(lat, g, TANH)


def test_nonfinite_generator_names_node():
    lat = build_lattice(TimeGrid(1.0, 3), MarkSpace())
    g = FunctionGenerator(lambda t, y, z, u, mk: np.where(z[..., 0] > 0.05, np.nan, 0.0))
    with pytest.raises(NumericalError, match="slice k=2"):
        solve_lattice(lat, g, TANH)


def test_bound_is_asserted():
    lat = build_lattice(TimeGrid(1.0, 3), MarkSpace())
    with pytest.raises(ValueError, match="declared bound"):
        solve_lattice(lat, Zero(), TerminalCondition(lambda B, N: 2 * B, 0.5))


def test_csv_export():
    lat = build_lattice(TimeGrid(1.0, 2), MarkSpace([1.0], [0.3]))
    sol = solve_lattice(lat, Entropic(1.0), TANH)
    lines = sol.to_csv().splitlines()
    assert lines[0] == "k,state_id,b,c_1,Y,Z,U_1"
    first = lines[1].split(",")
    assert float(first[4]) == sol.y0
    assert len(lines) == 1 + sum(lat.n_states(k) for k in range(3))


def test_bmo_diagnostics():
    lat = build_lattice(TimeGrid(1.0, 4), MarkSpace([1.0], [0.3]))
    d0 = bmo_diagnostics(solve_lattice(lat, Zero(), TerminalCondition(lambda B, N: 0 * B + 1.0, 1.0)))
    assert d0.bmo_z == 0.0 and d0.bmo_u == 0.0
    sups = []
    for n in (8, 16, 32):
        lat = build_lattice(TimeGrid(1.0, n), MarkSpace([1.0], [0.3]))
        d = bmo_diagnostics(solve_lattice(lat, Entropic(1.0), TANH))
        assert d.bmo_z >= 0 and d.bmo_u >= 0
        assert np.all(np.diff(d.tail_profile_z) <= 1e-15)
        assert np.all(np.diff(d.tail_profile_u) <= 1e-15)
        sups.append(d.bmo_z + d.bmo_u)
    assert max(sups) < 2 * min(sups)


def test_comparison_on_lattice(rng):
    lat = build_lattice(TimeGrid(1.0, 6), MarkSpace([1.0], [0.5]))
    g = Linear(0.1, 0.2)
    for _ in range(10):
        x1 = rng.uniform(-1, 1, lat.n_states(6))
        x2 = x1 + rng.uniform(0, 0.5, lat.n_states(6))
        s1 = solve_lattice(lat, g, x1)
        s2 = solve_lattice(lat, g, x2)
        for k in range(7):
            assert np.all(s1.Y[k] <= s2.Y[k] + 1e-10)


def test_apriori_bound():
    assert apriori_bound(1.0, 0.0, 0.0, 1.0, 0.9) == pytest.approx(0.9)
    assert apriori_bound(2.0, 1.0, 0.0, 3.0, 0.5) == pytest.approx(2 * 3 + 2 * 0.5)
    assert apriori_bound(1.0, 1.0, 0.5, 2.0, 1.0) == pytest.approx(math.expm1(1.0) / 0.5 + math.e)
    lat = build_lattice(TimeGrid(1.0, 8), MarkSpace([1.0], [0.3]))
    sol = solve_lattice(lat, Entropic(2.0), TANH)
    # gamma = 1/2 < 1: the sup of Y is controlled by max(gamma, 1) * ||xi||
    assert bmo_diagnostics(sol).y_sup <= apriori_bound(1.0, 0.0, 0.0, 1.0, 1.0) + 1e-12


def test_lsmc_martingale():
    paths = simulate_paths(TimeGrid(1.0, 10), None, 5000, seed=4)
    res = solve_lsmc(paths, Zero(), TerminalCondition(lambda B, N: np.clip(B, -8, 8), 8.0),
                     BasisSpec(degree=1))
    assert abs(res.y0) <= 3 * res.y0_se


def test_lsmc_entropic_gaussian_oracle():
    T = 1.0
    paths = simulate_paths(TimeGrid(T, 16), None, 20000, seed=5)
    xi = TerminalCondition(lambda B, N: 0.5 * np.clip(B, -10, 10), 5.0)
    res = solve_lsmc(paths, Entropic(1.0), xi, BasisSpec(degree=2))
    oracle = math.log(gaussian_expectation(lambda x: np.exp(0.5 * x), T))
    assert oracle == pytest.approx(0.125 * T, abs=1e-12)
    assert abs(res.y0 - oracle) <= 3 * res.y0_se + T / 16


def test_lsmc_matches_lattice():
    grid = TimeGrid(1.0, 6)
    mk = MarkSpace([1.0], [0.5])
    lat = build_lattice(grid, mk)
    xi = TerminalCondition(lambda B, N: np.tanh(B - 0.3 * N[:, 0]), 1.0)
    y_lat = solve_lattice(lat, Entropic(1.0), xi).y0
    paths = simulate_paths(grid, mk, 20000, seed=6, increments="binomial")
    res = solve_lsmc(paths, Entropic(1.0), xi, BasisSpec(kind="indicator"))
    assert abs(res.y0 - y_lat) <= 3 * res.y0_se


def test_lsmc_with_jumps_and_two_dims():
    grid = TimeGrid(1.0, 8)
    mk = MarkSpace([1.0, -0.5], [0.4, 0.3])
    paths = simulate_paths(grid, mk, 8000, seed=7, dim=2)
    xi = TerminalCondition(lambda B, N: np.tanh(B[:, 0] + B[:, 1]) + 0.1 * N[:, 0], 3.0)
    res = solve_lsmc(paths, Entropic(2.0), xi, BasisSpec(degree=3))
    assert np.isfinite(res.y0) and res.y0_se > 0


def test_lsmc_errors():
    grid = TimeGrid(1.0, 4)
    few = simulate_paths(grid, None, 20, seed=1)
    with pytest.raises(ValueError, match="10x basis"):
        solve_lsmc(few, Zero(), TANH, BasisSpec(degree=2))
    binom = simulate_paths(grid, None, 2000, seed=1, increments="binomial")
    with pytest.raises(NumericalError, match="slice k=2"):
        solve_lsmc(binom, Zero(), TANH, BasisSpec(degree=3))


def test_lsmc_deterministic():
    grid = TimeGrid(1.0, 5)
    a = solve_lsmc(simulate_paths(grid, None, 3000, seed=8), Entropic(1.0), TANH, BasisSpec())
    b = solve_lsmc(simulate_paths(grid, None, 3000, seed=8, threads=3), Entropic(1.0), TANH, BasisSpec())
    assert a.y0 == b.y0 and a.y0_se == b.y0_se


def test_enumeration_oracle_self_check():
    total = sum(p for p, _, _ in enumerate_paths(3, [0.2, 0.1], 1 / 3))
    assert total == pytest.approx(1.0, abs=1e-14)
