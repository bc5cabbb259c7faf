import math

import numpy as np
import pytest

from infdelay.delay_ops import DelayMeasure, MatrixKernel
from infdelay.errors import NoConvergence, UnderdeterminedFit
from infdelay.fading_paths import TimeGrid
from infdelay.forward_see import InitialData, LinearDelayCoefficients, simulate_forward
from infdelay.iabsee import (BackwardSolution, CallableGenerator, ConstantGenerator, LinearAnticipatedGenerator,
                             TerminalData, ZeroGenerator, backward_residual, method_of_steps_oracle,
                             solve_iabsee, weighted_z_norm)
from infdelay.projection import FeatureMap


def _bm(paths, dt=1 / 32, seed=1):
    g = TimeGrid(1.0, dt)
    c = LinearDelayCoefficients(1, 1, 1, s0=lambda t: np.ones((1, 1)))
    return simulate_forward(c, InitialData(np.zeros(1)), g, paths=paths, seed=seed)


def _still(paths=50, dt=1 / 32):
    g = TimeGrid(1.0, dt)
    return simulate_forward(LinearDelayCoefficients(1, 1, 1), InitialData(np.zeros(1)), g, paths=paths)


def test_deterministic_terminal_is_constant():
    ens = _bm(300)
    sol = solve_iabsee(ZeroGenerator(), TerminalData.constant([2.0]), ens)
    N = ens.grid.n_steps
    assert np.all(sol.Y[:, : N + 1] == 2.0) and np.all(sol.Z == 0.0)
    assert backward_residual(sol, ZeroGenerator(), ens) <= 1e-20


def test_constant_generator_integrates_linearly():
    ens = _bm(300)
    sol = solve_iabsee(ConstantGenerator([0.5]), TerminalData.constant([1.0]), ens)
    t = ens.grid.forward_times
    assert np.abs(sol.Y[:, : len(t), 0] - (1.0 + 0.5 * (1 - t))).max() <= 1e-10
    assert np.all(sol.Z == 0.0)


def test_anticipated_deterministic_oracle():
    delta = 0.25
    errs = []
    for dt in (1 / 32, 1 / 64):
        ens = _still(dt=dt)
        g = ens.grid
        gen = LinearAnticipatedGenerator.pointwise([delta], [[[1.0]]], 1)
        term = TerminalData.from_function(lambda ts: np.full((len(ts), 1), 2.0), g, g.lag_steps(delta), 1)
        sol = solve_iabsee(gen, term, ens)
        ts, y = method_of_steps_oracle(2.0, 1.0, delta, dt / 32)
        errs.append(np.abs(sol.Y[0, : g.n_steps + 1, 0] - y[::32]).max())
    assert errs[1] <= 2 * (1 / 64)
    assert errs[0] / errs[1] == pytest.approx(2.0, rel=0.25)


def test_method_of_steps_oracle_closed_form():
    # on [T - delta, T] the solution is k + k (T - t)
    ts, y = method_of_steps_oracle(2.0, 1.0, 0.25, 1 / 512)
    tail = ts >= 0.75
    assert np.allclose(y[tail], 2.0 + 2.0 * (1.0 - ts[tail]), rtol=0, atol=1e-12)


def test_martingale_terminal():
    ens = _bm(4000)
    sol = solve_iabsee(ZeroGenerator(), TerminalData(ens.X[:, -1:, :].copy()), ens)
    N = ens.grid.n_steps
    err = sol.Y[:, : N + 1, 0] - ens.X[:, ens.grid.i0:, 0]
    assert np.sqrt(np.mean(err ** 2)) <= math.sqrt(3 / ens.paths)
    # Z of W(T) is 1
    assert abs(sol.Z[:, :N, 0, 0].mean() - 1.0) <= 0.05


def test_terminal_pinning_every_iterate():
    ens = _bm(400)
    xi = np.cos(ens.X[:, -1:, :])
    g = ens.grid
    gen = LinearAnticipatedGenerator.pointwise([0.125], [[[0.5]]], 1)
    lead = g.lag_steps(0.125)
    eta = np.full((1, lead + 1, 1, 1), 0.3)
    for n in (1, 2, 3):
        sol = solve_iabsee(gen, TerminalData(xi, eta), ens, n_picard=n)
        assert np.array_equal(sol.Y[:, g.n_steps], xi[:, 0])
        assert np.all(sol.Z[:, g.n_steps:] == 0.3)


def test_sweep_equals_picard_limit():
    ens = _bm(400)
    g = ens.grid
    gen = LinearAnticipatedGenerator.pointwise([0.125, 0.0], [[[0.5]], [[-0.3]]], 1)
    term = TerminalData(np.cos(ens.X[:, -1:, :]))
    a = solve_iabsee(gen, term, ens, n_picard=200)
    b = solve_iabsee(gen, term, ens, method="sweep")
    assert np.allclose(a.Y, b.Y, rtol=0, atol=1e-12)
    gaps = a.gaps
    ratios = [y / x for x, y in zip(gaps, gaps[1:]) if x > 1e-200 and y > 0]
    assert max(ratios[2:]) <= 0.9


def test_no_anticipation_needs_one_iteration():
    ens = _bm(400)
    sol = solve_iabsee(ZeroGenerator(), TerminalData(np.sin(ens.X[:, -1:, :])), ens, n_picard=5)
    assert sol.gaps[1] == 0.0


def test_linear_generator_residual_shrinks_with_dt():
    res = []
    for dt in (1 / 16, 1 / 64):
        ens = _bm(2000, dt=dt)
        gen = LinearAnticipatedGenerator.pointwise([0.0], [[[-0.5]]], 1)
        sol = solve_iabsee(gen, TerminalData(np.cos(ens.X[:, -1:, :])), ens)
        res.append(backward_residual(sol, gen, ens))
    assert res[1] < res[0]


def test_residual_detects_corruption():
    ens = _bm(300)
    gen = ConstantGenerator([0.5])
    sol = solve_iabsee(gen, TerminalData.constant([1.0]), ens)
    nodes = np.arange(0, ens.grid.n_steps + 1, 4)
    base = backward_residual(sol, gen, ens, nodes)
    sol.Y[:, 8] += 1.0
    bumped = backward_residual(sol, gen, ens, nodes)
    # one bumped node moves the tail for the nodes before it; the defect at 8 is 1
    assert bumped - base >= 1.0 / len(nodes) - 1e-12


def test_weighted_z_norm_examples():
    g = TimeGrid(1.0, 1 / 64)
    N = g.n_steps
    zero = BackwardSolution(g, 0, np.zeros((3, N + 1, 2)), np.zeros((3, N + 1, 2, 1)))
    assert weighted_z_norm(zero) == 0.0
    Z = np.zeros((3, N + 1, 2, 1))
    Z[:, :, 0, 0] = 1.5
    Z[:, :, 1, 0] = -2.0
    sol = BackwardSolution(g, 0, np.zeros((3, N + 1, 2)), Z)
    assert weighted_z_norm(sol) == pytest.approx(6.25, rel=1e-12)
    assert weighted_z_norm(sol, beta=1.0) == pytest.approx(6.25 * (math.e - 1), abs=1e-8)


def test_no_convergence_on_growing_generator():
    ens = _still(paths=50)
    state = {"n": 0}

    def f(k, Y, Z):
        state["n"] += 1
        return np.full((Y.shape[0], 1), float(state["n"]))

    with pytest.raises(NoConvergence):
        solve_iabsee(CallableGenerator(f), TerminalData.constant([0.0]), ens, n_picard=10)


def test_underdetermined_fit_propagates():
    ens = _bm(20)
    with pytest.raises(UnderdeterminedFit):
        solve_iabsee(ZeroGenerator(), TerminalData(ens.X[:, -1:, :].copy()), ens, features=FeatureMap(degree=2))


def test_invalid_method():
    with pytest.raises(ValueError):
        solve_iabsee(ZeroGenerator(), TerminalData.constant([0.0]), _still(), method="nope")


def test_integral_generator_on_z():
    # f = 0.5 Z(t): with xi = W(T), Z = 1 and Y(t) = W(t) + 0.5 (T - t)
    ens = _bm(4000)
    g = ens.grid
    gen = LinearAnticipatedGenerator(z_terms=[(MatrixKernel([[0.5]]), DelayMeasure.dirac(0.0))])
    sol = solve_iabsee(gen, TerminalData(ens.X[:, -1:, :].copy()), ens)
    t = g.forward_times
    err = sol.Y[:, : g.n_steps + 1, 0] - (ens.X[:, g.i0:, 0] + 0.5 * (1 - t))
    assert np.sqrt(np.mean(err ** 2)) <= 0.05
