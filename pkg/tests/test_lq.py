import math

import numpy as np
import pytest

from infdelay.delay_ops import DelayMeasure, MatrixKernel, control_kernel
from infdelay.errors import NoConvergence, SingularWeight, StiffRiccati
from infdelay.fading_paths import TimeGrid
from infdelay.forward_see import ControlDelay, InitialData, simulate_forward
from infdelay.lq import (LQSpec, check_weight, cost_evaluate, fbsde_fixed_point, lq_optimal_control, m2_norm,
                         riccati_oracle)
from infdelay.smp import (cost_samples, make_estimator, necessary_residual, solve_adjoint)

DT = 1 / 32


def test_cost_zero_at_rest():
    spec = LQSpec(2, 1, 1, A=np.eye(2), B=[[1.0], [0.0]], L=np.diag([3.0, 1.0]))
    g = TimeGrid(1.0, DT)
    ens = simulate_forward(spec.coefficients, InitialData(np.zeros(2)), g, paths=5)
    assert cost_evaluate(spec, ens)[0] == 0.0


def test_cost_hand_quadrature():
    spec = LQSpec(1, 1, 1, A=[[0.0]], B=[[0.0]], L=[[2.0]])
    g = TimeGrid(1.0, DT)
    ens = simulate_forward(spec.coefficients, InitialData(np.ones(1)), g, paths=3)
    J, _ = cost_evaluate(spec, ens, delay=ControlDelay(measure=DelayMeasure()))
    assert J == pytest.approx(1.5, rel=1e-14)


def test_control_doubling_quadruples_control_term():
    spec = LQSpec(1, 1, 1, A=[[0.0]], B=[[0.0]], L=[[2.0]], Ltilde=[[3.0]])
    g = TimeGrid.with_history(1.0, DT, 0.25)
    delay = ControlDelay(measure=DelayMeasure.dirac(0.25))
    base = simulate_forward(spec.coefficients, InitialData(np.ones(1)), g, None, delay).X
    ctl = []
    for s in (1.0, 2.0):
        ens = simulate_forward(spec.coefficients, InitialData(np.ones(1)), g, lambda ts, s=s: s * np.cos(ts)[:, None],
                               delay)
        assert np.array_equal(ens.X, base)
        ctl.append(cost_evaluate(spec, ens, delay=delay)[0] - 1.5)
    assert ctl[1] == pytest.approx(4 * ctl[0], rel=1e-12)


def test_singular_weight():
    with pytest.raises(SingularWeight):
        LQSpec(1, 1, 1, A=[[0.0]], B=[[1.0]], Ltilde=[[0.0]])
    with pytest.raises(SingularWeight):
        LQSpec(1, 1, 2, A=[[0.0]], B=[[1.0, 0.0]], Ltilde=[[1.0, 0.5], [0.0, 1.0]])
    with pytest.raises(SingularWeight):
        check_weight([[1.0, 0.0], [0.0, -1.0]], 1e-8)
    with pytest.raises(ValueError):
        LQSpec(1, 1, 1, A=[[0.0]], B=[[1.0]], L=[[-1.0]])


def _solved(spec, init, delay, paths=2000, seed=4):
    g = TimeGrid.with_history(1.0, DT, 0.25)
    ctx = spec.context(init, delay)
    ens = simulate_forward(ctx.coeffs, init, g, lambda ts: 0.3 * np.sin(ts)[:, None], delay, paths=paths, seed=seed)
    est = make_estimator(ctx, ens)
    return ens, solve_adjoint(ctx, ens, estimator=est), est


def test_optimal_control_zero_without_control_channels():
    spec = LQSpec(1, 1, 1, A=[[-0.2]], B=[[0.0]], C=[[0.3]], D=[[0.0]], L=[[1.0]])
    init = InitialData(np.ones(1))
    ens, adj, est = _solved(spec, init, ControlDelay(), paths=500)
    assert np.all(lq_optimal_control(spec, ens, adj, estimator=est) == 0.0)


def test_optimal_control_linear_in_adjoint():
    spec = LQSpec(1, 1, 1, A=[[-0.2]], B=[[1.0]], C=[[0.3]], D=[[0.2]], L=[[1.0]], Ltilde=[[2.0]])
    init = InitialData(np.ones(1))
    delay = ControlDelay(control_kernel("exp_gap", rate=1.0), DelayMeasure.dirac(0.125))
    ens, adj, est = _solved(spec, init, delay, paths=500)
    u1 = lq_optimal_control(spec, ens, adj, delay, est)
    adj.Y *= 2
    adj.Z *= 2
    u2 = lq_optimal_control(spec, ens, adj, delay, est)
    assert np.allclose(u2, 2 * u1, rtol=1e-10, atol=1e-13)


def test_gradient_update_agrees_with_closed_form_without_control_delay():
    spec = LQSpec(1, 1, 1, A=[[-0.2]], B=[[1.0]], C=[[0.3]], D=[[0.2]], L=[[1.0]], Ltilde=[[2.0]])
    init = InitialData(np.ones(1))
    ens, adj, est = _solved(spec, init, ControlDelay(), paths=1000)
    u = 0.3 * np.sin(ens.grid.forward_times)[None, :, None]
    a = lq_optimal_control(spec, ens, adj, ControlDelay(), est)
    b = lq_optimal_control(spec, ens, adj, ControlDelay(), est, u=u)
    N = ens.grid.n_steps
    assert np.allclose(a[:, :N], b[:, :N], rtol=0, atol=1e-10)


def test_riccati_scalar_closed_form():
    spec = LQSpec(1, 1, 1, A=[[0.0]], B=[[1.0]], L=[[0.0]], Ltilde=[[1.0]])
    ric = riccati_oracle(spec, [1.0], 1.0)
    assert ric.P[0, 0, 0] == pytest.approx(0.5, abs=1e-12)
    assert np.allclose(ric.P[:, 0, 0], 1 / (2 - ric.times), rtol=0, atol=1e-12)
    assert ric.J_opt == pytest.approx(0.25, abs=1e-12)
    assert ric.feedback(0.0, np.array([[2.0]]))[0, 0] == pytest.approx(-1.0, abs=1e-12)


def test_riccati_limits():
    a, L = -0.5, 1.0
    spec = LQSpec(1, 1, 1, A=[[a]], B=[[1.0]], L=[[L]], Ltilde=[[1e6]])
    ric = riccati_oracle(spec, [1.0], 1.0)
    lyap = (1 + L / (2 * a)) * np.exp(2 * a * (1 - ric.times)) - L / (2 * a)
    assert np.allclose(ric.P[:, 0, 0], lyap, rtol=1e-5)
    assert np.abs(ric.gain).max() <= 1e-5
    short = riccati_oracle(LQSpec(2, 1, 1, A=np.eye(2), B=[[1.0], [0.0]], L=np.eye(2)), [1.0, 1.0], 1e-8)
    assert np.allclose(short.P[0], np.eye(2), atol=1e-7)


def test_riccati_errors():
    with pytest.raises(StiffRiccati):
        riccati_oracle(LQSpec(1, 1, 1, A=[[-50.0]], B=[[1.0]]), [1.0], 1.0, n_steps=10)
    delayed = LQSpec(1, 1, 1, A=(MatrixKernel([[1.0]]), DelayMeasure.dirac(0.25)), B=[[1.0]])
    with pytest.raises(ValueError):
        riccati_oracle(delayed, [1.0], 1.0)
    with pytest.raises(ValueError):
        riccati_oracle(LQSpec(1, 1, 1, A=[[0.0]], B=[[1.0]], C=[[0.1]]), [1.0], 1.0, s0_const=[[0.2]])


def test_fixed_point_trivial_without_control():
    spec = LQSpec(1, 1, 1, A=[[-0.2]], B=[[0.0]], L=[[1.0]], s0=lambda t: np.array([[0.3]]))
    sol = fbsde_fixed_point(spec, InitialData(np.ones(1)), TimeGrid(1.0, DT), paths=300)
    assert sol.iterations == 1 and sol.converged and np.all(sol.u_star == 0.0)


def test_fixed_point_matches_riccati_and_feedback():
    spec = LQSpec(1, 1, 1, A=[[0.3]], B=[[1.0]], L=[[1.0]], Ltilde=[[1.0]])
    ric = riccati_oracle(spec, [1.0], 1.0)
    gaps = []
    for dt in (1 / 32, 1 / 64):
        g = TimeGrid(1.0, dt, -dt)
        sol = fbsde_fixed_point(spec, InitialData(np.ones(1)), g, paths=20, tol=1e-8, max_iter=60)
        gaps.append(abs(sol.J_star - ric.J_opt))
        N = g.n_steps
        x = sol.ensemble.X[0, g.i0: g.i0 + N, 0]
        fb = np.array([ric.feedback(t, np.array([[xi]]))[0, 0] for t, xi in zip(g.forward_times[:N], x)])
        assert np.abs(sol.u_star[0, :N, 0] - fb).max() <= 5 * dt
    assert gaps[0] <= max(0.02 * ric.J_opt, 1 / 32)
    assert gaps[1] < gaps[0]


def test_fixed_point_stochastic_delayed():
    spec = LQSpec(1, 1, 1, A=[[-0.3]], B=[[1.0]], C=[[0.2]], D=[[0.1]], L=[[1.0]], Ltilde=[[1.0]],
                  s0=lambda t: np.array([[0.2]]))
    init = InitialData(np.array([1.0]), np.array([0.2]))
    delay = ControlDelay(control_kernel("exp_gap", rate=1.0), DelayMeasure.dirac(0.125))
    g = TimeGrid.with_history(1.0, DT, 0.25)
    sol = fbsde_fixed_point(spec, init, g, delay=delay, paths=3000, seed=5)
    trace = sol.trace
    assert all(b["J"] <= a["J"] + 3 * b["dJ_se"] for a, b in zip(trace[1:], trace[2:]))
    ctx = spec.context(init, delay)
    res = necessary_residual(ctx, sol.u_star, sol.ensemble, sol.adjoint, [[-1.0], [1.0]], [0, 8, 16, 24])
    assert np.all(res["values"] >= -3 * res["se"] - 1e-10)
    J0 = cost_samples(ctx, sol.ensemble)
    rng = np.random.default_rng(0)
    for _ in range(3):
        dirn = rng.normal(size=(1, g.n_steps + 1, 1))
        for eps in (0.1, -0.1):
            e = simulate_forward(ctx.coeffs, init, g, sol.u_star + eps * dirn, delay, dW=sol.ensemble.dW)
            d = cost_samples(ctx, e) - J0
            assert d.mean() >= -3 * np.std(d) / math.sqrt(len(d))


def test_fixed_point_no_convergence():
    spec = LQSpec(1, 1, 1, A=[[0.3]], B=[[1.0]], L=[[1.0]])
    with pytest.raises(NoConvergence):
        fbsde_fixed_point(spec, InitialData(np.ones(1)), TimeGrid(1.0, DT, -DT), paths=20, max_iter=2)


def test_m2_norm():
    u = np.ones((4, 33, 2))
    assert m2_norm(u, 1 / 32) == pytest.approx(math.sqrt(2.0))
