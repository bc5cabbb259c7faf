import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from infdelay import delay_ops as dops
from infdelay.delay_ops import (CallableKernel, DelayMeasure, MatrixKernel, TabulatedKernel, apply_R,
                                apply_R_star, cv_identity_check, cv_identity_sides, duality_residual,
                                identity_kernel, kernel_from_config, operator_bounds, scalar_function,
                                total_variation)
from infdelay.errors import EstimatorNotFitted, GridMismatch, KernelUnbounded
from infdelay.fading_paths import TimeGrid, WeightedPath
from infdelay.projection import ConditionalExpectation


def _grid(theta=0.5, dt=1 / 64):
    return TimeGrid.with_history(1.0, dt, theta)


@pytest.mark.parametrize("measure, expected", [
    (DelayMeasure.dirac(0.3), 1.0),
    (DelayMeasure(atoms=((0, 1), (1, -2))), 3.0),
    (DelayMeasure.uniform(0.0, 2.0, 0.5), 1.0),
    (DelayMeasure(atoms=((0.1, -0.5),), breakpoints=(0, 1, 3), values=(-1.0, 0.25)), 2.0),
])
def test_total_variation(measure, expected):
    assert total_variation(measure) == pytest.approx(expected, rel=1e-15)


def test_measure_validation():
    with pytest.raises(ValueError):
        DelayMeasure(atoms=((-0.1, 1.0),))
    with pytest.raises(ValueError):
        DelayMeasure(breakpoints=(0, 1), values=(1.0, 2.0))
    with pytest.raises(GridMismatch):
        DelayMeasure.dirac(0.1).quadrature(1 / 64)


def test_R_dirac_is_shift(rng):
    g = _grid()
    Z = rng.normal(size=(g.n_nodes, 2))
    lag = g.lag_steps(0.25)
    out = apply_R(identity_kernel(2), DelayMeasure.dirac(0.25), Z, g)
    assert np.array_equal(out, Z[g.i0 - lag: g.n_nodes - lag])


def test_R_density_on_constant_path():
    g = _grid()
    z = np.array([2.0, -1.0])
    Z = np.tile(z, (g.n_nodes, 1))
    meas = DelayMeasure(breakpoints=(0.0, 0.125, 0.5), values=(3.0, -1.0))
    out = apply_R(identity_kernel(2), meas, Z, g)
    assert np.allclose(out, z * meas.total_mass(), rtol=0, atol=1e-13)


def test_R_zero_lag_time_factor(rng):
    g = _grid()
    Z = rng.normal(size=(g.n_nodes, 3))
    K = MatrixKernel(np.eye(3), scalar_function("cos_in_t", amplitude=2.0, frequency=3.0))
    out = apply_R(K, DelayMeasure.dirac(0.0), Z, g)
    c = 2.0 * np.cos(3.0 * g.forward_times)
    assert np.allclose(out, c[:, None] * Z[g.i0:], rtol=0, atol=1e-15)


def test_R_accepts_weighted_path(rng):
    g = _grid()
    p = WeightedPath(g, rng.normal(size=(g.n_nodes, 2)), 1.0)
    out = apply_R(identity_kernel(2), DelayMeasure.dirac(0.125), p)
    assert out.shape == (g.n_steps + 1, 2)


def test_R_constant_pre_history_extends_first_value():
    g = TimeGrid(1.0, 1 / 8, -0.25)
    Z = np.arange(g.n_nodes, dtype=float)[:, None]
    out = apply_R(identity_kernel(1), DelayMeasure.dirac(0.5), Z, g, pre_history="constant")
    assert out[0, 0] == Z[0, 0]
    zero = apply_R(identity_kernel(1), DelayMeasure.dirac(0.5), Z, g)
    assert zero[0, 0] == 0.0


def test_R_star_dirac_is_forward_shift(rng):
    g = _grid()
    Q = rng.normal(size=(g.n_steps + 1, 2))
    lag = g.lag_steps(0.25)
    out = apply_R_star(identity_kernel(2), DelayMeasure.dirac(0.25), Q, g)
    # u + delta strictly inside (0, T): plain shift
    u = np.arange(g.n_nodes)
    t_idx = u - g.i0 + lag
    inside = (t_idx > 0) & (t_idx < g.n_steps)
    assert np.array_equal(out[inside], Q[t_idx[inside]])
    # beyond T: zero; at the jump u + delta = T the mid value is used
    assert np.all(out[t_idx > g.n_steps] == 0.0)
    at_T = np.nonzero(t_idx == g.n_steps)[0][0]
    assert np.array_equal(out[at_T], 0.5 * Q[-1])


def test_R_star_of_zero_is_zero():
    g = _grid()
    meas = DelayMeasure(atoms=((0.25, 1.0),), breakpoints=(0, 0.5), values=(2.0,))
    out = apply_R_star(identity_kernel(2), meas, np.zeros((g.n_steps + 1, 2)), g)
    assert np.all(out == 0.0)


def test_duality_zero_Z():
    g = _grid()
    Z = np.zeros((g.n_nodes, 2))
    Q = np.ones((g.n_steps + 1, 2))
    meas = DelayMeasure(atoms=((0.25, 1.0),), breakpoints=(0, 0.5), values=(2.0,))
    assert duality_residual(identity_kernel(2), meas, Z, Q, g) == 0.0


def test_duality_requires_vanishing_history(rng):
    g = _grid()
    with pytest.raises(ValueError):
        duality_residual(identity_kernel(1), DelayMeasure.dirac(0.0), np.ones((g.n_nodes, 1)),
                         np.ones((g.n_steps + 1, 1)), g)


def test_duality_dirac_sin_cos_fine_grid():
    g = TimeGrid.with_history(1.0, 1e-3, 0.1)
    t = g.nodes
    Z = np.zeros((g.n_nodes, 2))
    Z[:, 0] = np.sin(t) * (t > 0)
    Q = np.zeros((g.n_steps + 1, 2))
    Q[:, 0] = np.cos(g.forward_times)
    assert duality_residual(identity_kernel(2), DelayMeasure.dirac(0.1), Z, Q, g) <= 1e-10


def test_duality_two_atoms_and_mixed_order(rng):
    K = MatrixKernel(rng.normal(size=(2, 2)), scalar_function("exp_decay", rate=0.7))
    atoms = DelayMeasure(atoms=((0.125, 1.0), (0.375, -2.0)))
    g = _grid()
    t = g.nodes
    Z = np.stack([np.sin(2 * t), np.cos(t) - 1], axis=1) * (t > 0)[:, None]
    Q = np.stack([np.exp(-g.forward_times), g.forward_times ** 2], axis=1)
    assert duality_residual(K, atoms, Z, Q, g) <= 1e-10
    mixed = DelayMeasure(atoms=((0.125, 1.0),), breakpoints=(0.0, 0.25, 0.5), values=(1.0, -0.5))
    res = []
    for dt in (1 / 32, 1 / 64, 1 / 128):
        g = _grid(dt=dt)
        t = g.nodes
        Z = np.stack([np.sin(2 * t), np.cos(t) - 1], axis=1) * (t > 0)[:, None]
        Q = np.stack([np.exp(-g.forward_times), g.forward_times ** 2], axis=1)
        res.append(duality_residual(K, mixed, Z, Q, g))
    orders = [math.log2(a / b) for a, b in zip(res, res[1:])]
    assert min(orders) >= 1.8


def test_left_rule_is_exact_adjoint_of_ito_sums(rng):
    g = _grid()
    K = MatrixKernel(rng.normal(size=(2, 2)), scalar_function("linear_in_t", slope=0.5, intercept=1.0))
    meas = DelayMeasure(atoms=((0.0, 0.4), (0.25, 1.0)), breakpoints=(0.0, 0.5), values=(0.7,))
    Z = rng.normal(size=(g.n_nodes, 2))
    Z[: g.i0 + 1] = 0.0
    Q = rng.normal(size=(g.n_steps + 1, 2))
    RZ = apply_R(K, meas, Z, g)
    RsQ = apply_R_star(K, meas, Q, g, rule="left")
    lhs = math.fsum(np.sum(RZ[:-1] * Q[:-1], axis=1))
    rhs = math.fsum(np.sum(Z * RsQ, axis=1))
    assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-12)


def test_operator_bounds_identity_equals_total_variation():
    g = _grid()
    meas = DelayMeasure(atoms=((0.125, -1.5),), breakpoints=(0.0, 0.25), values=(2.0,))
    M0, M = operator_bounds(identity_kernel(2), meas, g)
    c = total_variation(meas)
    assert M0 == pytest.approx(c, rel=1e-12) and M == pytest.approx(c, rel=1e-12)


def test_operator_bounds_linear_kernel_and_zero():
    g = _grid()
    K = MatrixKernel(np.eye(2), scalar_function("linear_in_t"))
    M0, M = operator_bounds(K, DelayMeasure.dirac(0.25), g)
    assert M0 == pytest.approx(1.0, abs=1e-12) and M == pytest.approx(1.0, abs=1e-12)
    assert operator_bounds(MatrixKernel(np.zeros((2, 2))), DelayMeasure.dirac(0.25), g) == (0.0, 0.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_norm_bounds_hold(seed):
    rng = np.random.default_rng(seed)
    dt = 1 / 32
    atoms = tuple((int(rng.integers(0, 12)) * dt, float(rng.normal())) for _ in range(2))
    meas = DelayMeasure(atoms=atoms, breakpoints=(0.0, 4 * dt, 9 * dt), values=tuple(rng.normal(size=2)))
    K = MatrixKernel(rng.normal(size=(2, 2)), scalar_function("cos_in_t", amplitude=0.5, frequency=4.0,
                                                               offset=1.0))
    g = TimeGrid.with_history(1.0, dt, meas.support_max)
    M0, M = operator_bounds(K, meas, g)
    wt = g.trapezoid_weights()
    wu = np.full(g.n_nodes, dt)
    wu[0] = wu[-1] = dt / 2
    Z = rng.normal(size=(g.n_nodes, 2))
    Q = rng.normal(size=(g.n_steps + 1, 2))
    RZ = apply_R(K, meas, Z, g)
    RsQ = apply_R_star(K, meas, Q, g)
    assert np.sum(wt * np.sum(RZ ** 2, 1)) <= M0 * M * np.sum(wu * np.sum(Z ** 2, 1)) * (1 + 1e-8)
    assert np.sum(wu * np.sum(RsQ ** 2, 1)) <= M0 * M * np.sum(wt * np.sum(Q ** 2, 1)) * (1 + 1e-8)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_R_is_linear(seed, a, b):
    rng = np.random.default_rng(seed)
    g = _grid(dt=1 / 32)
    meas = DelayMeasure(atoms=((0.125, 1.0),), breakpoints=(0.0, 0.5), values=(0.5,))
    K = MatrixKernel(rng.normal(size=(2, 2)))
    Z1, Z2 = rng.normal(size=(2, g.n_nodes, 2))
    lhs = apply_R(K, meas, a * Z1 + b * Z2, g)
    rhs = a * apply_R(K, meas, Z1, g) + b * apply_R(K, meas, Z2, g)
    scale = 1.0 + np.abs(lhs).max()
    assert np.allclose(lhs, rhs, rtol=0, atol=1e-13 * scale)


def test_cv_identity_examples():
    g = _grid()
    dirac = DelayMeasure.dirac(0.25, -1.5)
    lhs, rhs = cv_identity_sides(lambda t, th: np.ones_like(t), dirac, g)
    assert lhs == pytest.approx(1.5) and rhs == pytest.approx(1.5)
    assert cv_identity_check(lambda t, th: np.ones_like(t), dirac, g) == 0.0
    assert cv_identity_check(lambda t, th: t + 0 * th, dirac, g) <= 1e-12
    lhs, _ = cv_identity_sides(lambda t, th: t + 0 * th, dirac, g)
    assert lhs == pytest.approx(0.75, rel=1e-12)


def test_cv_identity_density_order():
    meas = DelayMeasure(atoms=((0.125, 1.0),), breakpoints=(0.0, 0.25, 0.5), values=(1.0, 3.0))
    res = []
    for dt in (1 / 32, 1 / 64, 1 / 128):
        g = _grid(dt=dt)
        res.append(cv_identity_check(lambda t, th: np.exp(t) * np.cos(3 * th + t) + 2.0, meas, g))
    orders = [math.log2(a / b) for a, b in zip(res, res[1:])]
    assert min(orders) >= 1.8


def test_kernel_unbounded():
    g = _grid()
    K = CallableKernel(lambda t, th: np.full((len(t), 1, 1), np.inf), 1, 1)
    with pytest.raises(KernelUnbounded):
        apply_R(K, DelayMeasure.dirac(0.0), np.zeros((g.n_nodes, 1)), g)
    with pytest.raises(KernelUnbounded):
        operator_bounds(K, DelayMeasure.dirac(0.0), g)


def test_tabulated_kernel_interpolates():
    vals = np.zeros((2, 2, 1, 1))
    vals[1, :, 0, 0] = 2.0
    K = TabulatedKernel([0.0, 1.0], [0.0, 1.0], vals)
    s = K.checked_sample(np.array([0.0, 0.5, 1.0, 3.0]), 0.5)
    assert np.allclose(s[:, 0, 0], [0.0, 1.0, 2.0, 2.0])


def test_kernel_registry():
    K = kernel_from_config({"type": "matrix", "value": [[1, 2], [3, 4]],
                            "function": {"name": "constant", "value": 2.0}}, 2, 2)
    assert np.array_equal(K.checked_sample(np.array([0.3]), 0.0)[0], [[2, 4], [6, 8]])
    assert isinstance(kernel_from_config({"type": "identity"}, 3), MatrixKernel)
    with pytest.raises(ValueError):
        kernel_from_config({"type": "nope"}, 1)
    with pytest.raises(ValueError):
        scalar_function("nope")


def test_measure_from_config():
    m = DelayMeasure.from_config({"atoms": [{"lag": 0.5, "weight": 2.0}],
                                  "density": {"breakpoints": [0, 1], "values": [0.5]}})
    assert m.atoms == ((0.5, 2.0),) and m.total_mass() == 2.5


def _deterministic_ensemble(g, P=50):
    X = np.zeros((P, g.n_nodes, 1))
    X[:, :, 0] = np.linspace(-1, 1, P)[:, None]
    return ConditionalExpectation(g, X)


def test_adapted_adjoint_deterministic_and_zero():
    g = _grid()
    est = _deterministic_ensemble(g)
    meas = DelayMeasure(atoms=((0.25, 1.0),), breakpoints=(0.0, 0.5), values=(0.5,))
    Q = np.tile(np.cos(g.forward_times)[:, None], (50, 1, 1))
    out = dops.adapted_adjoint(identity_kernel(1), meas, Q, g, est)
    ref = apply_R_star(identity_kernel(1), meas, Q[0], g)[g.i0:]
    assert np.allclose(out, ref[None], rtol=0, atol=1e-12)
    zero = dops.adapted_adjoint(identity_kernel(1), meas, np.zeros_like(Q), g, est)
    assert np.all(zero == 0.0)


def test_adapted_adjoint_needs_estimator():
    g = _grid()
    with pytest.raises(EstimatorNotFitted):
        dops.adapted_adjoint(identity_kernel(1), DelayMeasure.dirac(0.0), np.zeros((5, g.n_steps + 1, 1)),
                             g, None)


def test_adapted_adjoint_martingale():
    from infdelay.forward_see import InitialData, LinearDelayCoefficients, simulate_forward
    delta = 0.25
    g = TimeGrid.with_history(1.0, 1 / 64, delta)
    c = LinearDelayCoefficients(1, 1, 1, s0=lambda t: np.ones((1, 1)))
    ens = simulate_forward(c, InitialData(np.zeros(1)), g, paths=4000, seed=11)
    Q = ens.X[:, g.i0:, :].copy()
    est = ConditionalExpectation(g, ens.X)
    AQ = dops.adapted_adjoint(identity_kernel(1), DelayMeasure.dirac(delta), Q, g, est)
    lag = g.lag_steps(delta)
    live = np.arange(1, g.n_steps - lag)
    # E_t[W(t + delta)] = W(t); the unprojected increment has rms sqrt(delta)
    err = AQ[:, live, 0] - Q[:, live, 0]
    raw = Q[:, live + lag, 0] - Q[:, live, 0]
    assert np.sqrt(np.mean(err ** 2)) <= 0.05 * np.sqrt(np.mean(raw ** 2))
    assert np.all(AQ[:, g.forward_times + delta > 1.0 + 1e-12, 0] == 0.0)
