"""Euler-Maruyama and Picard solvers for controlled SDEs with infinite delay.

    dX(t) = b(t, X_t, v_d(t)) dt + sigma(t, X_t, v_d(t)) dW(t),  t in [0, T]
    X(t) = gamma(t),  v(t) = varphi(t),  t <= 0

with the delayed control v_d(t) = int phi(t - theta, t) v(t - theta) alpha(d theta).

States are stored on the full grid [t0, T]; the grid history must cover
every lag used by the coefficients.  Linear coefficients in lag-kernel form
run through the compiled stepping kernel; anything else goes through a
vectorized Python loop over time.
"""
import math
from dataclasses import dataclass, field

import numpy as np

from . import _backend
from .delay_ops import ScalarControlKernel, DelayMeasure, apply_R
from .errors import Blowup, GridMismatch, NoConvergence
from .fading_paths import PathSegment, TimeGrid, WeightedPath, check_history_membership
from .noise import brownian_increments, brownian_paths
from .stats import mean_se, run_chunks

BLOWUP_GUARD = 1e12


def _time_matrix(M, ts, shape):
    """Sample a constant matrix or a callable t -> matrix on times ts: (n,) + shape."""
    if M is None:
        return np.zeros((len(ts),) + shape)
    if callable(M):
        out = np.array([np.asarray(M(t), dtype=float).reshape(shape) for t in ts])
        return out.reshape((len(ts),) + shape)
    return np.broadcast_to(np.asarray(M, dtype=float).reshape(shape), (len(ts),) + shape).copy()


class Coefficients:
    """General drift and diffusion acting on past segments.

    Parameters
    ----------
    d, m, du : int
        State, noise and control dimensions.
    drift : callable (t, past: PathSegment, vd (P, du)) -> (P, d)
    diffusion : callable (t, past, vd) -> (P, d, m)
    dx_b, dx_sigma : (LagKernel, DelayMeasure) or None
        Path derivatives in lag-kernel form; the sigma kernel maps R^d to
        R^{d*m} with row index i*m + c.
    b_v, sigma_v : arrays (d, du) and (d*m, du) or callables of t
        Control derivatives.
    """

    linear = False

    def __init__(self, d, m, du, drift, diffusion, dx_b=None, dx_sigma=None, b_v=None, sigma_v=None):
        self.d, self.m, self.du = int(d), int(m), int(du)
        self._drift = drift
        self._diffusion = diffusion
        self.dx_b = dx_b
        self.dx_sigma = dx_sigma
        self.b_v = b_v
        self.sigma_v = sigma_v

    def drift(self, t, past, vd):
        return np.asarray(self._drift(t, past, vd), dtype=float)

    def diffusion(self, t, past, vd):
        return np.asarray(self._diffusion(t, past, vd), dtype=float)

    def max_lag(self):
        lags = [0.0]
        for pair in (self.dx_b, self.dx_sigma):
            if pair is not None:
                lags.append(pair[1].support_max)
        return max(lags)


class LinearDelayCoefficients(Coefficients):
    """b = int K_A(t, th) X(t - th) alpha_A(dth) + B(t) v_d + b0(t),
    sigma = int K_C(t, th) X(t - th) alpha_C(dth) + D(t) v_d + s0(t).

    A and C are (LagKernel, DelayMeasure) pairs or None; the C kernel has
    d*m output rows (row i*m + c is entry (i, c) of sigma).  B is (d, du),
    D is (d*m, du); b0 maps t to R^d and s0 maps t to (d, m).
    """

    linear = True

    def __init__(self, d, m=1, du=1, A=None, C=None, B=None, D=None, b0=None, s0=None):
        super().__init__(d, m, du, None, None, dx_b=A, dx_sigma=C, b_v=B, sigma_v=D)
        self.A, self.C, self.B, self.D = A, C, B, D
        self.b0, self.s0 = b0, s0
        if A is not None and (A[0].dout, A[0].din) != (d, d):
            raise ValueError("A kernel must be d x d")
        if C is not None and (C[0].dout, C[0].din) != (d * m, d):
            raise ValueError("C kernel must be (d*m) x d")

    def additive(self, ts):
        """b0 and s0 sampled on times ts."""
        b0 = np.zeros((len(ts), self.d)) if self.b0 is None else np.array([self.b0(t) for t in ts], dtype=float).reshape(len(ts), self.d)
        s0 = np.zeros((len(ts), self.d, self.m)) if self.s0 is None else np.array([self.s0(t) for t in ts], dtype=float).reshape(len(ts), self.d, self.m)
        return b0, s0

    def step_weights(self, pair, grid, rows):
        """Offsets (J,) and weights (J, N, rows, d) of a lag-kernel term on left nodes."""
        N = grid.n_steps
        if pair is None:
            return np.zeros(0, dtype=np.int64), np.zeros((0, N, rows, self.d))
        kernel, measure = pair
        q = measure.quadrature(grid.dt)
        if q.max_offset > grid.i0:
            raise GridMismatch(f"grid history ({grid.i0} steps) shorter than lag {q.max_offset} steps")
        ts = grid.forward_times[:N]
        W = np.empty((len(q.offsets), N, rows, self.d))
        for j, off in enumerate(q.offsets):
            W[j] = q.weights[j] * kernel.checked_sample(ts, off * grid.dt)
        return np.ascontiguousarray(q.offsets, dtype=np.int64), W

    def _lag_apply(self, pair, rows, t, past):
        P = past.window().shape[0]
        out = np.zeros((P, rows))
        if pair is None:
            return out
        kernel, measure = pair
        q = measure.quadrature(past.grid.dt)
        for j, off in enumerate(q.offsets):
            K = kernel.checked_sample(np.array([t]), off * past.grid.dt)[0]
            out += q.weights[j] * (past.at_steps(off) @ K.T)
        return out

    def drift(self, t, past, vd):
        b0, _ = self.additive([t])
        Bm = _time_matrix(self.B, [t], (self.d, self.du))[0]
        return self._lag_apply(self.A, self.d, t, past) + vd @ Bm.T + b0[0]

    def diffusion(self, t, past, vd):
        _, s0 = self.additive([t])
        Dm = _time_matrix(self.D, [t], (self.d * self.m, self.du))[0]
        lin = self._lag_apply(self.C, self.d * self.m, t, past) + vd @ Dm.T
        return lin.reshape(-1, self.d, self.m) + s0[0]


@dataclass
class InitialData:
    """State history gamma and control history varphi on (-inf, 0].

    gamma : callable times -> (n, d), a constant vector, or an array
        (n_hist + 1, d) / (P, n_hist + 1, d) on the history nodes.
    varphi : callable times -> (n, du), a constant vector, or None (zero).
    """

    gamma: object
    varphi: object = None
    lam: float = 1.0
    pre_history: str = "zero"

    def state_history(self, grid, d):
        i0 = grid.i0
        hist_t = grid.nodes[: i0 + 1]
        g = self.gamma
        if callable(g):
            if self.pre_history == "zero":
                check_history_membership(g, self.lam, grid.t0)
            return np.asarray(g(hist_t), dtype=float).reshape(i0 + 1, d)
        g = np.asarray(g, dtype=float)
        if g.ndim == 1:
            return np.broadcast_to(g, (i0 + 1, d)).copy()
        return g

    def gamma0_norm_sq(self, grid, d):
        """Squared weighted norm of the initial segment, per trajectory."""
        h = self.state_history(grid, d)
        w = np.exp(self.lam * grid.nodes[: grid.i0 + 1])
        return np.max((w * np.linalg.norm(h, axis=-1)) ** 2, axis=-1)

    def control_history(self, grid, du):
        i0 = grid.i0
        if self.varphi is None:
            return np.zeros((i0 + 1, du))
        if callable(self.varphi):
            return np.asarray(self.varphi(grid.nodes[: i0 + 1]), dtype=float).reshape(i0 + 1, du)
        return np.broadcast_to(np.asarray(self.varphi, dtype=float), (i0 + 1, du)).copy()


@dataclass(frozen=True)
class ControlDelay:
    """Delay structure v -> v_d of the control."""

    phi: ScalarControlKernel = field(default_factory=ScalarControlKernel)
    measure: DelayMeasure = field(default_factory=lambda: DelayMeasure.dirac(0.0))


@dataclass
class Ensemble:
    """Seeded Monte Carlo ensemble on a shared grid.

    Attributes
    ----------
    X : (P, n_nodes, d) states on [t0, T]
    dW : (P, N, m) Brownian increments; W : (P, N + 1, m) Brownian values
    control : (1 or P, n_nodes, du) control on [t0, T]
    vd : (1 or P, N + 1, du) delayed control on [0, T]
    """

    grid: TimeGrid
    seed: int
    dW: np.ndarray
    X: np.ndarray
    control: np.ndarray
    vd: np.ndarray
    W: np.ndarray = None
    lam: float = 1.0

    def __post_init__(self):
        if self.W is None:
            self.W = brownian_paths(self.dW)

    @property
    def paths(self):
        return self.X.shape[0]

    @property
    def m(self):
        return self.dW.shape[2]

    def state_path(self, i):
        return WeightedPath(self.grid, self.X[i], self.lam)


def make_noise(grid, paths, m, seed, workers=1):
    """Brownian increments (paths, N, m), identical for any worker count."""
    chunks = run_chunks(lambda a, b: brownian_increments(seed, b - a, grid.n_steps, m, grid.dt, start=a),
                        paths, workers)
    return np.concatenate(chunks, axis=0) if chunks else np.zeros((0, grid.n_steps, m))


def control_array(control, grid, du, init=None):
    """Control on the full grid as (1 or P, n_nodes, du).

    `control` may be None (zero), a constant vector, a callable of times,
    an array on the forward nodes (N + 1, du) / (P, N + 1, du), or on all
    nodes.  History values come from init.varphi when only the forward part
    is given.
    """
    n, i0 = grid.n_nodes, grid.i0
    hist = init.control_history(grid, du) if init is not None else np.zeros((i0 + 1, du))
    if control is None:
        out = np.zeros((1, n, du))
        out[0, :i0] = hist[:i0]
        return out
    if callable(control):
        fwd = np.asarray(control(grid.forward_times), dtype=float).reshape(-1, du)[None]
    else:
        c = np.asarray(control, dtype=float)
        if c.ndim == 1:
            fwd = np.broadcast_to(c.reshape(1, 1, du), (1, grid.n_steps + 1, du))
        elif c.ndim == 2:
            fwd = c[None]
        else:
            fwd = c
        if fwd.shape[1] == n:
            return np.ascontiguousarray(fwd)
    out = np.empty((fwd.shape[0], n, du))
    out[:, :i0] = hist[:i0]
    out[:, i0:] = fwd
    return out


def delayed_control(v, delay, grid):
    """v_d on the nodes of [0, T] for a control array (..., n_nodes, du)."""
    v = np.asarray(v, dtype=float)
    kernel = delay.phi.as_lag_kernel(v.shape[-1])
    return apply_R(kernel, delay.measure, v, grid)


def delayed_control_at(v, delay, grid, t):
    """v_d(t) at a single node t of [0, T]."""
    return delayed_control(v, delay, grid)[..., grid.index(t) - grid.i0, :]


def _check_guard(X, where):
    bad = ~(np.abs(X) <= BLOWUP_GUARD)
    if bad.any():
        raise Blowup(f"state norm exceeded {BLOWUP_GUARD:g} {where}")


def _euler_linear(coeffs, grid, X, vd, dW, workers):
    N = grid.n_steps
    d, m = coeffs.d, coeffs.m
    offA, WA = coeffs.step_weights(coeffs.A, grid, d)
    offC, WC = coeffs.step_weights(coeffs.C, grid, d * m)
    ts = grid.forward_times[:N]
    b0, s0 = coeffs.additive(ts)
    Bm = _time_matrix(coeffs.B, ts, (d, coeffs.du))
    Dm = _time_matrix(coeffs.D, ts, (d * m, coeffs.du))
    v = vd[:, :N, :]
    drift_add = np.ascontiguousarray(np.einsum("kij,pkj->pki", Bm, v) + b0)
    diff_add = np.ascontiguousarray(
        np.einsum("kij,pkj->pki", Dm, v).reshape(v.shape[0], N, d, m) + s0)
    WA = np.ascontiguousarray(WA)
    WC = np.ascontiguousarray(WC)

    def run(a, b):
        da = drift_add if drift_add.shape[0] == 1 else drift_add[a:b]
        sa = diff_add if diff_add.shape[0] == 1 else diff_add[a:b]
        return _backend.euler_linear(X[a:b], grid.i0, N, grid.dt, offA, WA, offC, WC,
                                     da, sa, np.ascontiguousarray(dW[a:b]), BLOWUP_GUARD)

    fails = [f for f in run_chunks(run, X.shape[0], workers) if f >= 0]
    if fails:
        k = min(fails)
        raise Blowup(f"state norm exceeded {BLOWUP_GUARD:g} at step {k} (t={grid.forward_times[k + 1]:.6g})")


def _euler_generic(coeffs, grid, X, vd, dW):
    P = X.shape[0]
    vdb = np.broadcast_to(vd, (P,) + vd.shape[1:])
    for k in range(grid.n_steps):
        i = grid.i0 + k
        t = grid.forward_times[k]
        past = PathSegment(grid, X, i, "past")
        b = coeffs.drift(t, past, vdb[:, k])
        s = coeffs.diffusion(t, past, vdb[:, k])
        nxt = X[:, i] + b * grid.dt
        for c in range(coeffs.m):
            nxt = nxt + s[:, :, c] * dW[:, k, c][:, None]
        X[:, i + 1] = nxt
        _check_guard(nxt, f"at step {k} (t={grid.forward_times[k + 1]:.6g})")


def simulate_forward(coeffs, init, grid, control=None, delay=None, paths=1, seed=0,
                     workers=1, dW=None):
    """Euler-Maruyama ensemble of the controlled delayed equation.

    Parameters
    ----------
    coeffs : Coefficients
    init : InitialData
    grid : TimeGrid whose history covers every lag used
    control : see `control_array`
    delay : ControlDelay (default: no control delay)
    paths, seed, workers : ensemble size, noise key, thread count
    dW : optional precomputed increments (paths, N, m)

    Returns
    -------
    Ensemble
    """
    delay = ControlDelay() if delay is None else delay
    if dW is None:
        dW = make_noise(grid, paths, coeffs.m, seed, workers)
    dW = np.ascontiguousarray(dW, dtype=float)
    P = dW.shape[0]
    hist = init.state_history(grid, coeffs.d)
    X = np.zeros((P, grid.n_nodes, coeffs.d))
    X[:, : grid.i0 + 1] = hist
    v = control_array(control, grid, coeffs.du, init)
    vd = np.ascontiguousarray(delayed_control(v, delay, grid))
    if coeffs.linear:
        _euler_linear(coeffs, grid, X, vd, dW, workers)
    else:
        _euler_generic(coeffs, grid, X, vd, dW)
    return Ensemble(grid, seed, dW, X, v, vd, lam=init.lam)


def linear_terms(coeffs, grid, X, vd):
    """Drift (P, N, d) and diffusion (P, N, d, m) of linear coefficients at the left nodes."""
    P = X.shape[0]
    N = grid.n_steps
    i0 = grid.i0
    d, m = coeffs.d, coeffs.m
    vdb = np.broadcast_to(vd, (P,) + vd.shape[1:])
    ts = grid.forward_times[:N]
    b0, s0 = coeffs.additive(ts)
    Bm = _time_matrix(coeffs.B, ts, (d, coeffs.du))
    Dm = _time_matrix(coeffs.D, ts, (d * m, coeffs.du))
    drift = np.zeros((P, N, d))
    diff = np.zeros((P, N, d * m))
    for pair, out, rows in ((coeffs.A, drift, d), (coeffs.C, diff, d * m)):
        off, W = coeffs.step_weights(pair, grid, rows)
        if len(off):
            src = (i0 + np.arange(N, dtype=np.int64))[None, :] - off[:, None]
            out += _backend.lag_sum(np.ascontiguousarray(X), np.ascontiguousarray(src),
                                    np.ascontiguousarray(W))
    drift = drift + (np.einsum("kij,pkj->pki", Bm, vdb[:, :N]) + b0)
    diff = diff.reshape(P, N, d, m) + (np.einsum("kij,pkj->pki", Dm, vdb[:, :N]).reshape(P, N, d, m) + s0)
    return drift, diff


def _picard_map(coeffs, grid, Xn, vd, dW):
    """One Picard step: integrate the coefficients frozen along Xn."""
    P = Xn.shape[0]
    N = grid.n_steps
    i0 = grid.i0
    if coeffs.linear:
        drift, diff = linear_terms(coeffs, grid, Xn, vd)
    else:
        vdb = np.broadcast_to(vd, (P,) + vd.shape[1:])
        drift = np.empty((P, N, coeffs.d))
        diff = np.empty((P, N, coeffs.d, coeffs.m))
        for k in range(N):
            past = PathSegment(grid, Xn, i0 + k, "past")
            drift[:, k] = coeffs.drift(grid.forward_times[k], past, vdb[:, k])
            diff[:, k] = coeffs.diffusion(grid.forward_times[k], past, vdb[:, k])
    X = np.array(Xn)
    for k in range(N):
        nxt = X[:, i0 + k] + drift[:, k] * grid.dt
        for c in range(coeffs.m):
            nxt = nxt + diff[:, k, :, c] * dW[:, k, c][:, None]
        X[:, i0 + k + 1] = nxt
    _check_guard(X, "during Picard iteration")
    return X


def picard_solve_forward(coeffs, init, grid, control=None, delay=None, paths=1, seed=0,
                         n_iter=100, tol=1e-24, workers=1, dW=None):
    """Picard iteration on fixed noise, started from the frozen initial value.

    Returns
    -------
    ensemble : Ensemble holding the last iterate
    report : dict with the gap sequence k^n = E[sup_t |X^{n+1} - X^n|^2]
    """
    delay = ControlDelay() if delay is None else delay
    if dW is None:
        dW = make_noise(grid, paths, coeffs.m, seed, workers)
    dW = np.ascontiguousarray(dW, dtype=float)
    P = dW.shape[0]
    X = np.zeros((P, grid.n_nodes, coeffs.d))
    X[:, : grid.i0 + 1] = init.state_history(grid, coeffs.d)
    X[:, grid.i0 + 1:] = X[:, grid.i0: grid.i0 + 1]
    v = control_array(control, grid, coeffs.du, init)
    vd = delayed_control(v, delay, grid)
    gaps = []
    rises = 0
    converged = False
    for _ in range(n_iter):
        Xn = _picard_map(coeffs, grid, X, vd, dW)
        diff = Xn[:, grid.i0:] - X[:, grid.i0:]
        gap = math.fsum(np.max(np.sum(diff * diff, axis=-1), axis=-1)) / P
        if gaps and gap >= gaps[-1]:
            rises += 1
        else:
            rises = 0
        gaps.append(gap)
        X = Xn
        if gap <= tol:
            converged = True
            break
        if rises >= 3:
            raise NoConvergence(f"Picard gap failed to decrease 3 times in a row: {gaps[-4:]}")
    report = {"gaps": gaps, "iterations": len(gaps), "converged": converged}
    return Ensemble(grid, seed, dW, X, v, vd, lam=init.lam), report


def _segment_values(coeffs, grid, X, vd, which):
    """Drift or diffusion along stored states at the left nodes, (P, N, ...)."""
    P = X.shape[0]
    vdb = np.broadcast_to(vd, (P,) + vd.shape[1:])
    out = []
    for k in range(grid.n_steps):
        past = PathSegment(grid, X, grid.i0 + k, "past")
        f = coeffs.drift if which == "drift" else coeffs.diffusion
        out.append(f(grid.forward_times[k], past, vdb[:, k]))
    return np.stack(out, axis=1)


def stability_check(coeffs1, coeffs2, init1, init2, grid, control=None, delay=None,
                    paths=1000, seed=0, workers=1):
    """Both sides of the stability estimate on common noise.

    lhs = E sup_[0,T] |X1 - X2|^2;
    rhs = E |gamma1 - gamma2|^2_lambda + E int |b1 - b2|^2 dt + E int |sigma1 - sigma2|^2 dt,
    with both coefficient gaps evaluated along X2.  The ratio lhs / rhs is an
    empirical lower bound for the constant in the estimate.
    """
    delay = ControlDelay() if delay is None else delay
    dW = make_noise(grid, paths, coeffs1.m, seed, workers)
    e1 = simulate_forward(coeffs1, init1, grid, control, delay, dW=dW, workers=workers)
    e2 = simulate_forward(coeffs2, init2, grid, control, delay, dW=dW, workers=workers)
    diff = e1.X[:, grid.i0:] - e2.X[:, grid.i0:]
    lhs = math.fsum(np.max(np.sum(diff * diff, axis=-1), axis=-1)) / paths
    h1 = np.broadcast_to(init1.state_history(grid, coeffs1.d), (paths, grid.i0 + 1, coeffs1.d))
    h2 = np.broadcast_to(init2.state_history(grid, coeffs2.d), (paths, grid.i0 + 1, coeffs2.d))
    w = np.exp(init1.lam * grid.nodes[: grid.i0 + 1])
    g = np.max((w * np.linalg.norm(h1 - h2, axis=-1)) ** 2, axis=-1)
    db = _segment_values(coeffs1, grid, e2.X, e2.vd, "drift") - _segment_values(coeffs2, grid, e2.X, e2.vd, "drift")
    ds = _segment_values(coeffs1, grid, e2.X, e2.vd, "diff") - _segment_values(coeffs2, grid, e2.X, e2.vd, "diff")
    coef_gap = grid.dt * (np.sum(db * db, axis=(1, 2)) + np.sum(ds * ds, axis=(1, 2, 3)))
    rhs = math.fsum(g + coef_gap) / paths
    ratio = lhs / rhs if rhs > 0 else (0.0 if lhs == 0 else math.inf)
    return {"lhs": lhs, "rhs": rhs, "ratio": ratio}


def a_priori_terms(coeffs, init, grid, control=None, delay=None, paths=1000, seed=0, workers=1):
    """(E sup |X|^2, E|gamma_0|^2_lambda + E int |b(t,0)|^2 + E int |sigma(t,0)|^2)."""
    delay = ControlDelay() if delay is None else delay
    ens = simulate_forward(coeffs, init, grid, control, delay, paths, seed, workers)
    lhs = math.fsum(np.max(np.sum(ens.X ** 2, axis=-1), axis=-1)) / paths
    zero = np.zeros_like(ens.X)
    b = _segment_values(coeffs, grid, zero, ens.vd, "drift")
    s = _segment_values(coeffs, grid, zero, ens.vd, "diff")
    g = np.broadcast_to(init.gamma0_norm_sq(grid, coeffs.d), (paths,))
    rhs = math.fsum(g + grid.dt * (np.sum(b * b, axis=(1, 2)) + np.sum(s * s, axis=(1, 2, 3)))) / paths
    return lhs, rhs


def terminal_stats(ens, fn):
    """Mean and standard error of fn(X(T)) over the ensemble."""
    return mean_se(fn(ens.X[:, -1]))
