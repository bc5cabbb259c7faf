"""Maximum-principle checks: variational state, adjoint pair, gradient and probes.

Discrete conventions (forward grid, node k is time k dt, N steps):

* cost      J = E[ sum_{k<N} l(t_k, X_k, v_d,k) dt + h(X_N) ]
* adjoint   p_N = h_x(X_N),  p_k = E_k[p_{k+1} + f_k dt],  q_k = E_k[p_{k+1} dW_k^T] / dt
            f_k = sum_j a_j K_b(t_{k+j}, th_j)^T p_{k+j+1}
                  + sum_j a_j K_sigma(t_{k+j}, th_j)^T vec(q_{k+j}) + l_x(t_k, X_k, v_d,k)
            with p = 0 after N and q = 0 from N on
* gradient  G_i = E_i[ sum_j a_j phi(t_i, t_i + th_j) H_v,{i+j} ],  i + j <= N - 1
            H_v,k = b_v^T p_{k+1} + sigma_v^T vec(q_k) + l_v(t_k, X_k, v_d,k)

With these choices the discrete directional derivative of J equals
E sum_i dt <G_i, v_i> up to the regression error of the conditional
expectations.
"""
import math
from dataclasses import dataclass, field

import numpy as np

from .delay_ops import DelayMeasure
from .errors import StepTooSmall
from .forward_see import (ControlDelay, InitialData, LinearDelayCoefficients, _time_matrix,
                          control_array, delayed_control, linear_terms, make_noise, simulate_forward)
from .iabsee import BackwardSolution, LinearAnticipatedGenerator, TerminalData, solve_iabsee
from .projection import ConditionalExpectation, FeatureMap, default_features
from .stats import mean_se

# ---------------------------------------------------------------- costs


class QuadraticRunningCost:
    """l(t, x, v) = 1/2 <L x, x> + 1/2 <Lt v, v> on the current state."""

    def __init__(self, L, Ltilde):
        self.L = np.atleast_2d(np.asarray(L, dtype=float))
        self.Ltilde = np.atleast_2d(np.asarray(Ltilde, dtype=float))

    def __call__(self, t, x, v):
        return 0.5 * (np.einsum("pi,ij,pj->p", x, self.L, x) + np.einsum("pi,ij,pj->p", v, self.Ltilde, v))

    def grad_x(self, t, x, v):
        return x @ self.L.T

    def grad_v(self, t, x, v):
        return v @ self.Ltilde.T


class QuadraticTerminalCost:
    """h(x) = 1/2 <G x, x>."""

    def __init__(self, G):
        self.G = np.atleast_2d(np.asarray(G, dtype=float))

    def __call__(self, x):
        return 0.5 * np.einsum("pi,ij,pj->p", x, self.G, x)

    def grad(self, x):
        return x @ self.G.T


class FunctionCost:
    """Running or terminal cost given by callables (value, gradients)."""

    def __init__(self, value, grad_x=None, grad_v=None, grad=None):
        self.value = value
        self._gx, self._gv, self._g = grad_x, grad_v, grad

    def __call__(self, *args):
        return self.value(*args)

    def grad_x(self, t, x, v):
        return self._gx(t, x, v)

    def grad_v(self, t, x, v):
        return self._gv(t, x, v)

    def grad(self, x):
        return self._g(x)


@dataclass
class HamiltonianContext:
    """Coefficients, costs and control delay of a control problem.

    coeffs must carry its derivatives in lag-kernel form (dx_b, dx_sigma,
    b_v, sigma_v); LinearDelayCoefficients does so by construction.
    """

    coeffs: object
    running: object
    terminal: object
    delay: ControlDelay = field(default_factory=ControlDelay)
    init: InitialData = None

    @property
    def variational_coeffs(self):
        c = self.coeffs
        return LinearDelayCoefficients(c.d, c.m, c.du, A=c.dx_b, C=c.dx_sigma, B=c.b_v, D=c.sigma_v)


def hamiltonian_eval(ctx, t, past, v, p, q):
    """<b, p> + <sigma, q>_HS + l for a batch (past segments, controls, p, q)."""
    b = ctx.coeffs.drift(t, past, v)
    s = ctx.coeffs.diffusion(t, past, v)
    return (np.einsum("pi,pi->p", b, p) + np.einsum("pic,pic->p", s, q)
            + ctx.running(t, past.current(), v))


def cost_samples(ctx, ens):
    """Per-trajectory discrete cost sum_k l dt + h(X_N)."""
    g = ens.grid
    N = g.n_steps
    P = ens.paths
    vd = np.broadcast_to(ens.vd, (P,) + ens.vd.shape[1:])
    total = np.zeros(P)
    for k in range(N):
        total += ctx.running(g.forward_times[k], ens.X[:, g.i0 + k], vd[:, k]) * g.dt
    return total + ctx.terminal(ens.X[:, -1])


def cost_evaluate(ctx, ens):
    """Monte Carlo cost and batch-means standard error."""
    return mean_se(cost_samples(ctx, ens))


# ---------------------------------------------------------------- variational / adjoint


def solve_variational(ctx, ens, vhat):
    """X-hat on the noise of `ens` for perturbation vhat (zero history)."""
    g = ens.grid
    zero = InitialData(np.zeros(ctx.coeffs.d), None, ens.lam)
    v = control_array(vhat, g, ctx.coeffs.du, None)
    v[:, : g.i0] = 0.0
    return simulate_forward(ctx.variational_coeffs, zero, g, v, ctx.delay, dW=ens.dW)


def adjoint_generator(ctx, ens):
    """Generator of the adjoint equation along the trajectories of `ens`."""
    c = ctx.coeffs
    g = ens.grid
    P = ens.paths
    vd = np.broadcast_to(ens.vd, (P,) + ens.vd.shape[1:])

    def forcing(k):
        return ctx.running.grad_x(g.forward_times[k], ens.X[:, g.i0 + k], vd[:, k])

    y_terms = [c.dx_b] if c.dx_b is not None else []
    z_terms = [c.dx_sigma] if c.dx_sigma is not None else []
    gen = LinearAnticipatedGenerator(y_terms, z_terms, forcing)
    gen.structure = "smp-adjoint"
    return gen


def solve_adjoint(ctx, ens, features=None, ridge=None, estimator=None, method="sweep"):
    """Adjoint pair (p, q) as a BackwardSolution on [0, T + lead]."""
    if estimator is None:
        estimator = make_estimator(ctx, ens, features, ridge)
    terminal = TerminalData(ctx.terminal.grad(ens.X[:, -1])[:, None, :])
    gen = adjoint_generator(ctx, ens)
    return solve_iabsee(gen, terminal, ens, estimator=estimator, method=method)


def make_estimator(ctx, ens, features=None, ridge=None, degree=2):
    """Regression on the current state plus the lagged states used by the drift."""
    if features is None:
        lags = []
        for pair in (ctx.coeffs.dx_b, ctx.coeffs.dx_sigma):
            if pair is not None and pair[1].atoms:
                lags += [ens.grid.lag_steps(l) for l, _ in pair[1].atoms]
        features = default_features(lags, degree)
    return ConditionalExpectation(ens.grid, ens.X, ens.W, features, ridge)


def hamiltonian_gradient_v(ctx, ens, adjoint):
    """H_v at nodes 0..N-1, shape (P, N, du)."""
    c = ctx.coeffs
    g = ens.grid
    N = g.n_steps
    P = ens.paths
    ts = g.forward_times[:N]
    Bm = _time_matrix(c.b_v, ts, (c.d, c.du))
    Dm = _time_matrix(c.sigma_v, ts, (c.d * c.m, c.du))
    p1 = adjoint.Y[:, 1:N + 1]
    qk = adjoint.Z[:, :N].reshape(P, N, c.d * c.m)
    vd = np.broadcast_to(ens.vd, (P,) + ens.vd.shape[1:])
    Hv = np.einsum("kij,pki->pkj", Bm, p1) + np.einsum("kij,pki->pkj", Dm, qk)
    for k in range(N):
        Hv[:, k] += ctx.running.grad_v(ts[k], ens.X[:, g.i0 + k], vd[:, k])
    return Hv


def gradient_integrand(ctx, ens, adjoint):
    """Pathwise sum_j a_j phi(t_i, t_i + th_j) H_v,{i+j} on nodes 0..N, shape (P, N+1, du)."""
    g = ens.grid
    N = g.n_steps
    Hv = hamiltonian_gradient_v(ctx, ens, adjoint)
    q = ctx.delay.measure.quadrature(g.dt)
    out = np.zeros((Hv.shape[0], N + 1, Hv.shape[2]))
    ti = g.forward_times
    for j, off in enumerate(q.offsets):
        n = N - off
        if n <= 0:
            continue
        w = q.weights[j] * ctx.delay.phi(ti[:n], ti[:n] + off * g.dt)
        out[:, :n] += w[None, :, None] * Hv[:, off:off + n]
    return out


def gradient(ctx, ens, adjoint, estimator=None):
    """G_i = E_i[gradient integrand] on nodes 0..N (G_N = 0), plus the pathwise integrand."""
    if estimator is None:
        estimator = make_estimator(ctx, ens)
    Gam = gradient_integrand(ctx, ens, adjoint)
    G = np.zeros_like(Gam)
    for i in range(ens.grid.n_steps):
        G[:, i] = estimator.project(i, Gam[:, i])
    return G, Gam


def necessary_residual(ctx, u, ens, adjoint, probes, nodes=None, estimator=None):
    """Table of mean <G(t), v_k - u(t)> with batch-means SE.

    Parameters
    ----------
    u : control on the forward nodes, (1 or P, N + 1, du)
    probes : array (K, du) of probe control values
    nodes : forward node indices (default: all of 0..N-1)

    Returns
    -------
    dict with 'nodes', 'times', 'values' (n_nodes, K), 'se' (n_nodes, K), 'G'
    """
    g = ens.grid
    G, Gam = gradient(ctx, ens, adjoint, estimator)
    nodes = np.arange(g.n_steps) if nodes is None else np.asarray(nodes, dtype=int)
    probes = np.atleast_2d(np.asarray(probes, dtype=float))
    u = np.broadcast_to(np.asarray(u, dtype=float), (ens.paths,) + np.shape(u)[1:])
    vals = np.zeros((len(nodes), len(probes)))
    ses = np.zeros_like(vals)
    for a, i in enumerate(nodes):
        for b, v in enumerate(probes):
            diff = v[None, :] - u[:, i]
            vals[a, b] = math.fsum(np.einsum("pj,pj->p", G[:, i], diff)) / ens.paths
            ses[a, b] = mean_se(np.einsum("pj,pj->p", Gam[:, i], diff))[1]
    return {"nodes": nodes, "times": g.forward_times[nodes], "values": vals, "se": ses, "G": G}


# ---------------------------------------------------------------- duality and derivatives


def duality_bookkeeping(ctx, ens, vhat, adjoint, xhat=None):
    """Both sides of the integration-by-parts identity for <p, X-hat>.

    lhs = E <h_x(X(T)), X-hat(T)>
    rhs = E sum_k dt [<beta_k, p_{k+1}> - <f_k, X-hat_k> + <Sigma_k, q_k>]

    where beta, Sigma are the drift and diffusion of the variational
    equation and f is the pathwise adjoint generator.
    """
    g = ens.grid
    N, dt = g.n_steps, g.dt
    if xhat is None:
        xhat = solve_variational(ctx, ens, vhat)
    beta, Sig = linear_terms(ctx.variational_coeffs, g, xhat.X, xhat.vd)
    gen = adjoint_generator(ctx, ens)
    p, q = adjoint.Y, adjoint.Z
    gen.prepare(g, p.shape[2], q.shape[3])
    P = ens.paths
    tb = np.zeros(P)
    ta = np.zeros(P)
    ts = np.zeros(P)
    for k in range(N):
        tb += np.einsum("pi,pi->p", beta[:, k], p[:, k + 1]) * dt
        ta += np.einsum("pi,pi->p", gen(k, p, q), xhat.X[:, g.i0 + k]) * dt
        ts += np.einsum("pic,pic->p", Sig[:, k], q[:, k]) * dt
    lhs_s = np.einsum("pi,pi->p", ctx.terminal.grad(ens.X[:, -1]), xhat.X[:, -1])
    rhs_s = tb - ta + ts
    lhs, lhs_se = mean_se(lhs_s)
    rhs, rhs_se = mean_se(rhs_s)
    gap, gap_se = mean_se(lhs_s - rhs_s)
    return {"lhs": lhs, "lhs_se": lhs_se, "rhs": rhs, "rhs_se": rhs_se,
            "term_b": mean_se(tb)[0], "term_adjoint": mean_se(ta)[0], "term_sigma": mean_se(ts)[0],
            "gap": gap, "gap_se": gap_se, "se": max(lhs_se, rhs_se)}


def _with_control(ctx, ens, control):
    return simulate_forward(ctx.coeffs, ctx.init, ens.grid, control, ctx.delay, dW=ens.dW)


def analytic_derivative_samples(ctx, ens, vhat, xhat=None):
    """Pathwise sum_k (<l_x, X-hat_k> + <l_v, v-hat_d,k>) dt + <h_x(X_N), X-hat_N>."""
    g = ens.grid
    if xhat is None:
        xhat = solve_variational(ctx, ens, vhat)
    P = ens.paths
    vd = np.broadcast_to(ens.vd, (P,) + ens.vd.shape[1:])
    vhd = np.broadcast_to(xhat.vd, (P,) + xhat.vd.shape[1:])
    total = np.zeros(P)
    for k in range(g.n_steps):
        t = g.forward_times[k]
        x = ens.X[:, g.i0 + k]
        total += (np.einsum("pi,pi->p", ctx.running.grad_x(t, x, vd[:, k]), xhat.X[:, g.i0 + k])
                  + np.einsum("pi,pi->p", ctx.running.grad_v(t, x, vd[:, k]), vhd[:, k])) * g.dt
    return total + np.einsum("pi,pi->p", ctx.terminal.grad(ens.X[:, -1]), xhat.X[:, -1])


def gateaux_derivative(ctx, ens, u, vhat, eps_ladder=(1e-1, 5e-2)):
    """Central finite difference of J at u in direction vhat, Richardson-extrapolated.

    Uses the noise of `ens` for every evaluation.  Returns a dict with the
    finite-difference value, the analytic expression and their SEs.
    """
    g = ens.grid
    u = control_array(u, g, ctx.coeffs.du, ctx.init)
    vh = control_array(vhat, g, ctx.coeffs.du, None)
    vh[:, : g.i0] = 0.0
    fd = []
    fd_samples = []
    for eps in eps_ladder:
        jp = cost_samples(ctx, _with_control(ctx, ens, u + eps * vh))
        jm = cost_samples(ctx, _with_control(ctx, ens, u - eps * vh))
        dj = math.fsum(jp - jm) / len(jp)
        scale = (math.fsum(np.abs(jp)) + math.fsum(np.abs(jm))) / len(jp)
        noise = 10.0 * np.finfo(float).eps * max(scale, 1e-300)
        samples = (jp - jm) / (2 * eps)
        a_guess = abs(math.fsum(analytic_derivative_samples(ctx, ens, vh)) / len(jp))
        if abs(dj) <= noise and a_guess * 2 * eps > noise:
            raise StepTooSmall(f"cost difference at eps={eps} is below rounding noise")
        fd.append(dj / (2 * eps))
        fd_samples.append(samples)
    if len(fd) >= 2:
        r = (eps_ladder[-2] / eps_ladder[-1]) ** 2
        value = (r * fd[-1] - fd[-2]) / (r - 1)
        fd_s = (r * fd_samples[-1] - fd_samples[-2]) / (r - 1)
    else:
        value, fd_s = fd[0], fd_samples[0]
    an_s = analytic_derivative_samples(ctx, ens, vh)
    an, an_se = mean_se(an_s)
    _, fd_se = mean_se(fd_s)
    diff, diff_se = mean_se(fd_s - an_s)
    return {"fd": value, "fd_ladder": fd, "fd_se": fd_se, "analytic": an, "analytic_se": an_se,
            "gap": value - an, "gap_se": diff_se}


def gradient_pairing(ctx, ens, adjoint, vhat, estimator=None):
    """E sum_i dt <G_i, v-hat_i>, the reduced form of the directional derivative."""
    g = ens.grid
    G, Gam = gradient(ctx, ens, adjoint, estimator)
    vh = control_array(vhat, g, ctx.coeffs.du, None)[:, g.i0:]
    vh = np.broadcast_to(vh, G.shape)
    s = np.einsum("pkj,pkj->p", G[:, :-1], vh[:, :-1]) * g.dt
    return mean_se(s)


def sufficient_conditions_probe(ctx, n_samples=200, seed=0, t=0.0, scale=1.0):
    """Sampled convexity gaps of (x, v) -> H and of h.

    H is evaluated on random current states with zero history, which is
    where the running cost acts; the drift and diffusion parts are linear
    in (x, v) for lag-kernel coefficients and do not contribute to the gap.
    """
    rng = np.random.default_rng(seed)
    c = ctx.coeffs
    d, du, m = c.d, c.du, c.m
    x1 = scale * rng.standard_normal((n_samples, d))
    x2 = scale * rng.standard_normal((n_samples, d))
    v1 = scale * rng.standard_normal((n_samples, du))
    v2 = scale * rng.standard_normal((n_samples, du))
    p = rng.standard_normal((n_samples, d))
    q = rng.standard_normal((n_samples, d, m))
    from .fading_paths import PathSegment, TimeGrid
    grid = TimeGrid(1.0, 1.0, 0.0)

    def H(x, v):
        vals = np.zeros((n_samples, grid.n_nodes, d))
        vals[:, grid.i0] = x
        past = PathSegment(grid, vals, grid.i0, "past")
        return hamiltonian_eval(ctx, t, past, v, p, q)

    def dH(x, v, dx, dv):
        vals = np.zeros((n_samples, grid.n_nodes, d))
        vals[:, grid.i0] = dx
        past = PathSegment(grid, vals, grid.i0, "past")
        lin = LinearDelayCoefficients(d, m, du, A=c.dx_b, C=c.dx_sigma, B=c.b_v, D=c.sigma_v)
        db = lin.drift(t, past, dv)
        ds = lin.diffusion(t, past, dv)
        return (np.einsum("pi,pi->p", db, p) + np.einsum("pic,pic->p", ds, q)
                + np.einsum("pi,pi->p", ctx.running.grad_x(t, x, v), dx)
                + np.einsum("pi,pi->p", ctx.running.grad_v(t, x, v), dv))

    gap_H = H(x2, v2) - H(x1, v1) - dH(x1, v1, x2 - x1, v2 - v1)
    gap_h = ctx.terminal(x2) - ctx.terminal(x1) - np.einsum("pi,pi->p", ctx.terminal.grad(x1), x2 - x1)
    tol = -1e-10
    return {"min_gap_H": float(gap_H.min()), "min_gap_h": float(gap_h.min()),
            "violations_H": int(np.sum(gap_H < tol)), "violations_h": int(np.sum(gap_h < tol)),
            "convex": bool(gap_H.min() >= tol and gap_h.min() >= tol)}


__all__ = ["QuadraticRunningCost", "QuadraticTerminalCost", "FunctionCost", "HamiltonianContext",
           "hamiltonian_eval", "cost_samples", "cost_evaluate", "solve_variational", "solve_adjoint",
           "adjoint_generator", "make_estimator", "hamiltonian_gradient_v", "gradient_integrand",
           "gradient", "necessary_residual", "duality_bookkeeping", "analytic_derivative_samples",
           "gateaux_derivative", "gradient_pairing", "sufficient_conditions_probe", "BackwardSolution",
           "DelayMeasure", "FeatureMap", "make_noise", "delayed_control"]
