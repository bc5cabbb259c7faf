"""Linear-quadratic control with delayed state and control.

State   dX = (A X_t + B v_d + b0) dt + (C X_t + D v_d + s0) dW
Cost    J  = 1/2 E[ int <L X, X> + <Lt v_d, v_d> dt + <G X(T), X(T)> ]

A and C act on the past segment through (LagKernel, DelayMeasure) pairs;
a plain matrix means a Dirac at lag zero.  L acts on the current state.
"""
import math
from dataclasses import dataclass, field

import numpy as np

from .delay_ops import DelayMeasure, MatrixKernel
from .errors import NoConvergence, SingularWeight, StiffRiccati
from .forward_see import (ControlDelay, LinearDelayCoefficients, control_array, make_noise,
                          simulate_forward)
from .smp import (HamiltonianContext, QuadraticRunningCost, QuadraticTerminalCost, cost_samples,
                  gradient, make_estimator, solve_adjoint)
from .stats import mean_se


def _as_pair(M, rows, d):
    if M is None:
        return None
    if isinstance(M, tuple):
        return M
    return (MatrixKernel(np.asarray(M, dtype=float).reshape(rows, d)), DelayMeasure.dirac(0.0))


@dataclass
class LQSpec:
    """Coefficients and weights of a linear-quadratic problem.

    Parameters
    ----------
    d, m, du : int
    A : (d, d) array or (LagKernel, DelayMeasure)
    B : (d, du) array
    C : (d*m, d) array, pair, or None
    D : (d*m, du) array or None
    L : (d, d) state weight, symmetric PSD
    Ltilde : (du, du) control weight, symmetric with eigenvalues >= margin
    G : (d, d) terminal weight (identity by default)
    b0, s0 : optional additive drift t -> (d,) and noise t -> (d, m)
    """

    d: int
    m: int
    du: int
    A: object
    B: object
    C: object = None
    D: object = None
    L: object = None
    Ltilde: object = None
    G: object = None
    b0: object = None
    s0: object = None
    margin: float = 1e-8

    def __post_init__(self):
        d, du = self.d, self.du
        self.L = np.zeros((d, d)) if self.L is None else np.atleast_2d(np.asarray(self.L, dtype=float))
        self.Ltilde = np.eye(du) if self.Ltilde is None else np.atleast_2d(np.asarray(self.Ltilde, dtype=float))
        self.G = np.eye(d) if self.G is None else np.atleast_2d(np.asarray(self.G, dtype=float))
        self.B = np.asarray(self.B, dtype=float).reshape(d, du)
        if self.D is not None:
            self.D = np.asarray(self.D, dtype=float).reshape(d * self.m, du)
        check_weight(self.Ltilde, self.margin)
        if np.min(np.linalg.eigvalsh(0.5 * (self.L + self.L.T))) < -1e-12:
            raise ValueError("state weight L must be positive semidefinite")

    @property
    def coefficients(self):
        return LinearDelayCoefficients(self.d, self.m, self.du, A=_as_pair(self.A, self.d, self.d),
                                       C=_as_pair(self.C, self.d * self.m, self.d), B=self.B, D=self.D,
                                       b0=self.b0, s0=self.s0)

    def context(self, init, delay=None):
        return HamiltonianContext(self.coefficients, QuadraticRunningCost(self.L, self.Ltilde),
                                  QuadraticTerminalCost(self.G), delay or ControlDelay(), init)

    @property
    def has_state_delay(self):
        for M in (self.A, self.C):
            if isinstance(M, tuple):
                return True
        return False


def check_weight(Lt, margin):
    """Raise SingularWeight unless Lt is symmetric with eigenvalues >= margin."""
    Lt = np.atleast_2d(np.asarray(Lt, dtype=float))
    if not np.allclose(Lt, Lt.T, rtol=0, atol=1e-12 * max(1.0, np.abs(Lt).max())):
        raise SingularWeight("control weight must be symmetric")
    lo = float(np.min(np.linalg.eigvalsh(Lt)))
    if not lo >= margin:
        raise SingularWeight(f"control weight eigenvalue {lo:.3g} below margin {margin:.3g}")
    return lo


def cost_evaluate(spec, ensemble, init=None, delay=None):
    """Monte Carlo cost of a simulated ensemble and its batch-means SE."""
    return mean_se(cost_samples(spec.context(init, delay), ensemble))


def lq_optimal_control(spec, ensemble, adjoint, delay=None, estimator=None, u=None, init=None):
    """Control from the adjoint pair.

    Without `u` this is -Lt^{-1} E_t[ int phi(t, t+th) (B^T p + D^T q)(t+th) alpha(dth) ].
    With the current control `u` it returns u - Lt^{-1} G(t), where G is
    the full gradient including the Lt v_d term of the Hamiltonian; both
    agree for an undelayed control with phi = 1.

    Returns
    -------
    array (P, N + 1, du) on the forward nodes
    """
    check_weight(spec.Ltilde, spec.margin)
    ctx = spec.context(init, delay)
    if estimator is None:
        estimator = make_estimator(ctx, ensemble)
    if u is None:
        ctx = HamiltonianContext(ctx.coeffs, QuadraticRunningCost(spec.L, np.zeros_like(spec.Ltilde)),
                                 ctx.terminal, ctx.delay, init)
        G, _ = gradient(ctx, ensemble, adjoint, estimator)
        return -np.linalg.solve(spec.Ltilde, G[..., None])[..., 0]
    G, _ = gradient(ctx, ensemble, adjoint, estimator)
    g = ensemble.grid
    u = np.broadcast_to(control_array(u, g, spec.du, init)[:, g.i0:], G.shape)
    return u - np.linalg.solve(spec.Ltilde, G[..., None])[..., 0]


@dataclass
class LQSolution:
    """Result of the damped forward-backward iteration."""

    u_star: np.ndarray
    ensemble: object
    adjoint: object
    J_star: float
    J_se: float
    trace: list = field(default_factory=list)
    converged: bool = True

    @property
    def iterations(self):
        return len(self.trace)


def m2_norm(u, dt):
    """sqrt(E sum_k dt |u_k|^2) over nodes 0..N-1."""
    u = np.asarray(u, dtype=float)
    s = np.sum(u[:, :-1] ** 2, axis=(1, 2)) * dt
    return math.sqrt(math.fsum(s) / u.shape[0])


def fbsde_fixed_point(spec, init, grid, delay=None, paths=2000, seed=0, rho=0.5, tol=1e-4,
                      max_iter=20, features=None, ridge=None, workers=1, u0=None, degree=2):
    """Damped iteration u <- u - rho Lt^{-1} G(u) on fixed noise.

    Each step simulates the state under u, solves the adjoint and applies
    `lq_optimal_control`.  Stops when the M^2 step is below
    tol * max(1, |u|_M2).

    Returns
    -------
    LQSolution; `trace` holds per-iteration J, SE, step size and the SE of
    the cost change relative to the previous iterate
    """
    ctx = spec.context(init, delay)
    dW = make_noise(grid, paths, spec.m, seed, workers)
    P, N = paths, grid.n_steps
    u = np.zeros((1, N + 1, spec.du)) if u0 is None else control_array(u0, grid, spec.du, init)[:, grid.i0:]
    u = np.broadcast_to(u, (P, N + 1, spec.du)).copy()
    trace = []
    prev = None
    for it in range(1, max_iter + 1):
        ens = simulate_forward(ctx.coeffs, init, grid, u, ctx.delay, dW=dW, workers=workers)
        cs = cost_samples(ctx, ens)
        J, se = mean_se(cs)
        dJ_se = mean_se(cs - prev)[1] if prev is not None else 0.0
        est = make_estimator(ctx, ens, features, ridge, degree)
        adj = solve_adjoint(ctx, ens, estimator=est)
        target = lq_optimal_control(spec, ens, adj, ctx.delay, est, u, init)
        new = (1.0 - rho) * u + rho * target
        step = m2_norm(new - u, grid.dt)
        trace.append({"iteration": it, "J": J, "se": se, "dJ_se": dJ_se, "step": step})
        prev = cs
        if step <= tol * max(1.0, m2_norm(u, grid.dt)):
            return LQSolution(u, ens, adj, J, se, trace, True)
        u = new
    raise NoConvergence(f"no fixed point after {max_iter} iterations; steps "
                        f"{[round(t['step'], 8) for t in trace[-4:]]}")


def _rk4(rhs, P_T, T, n):
    h = T / n
    P = np.array(P_T, dtype=float)
    out = [P]
    for _ in range(n):
        k1 = rhs(P)
        k2 = rhs(P + 0.5 * h * k1)
        k3 = rhs(P + 0.5 * h * k2)
        k4 = rhs(P + h * k3)
        P = P + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        out.append(P)
    return np.array(out[::-1])


@dataclass
class RiccatiSolution:
    times: np.ndarray
    P: np.ndarray
    gain: np.ndarray
    J_opt: float

    def feedback(self, t, x):
        """u = -K(t) x with K interpolated linearly in t."""
        K = np.array([np.interp(t, self.times, self.gain[:, i, j]) for i in range(self.gain.shape[1])
                      for j in range(self.gain.shape[2])]).reshape(self.gain.shape[1:])
        return -np.asarray(x) @ K.T


def riccati_oracle(spec, gamma0, T, n_steps=1000, s0_const=None):
    """Optimal cost of the undelayed problem from the matrix Riccati equation.

    -P' = A^T P + P A + C^T P C - (P B + C^T P D)(Lt + D^T P D)^{-1}(B^T P + D^T P C) + L,
    P(T) = G, with C, D split into their m noise columns.  Additive noise
    s0 (constant, (d, m)) contributes 1/2 T tr(s0^T P s0) averaged over time.

    Raises StiffRiccati when halving the RK4 step moves P(0) by more than 1e-6.
    """
    if spec.has_state_delay:
        raise ValueError("Riccati oracle needs lag-free coefficients")
    d, m, du = spec.d, spec.m, spec.du
    A = np.asarray(spec.A, dtype=float).reshape(d, d)
    B = spec.B
    Cc = np.zeros((m, d, d)) if spec.C is None else np.asarray(spec.C, dtype=float).reshape(d, m, d).transpose(1, 0, 2)
    Dc = np.zeros((m, d, du)) if spec.D is None else spec.D.reshape(d, m, du).transpose(1, 0, 2)
    s0 = None if s0_const is None else np.asarray(s0_const, dtype=float).reshape(d, m)
    if s0 is not None and (np.any(Cc) or np.any(Dc)):
        raise ValueError("additive noise is supported only with state- and control-free diffusion")
    check_weight(spec.Ltilde, spec.margin)

    def gain_parts(P):
        S = spec.Ltilde + sum(Dc[c].T @ P @ Dc[c] for c in range(m))
        M = B.T @ P + sum(Dc[c].T @ P @ Cc[c] for c in range(m))
        return S, M

    def rhs(P):
        S, M = gain_parts(P)
        out = A.T @ P + P @ A + sum(Cc[c].T @ P @ Cc[c] for c in range(m)) - M.T @ np.linalg.solve(S, M) + spec.L
        return 0.5 * (out + out.T)

    with np.errstate(over="ignore", invalid="ignore"):
        P1 = _rk4(rhs, spec.G, T, n_steps)
        P2 = _rk4(rhs, spec.G, T, 2 * n_steps)
    change = float(np.max(np.abs(P1[0] - P2[0])))
    if not change <= 1e-6:
        raise StiffRiccati(f"P(0) moved by {change:.3g} under step halving")
    times = np.linspace(0.0, T, 2 * n_steps + 1)
    gains = []
    for P in P2:
        S, M = gain_parts(P)
        gains.append(np.linalg.solve(S, M))
    g0 = np.asarray(gamma0, dtype=float).reshape(d)
    J = 0.5 * float(g0 @ P2[0] @ g0)
    if s0 is not None:
        tr = np.array([np.trace(s0.T @ P @ s0) for P in P2])
        h = T / (2 * n_steps)
        J += 0.5 * h * (0.5 * tr[0] + tr[1:-1].sum() + 0.5 * tr[-1])
    return RiccatiSolution(times, P2, np.array(gains), J)


__all__ = ["LQSpec", "LQSolution", "RiccatiSolution", "check_weight", "cost_evaluate",
           "lq_optimal_control", "fbsde_fixed_point", "riccati_oracle", "m2_norm"]
