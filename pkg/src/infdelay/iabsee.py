"""Backward equations whose generator reads the future of the solution.

    Y(t) = xi(T) + int_t^T f(s, Y_{s+}, Z_{s+}) ds - int_t^T Z(s) dW(s),  t in [0, T]
    Y(t) = xi(t),  Z(t) = eta(t),  t >= T

Discretization on the forward grid of an ensemble (node k is time k dt):

    Z_k = E_k[(Y_{k+1} - E_k[Y_{k+1}]) dW_k^T] / dt
    Y_k = E_k[Y_{k+1}] + E_k[f_k] dt

where E_k is a regression on time-t features.  Centering Y_{k+1} before forming the
Z target leaves the exact conditional expectation unchanged and removes
most of the Monte Carlo noise from the Z fit.  A generator term with lead
j reads Y at node k + j + 1 and Z at node k + j, so every read is either
strictly later than k or the Z value computed first at node k.

The outer Picard loop freezes the generator argument at the previous
iterate.  Because every read lies in the already solved part of the
current sweep, method="sweep" reaches the same discrete fixed point in a
single backward pass.
"""
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NoConvergence
from .projection import ConditionalExpectation, FeatureMap


@dataclass
class TerminalData:
    """Values of (Y, Z) on [T, T + lead].

    xi : array (1 or P, n, d) on nodes T, T + dt, ...; nodes beyond n are zero
    eta : array (1 or P, n, d, m) or None (zero)
    beta : weight of the Z norm
    """

    xi: np.ndarray
    eta: np.ndarray = None
    beta: float = 0.0

    @classmethod
    def constant(cls, value, d=None):
        v = np.atleast_1d(np.asarray(value, dtype=float))
        return cls(v.reshape(1, 1, -1))

    @classmethod
    def from_function(cls, fn, grid, lead_steps, d):
        """xi(t) = fn(times) for t in [T, T + lead]; fn returns (n, d) or (P, n, d)."""
        ts = grid.T + np.arange(lead_steps + 1) * grid.dt
        v = np.asarray(fn(ts), dtype=float)
        if v.ndim == 2:
            v = v[None]
        return cls(v.reshape(v.shape[0], lead_steps + 1, d))

    @property
    def d(self):
        return self.xi.shape[-1]


class Generator:
    """Base class: evaluate f at forward node k for all trajectories."""

    max_lead = 0
    structure = "generic"

    def __call__(self, k, Y, Z):
        raise NotImplementedError

    def prepare(self, grid, d, m):
        """Hook to precompute node tables before a solve."""


class ZeroGenerator(Generator):
    structure = "zero"

    def __call__(self, k, Y, Z):
        return np.zeros(Y.shape[:1] + Y.shape[2:])


class ConstantGenerator(Generator):
    structure = "constant"

    def __init__(self, c):
        self.c = np.atleast_1d(np.asarray(c, dtype=float))

    def __call__(self, k, Y, Z):
        return np.broadcast_to(self.c, (Y.shape[0], Y.shape[2])).copy()


class CallableGenerator(Generator):
    """f(k, Y, Z) supplied directly; `max_lead` bounds the steps it reads ahead."""

    def __init__(self, fn, max_lead=0):
        self.fn = fn
        self.max_lead = int(max_lead)

    def __call__(self, k, Y, Z):
        return self.fn(k, Y, Z)


class LinearAnticipatedGenerator(Generator):
    """f(t) = sum over terms of int K(t + th, th)^T U(t + th) alpha(d th) + g(t).

    Parameters
    ----------
    y_terms : list of (LagKernel, DelayMeasure)
        Kernels of shape (d, d) applied (transposed) to Y.
    z_terms : list of (LagKernel, DelayMeasure)
        Kernels of shape (d*m, d) applied (transposed) to Z flattened row-wise.
    forcing : None, a vector, or a callable k -> (1 or P, d)

    Lags are read with the node convention of the module docstring, so a
    Dirac at zero on Y reads Y_{k+1}.
    """

    structure = "integral-anticipated"

    def __init__(self, y_terms=(), z_terms=(), forcing=None):
        self.y_terms = list(y_terms)
        self.z_terms = list(z_terms)
        self.forcing = forcing
        self._tables = None
        self._grid = None

    @classmethod
    def pointwise(cls, leads, matrices, d, forcing=None):
        """f(t) = sum_i M_i Y(t + lead_i) + g(t)."""
        from .delay_ops import DelayMeasure, MatrixKernel
        terms = [(MatrixKernel(np.asarray(M, dtype=float).reshape(d, d).T), DelayMeasure.dirac(l))
                 for l, M in zip(leads, matrices)]
        g = cls(terms, (), forcing)
        g.structure = "pointwise-anticipated"
        return g

    def lead_steps(self, dt):
        steps = [0]
        for _, measure in self.y_terms + self.z_terms:
            steps.append(measure.quadrature(dt).max_offset)
        return max(steps)

    def prepare(self, grid, d, m):
        if self._grid == grid and self._tables is not None:
            return
        N = grid.n_steps
        self.max_lead = self.lead_steps(grid.dt)
        tables = []
        for terms, rows in ((self.y_terms, d), (self.z_terms, d * m)):
            entries = []
            for kernel, measure in terms:
                q = measure.quadrature(grid.dt)
                for j, off in enumerate(q.offsets):
                    ts = (np.arange(N) + off) * grid.dt
                    K = kernel.checked_sample(ts, off * grid.dt)
                    if K.shape[1:] != (rows, d):
                        raise ValueError(f"generator kernel must have shape {(rows, d)}")
                    M = q.weights[j] * np.swapaxes(K, 1, 2)
                    entries.append((int(off), np.ascontiguousarray(M)))
            tables.append(entries)
        self._tables = tables
        self._grid = grid

    def __call__(self, k, Y, Z):
        P, d = Y.shape[0], Y.shape[2]
        out = np.zeros((P, d))
        y_tab, z_tab = self._tables
        for off, M in y_tab:
            out += Y[:, k + off + 1] @ M[k].T
        if z_tab:
            for off, M in z_tab:
                out += Z[:, k + off].reshape(P, -1) @ M[k].T
        if self.forcing is not None:
            g = self.forcing(k) if callable(self.forcing) else np.asarray(self.forcing, dtype=float)
            out += g
        return out


@dataclass
class BackwardSolution:
    """(Y, Z) on the nodes of [0, T + lead dt] of the forward grid."""

    grid: object
    lead: int
    Y: np.ndarray
    Z: np.ndarray
    gaps: list = field(default_factory=list)

    @property
    def times(self):
        return np.arange(self.Y.shape[1]) * self.grid.dt


def _terminal_arrays(terminal, P, N, L, d, m):
    n = N + L + 1
    Y = np.zeros((P, n, d))
    Z = np.zeros((P, n, d, m))
    xi = np.asarray(terminal.xi, dtype=float)
    nx = min(xi.shape[1], L + 1)
    Y[:, N:N + nx] = xi[:, :nx]
    if terminal.eta is not None:
        eta = np.asarray(terminal.eta, dtype=float)
        ne = min(eta.shape[1], L + 1)
        Z[:, N:N + ne] = eta[:, :ne]
    return Y, Z


def _sweep(generator, estimator, dW, dt, N, Y, Z, Yf, Zf):
    """One backward pass writing into (Y, Z) on [0, T); (Yf, Zf) feed the generator."""
    P, _, d = Y.shape
    for k in range(N - 1, -1, -1):
        y1 = Y[:, k + 1]
        ey = estimator.project(k, y1)
        zt = (y1 - ey)[:, :, None] * dW[:, k, None, :] / dt
        Z[:, k] = estimator.project(k, zt)
        f = generator(k, Yf, Zf)
        Y[:, k] = ey + estimator.project(k, f) * dt


def solve_iabsee(generator, terminal, ensemble, features=FeatureMap(), ridge=None,
                 n_picard=50, tol=1e-20, method="picard", beta=None, estimator=None):
    """Solve the anticipated backward equation on an ensemble.

    Parameters
    ----------
    generator : Generator
    terminal : TerminalData
    ensemble : Ensemble (states provide regression features)
    features, ridge : regression settings (ignored when `estimator` is given)
    n_picard, tol : Picard limits; the gap is u^n = E sup_t e^{beta t}|Y^n - Y^{n-1}|^2
    method : "picard" (frozen previous iterate) or "sweep" (single pass)

    Returns
    -------
    BackwardSolution
    """
    grid = ensemble.grid
    N, dt = grid.n_steps, grid.dt
    P = ensemble.paths
    d, m = terminal.d, ensemble.m
    generator.prepare(grid, d, m)
    L = int(generator.max_lead)
    beta = terminal.beta if beta is None else beta
    if estimator is None:
        estimator = ConditionalExpectation(grid, ensemble.X, ensemble.W, features, ridge)
    Y, Z = _terminal_arrays(terminal, P, N, L, d, m)
    weight = np.exp(beta * np.arange(N + L + 1) * dt)
    if method == "sweep":
        _sweep(generator, estimator, ensemble.dW, dt, N, Y, Z, Y, Z)
        return BackwardSolution(grid, L, Y, Z, [])
    if method != "picard":
        raise ValueError("method must be 'picard' or 'sweep'")
    gaps = []
    rises = 0
    for _ in range(n_picard):
        Yn, Zn = Y.copy(), Z.copy()
        _sweep(generator, estimator, ensemble.dW, dt, N, Yn, Zn, Y, Z)
        diff = np.sum((Yn - Y) ** 2, axis=-1) * weight
        gap = math.fsum(np.max(diff, axis=1)) / P
        if gaps and gap >= gaps[-1] and gap > 0:
            rises += 1
        else:
            rises = 0
        gaps.append(gap)
        Y, Z = Yn, Zn
        if gap <= tol:
            break
        if rises >= 3:
            raise NoConvergence(f"Picard gap non-decreasing 3 times: {gaps[-4:]}")
    return BackwardSolution(grid, L, Y, Z, gaps)


def backward_residual(solution, generator, ensemble, nodes=None):
    """Mean over trajectories and sampled nodes of the squared integral-form defect.

    For each sampled node k the defect is
    Y_k - [Y_N + sum_{i>=k} f_i dt - sum_{i>=k} Z_i dW_i].
    """
    grid = solution.grid
    N, dt = grid.n_steps, grid.dt
    Y, Z = solution.Y, solution.Z
    generator.prepare(grid, Y.shape[2], Z.shape[3])
    if nodes is None:
        nodes = np.arange(N + 1)
    nodes = np.asarray(nodes, dtype=int)
    P = Y.shape[0]
    incr = np.empty((P, N, Y.shape[2]))
    for k in range(N):
        incr[:, k] = generator(k, Y, Z) * dt - np.einsum("pic,pc->pi", Z[:, k], ensemble.dW[:, k])
    tail = np.zeros((P, N + 1, Y.shape[2]))
    tail[:, :N] = np.cumsum(incr[:, ::-1], axis=1)[:, ::-1]
    r = Y[:, nodes] - (Y[:, N][:, None] + tail[:, nodes])
    return math.fsum(np.sum(r * r, axis=-1).ravel()) / (P * len(nodes))


def weighted_z_norm(solution, beta=0.0):
    """E int_0^{T + lead} e^{beta t}|Z(t)|^2 dt with Z constant on each step."""
    dt = solution.grid.dt
    Z = solution.Z
    n = Z.shape[1] - 1
    t = np.arange(n + 1) * dt
    if beta == 0:
        w = np.full(n, dt)
    else:
        w = (np.exp(beta * t[1:]) - np.exp(beta * t[:-1])) / beta
    per = np.sum(Z[:, :n] ** 2, axis=(2, 3)) @ w
    return math.fsum(per) / Z.shape[0]


def method_of_steps_oracle(k_value, T, delta, dt_fine):
    """Reference for y(t) = k + int_t^T y(s + delta) ds with y = k on [T, T + delta].

    Integrated backward interval by interval with the trapezoid rule on a fine
    grid; returns (times, values) on [0, T].
    """
    n = int(round(T / dt_fine))
    lead = int(round(delta / dt_fine))
    y = np.zeros(n + lead + 1)
    y[n:] = k_value
    for i in range(n - 1, -1, -1):
        y[i] = y[i + 1] + 0.5 * dt_fine * (y[i + lead] + y[i + 1 + lead])
    return np.arange(n + 1) * dt_fine, y[: n + 1]
