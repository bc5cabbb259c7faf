"""Delay measures, lag kernels and the delay operator R with its adjoints.

R acts on paths on (-inf, T] and returns paths on [0, T]:

    (R Z)(t) = int K(t, theta) Z(t - theta) alpha(d theta)

R* acts on paths on [0, T] and returns paths on (-inf, T]:

    (R* Q)(u) = int K(u + theta, theta)^T Q(u + theta) 1_[0,T](u + theta) alpha(d theta)

Discretization
--------------
Atom lags must sit on the grid.  A piecewise-constant density is turned
into grid-aligned lag weights by integrating it exactly against the hat
functions of the grid (trapezoid rule in theta); each hat is split into its
left and right halves so that R* can truncate the theta-integral exactly at
the edge of [0, T].

Two time rules are supported for R*:

``"trapezoid"``
    Direct quadrature of the formula above, paired with trapezoid weights
    in t.  Where the indicator jumps on a grid node, atoms take the mid value
    (one half), which makes R* the exact discrete adjoint of R for atomic
    measures.  Density contributions are truncated at the jump, which leaves
    an O(dt^2) duality residual.
``"left"``
    Exact adjoint of R under left-point (Ito) sums on [0, T): the indicator
    is that of [0, T - dt].  Used by the stochastic solvers.
"""
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import _backend
from .errors import EstimatorNotFitted, GridMismatch, KernelUnbounded
from .fading_paths import TimeGrid, WeightedPath

# ---------------------------------------------------------------- scalar functions


def _fn_constant(value=1.0):
    return lambda t, theta: np.full(np.broadcast(np.asarray(t), np.asarray(theta)).shape, float(value))


def _fn_exp_decay(rate=1.0, scale=1.0):
    return lambda t, theta: scale * np.exp(-rate * (np.asarray(theta) + 0.0 * np.asarray(t)))


def _fn_linear_in_t(slope=1.0, intercept=0.0):
    return lambda t, theta: intercept + slope * (np.asarray(t) + 0.0 * np.asarray(theta))


def _fn_cos_in_t(amplitude=1.0, frequency=1.0, offset=0.0):
    return lambda t, theta: offset + amplitude * np.cos(frequency * (np.asarray(t) + 0.0 * np.asarray(theta)))


SCALAR_FUNCTIONS = {
    "constant": _fn_constant,
    "exp_decay": _fn_exp_decay,
    "linear_in_t": _fn_linear_in_t,
    "cos_in_t": _fn_cos_in_t,
}


def scalar_function(name, **params):
    """Named scalar function f(t, theta) from the registry."""
    try:
        factory = SCALAR_FUNCTIONS[name]
    except KeyError:
        raise ValueError(f"unknown scalar function {name!r}; known: {sorted(SCALAR_FUNCTIONS)}") from None
    return factory(**params)


# ---------------------------------------------------------------- kernels


class LagKernel:
    """Matrix-valued kernel K(t, theta) of shape (dout, din).

    Subclasses implement `sample(t, theta)` for an array of times t and a
    single lag theta, returning an array of shape (len(t), dout, din).
    """

    dout = 1
    din = 1
    M0_bound = None
    M_bound = None

    def sample(self, t, theta):
        raise NotImplementedError

    def checked_sample(self, t, theta):
        K = np.asarray(self.sample(np.asarray(t, dtype=float), float(theta)), dtype=float)
        K = np.broadcast_to(K, (len(t), self.dout, self.din))
        if not np.all(np.isfinite(K)):
            raise KernelUnbounded(f"non-finite kernel value at lag {theta}")
        return K


class MatrixKernel(LagKernel):
    """K(t, theta) = f(t, theta) * M for a constant matrix M."""

    def __init__(self, matrix, fn=None):
        self.matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
        self.dout, self.din = self.matrix.shape
        self.fn = fn

    def sample(self, t, theta):
        if self.fn is None:
            return np.broadcast_to(self.matrix, (len(t),) + self.matrix.shape)
        s = np.asarray(self.fn(t, theta), dtype=float).reshape(len(t), 1, 1)
        return s * self.matrix


def identity_kernel(d):
    return MatrixKernel(np.eye(d))


def scaled_identity_kernel(d, fn):
    return MatrixKernel(np.eye(d), fn)


class TabulatedKernel(LagKernel):
    """Bilinear interpolation of matrices given on a (t, theta) table.

    Outside the table the nearest edge value is used.
    """

    def __init__(self, t_grid, theta_grid, values):
        self.t_grid = np.asarray(t_grid, dtype=float)
        self.theta_grid = np.asarray(theta_grid, dtype=float)
        self.values = np.asarray(values, dtype=float)
        nt, nth = len(self.t_grid), len(self.theta_grid)
        if self.values.shape[:2] != (nt, nth) or self.values.ndim != 4:
            raise ValueError("values must have shape (len(t_grid), len(theta_grid), dout, din)")
        self.dout, self.din = self.values.shape[2:]

    @staticmethod
    def _locate(grid, x):
        if len(grid) == 1:
            z = np.zeros(np.shape(x), dtype=int)
            return z, z, np.zeros(np.shape(x))
        x = np.clip(x, grid[0], grid[-1])
        i = np.clip(np.searchsorted(grid, x, side="right") - 1, 0, len(grid) - 2)
        w = (x - grid[i]) / (grid[i + 1] - grid[i])
        return i, i + 1, w

    def sample(self, t, theta):
        i0, i1, wt = self._locate(self.t_grid, np.asarray(t))
        j0, j1, wth = self._locate(self.theta_grid, np.full(1, theta))
        j0, j1, wth = int(j0[0]), int(j1[0]), float(wth[0])
        col = (1 - wth) * self.values[:, j0] + wth * self.values[:, j1]
        wt = wt[:, None, None]
        return (1 - wt) * col[i0] + wt * col[i1]


class CallableKernel(LagKernel):
    """Kernel given by a vectorized callable fn(t_array, theta) -> (n, dout, din)."""

    def __init__(self, fn, dout, din):
        self.fn = fn
        self.dout, self.din = dout, din

    def sample(self, t, theta):
        return self.fn(t, theta)


@dataclass(frozen=True)
class ScalarControlKernel:
    """Scalar weight phi(s, t) applied to the control at time s seen at time t."""

    phi: object = None
    C_phi: float = 1.0
    name: str = "one"

    def __call__(self, s, t):
        if self.phi is None:
            return np.ones(np.broadcast(np.asarray(s), np.asarray(t)).shape)
        return np.asarray(self.phi(s, t), dtype=float)

    def as_lag_kernel(self, du):
        """K(t, theta) = phi(t - theta, t) * I."""
        eye = np.eye(du)

        def fn(t, theta):
            t = np.asarray(t, dtype=float)
            vals = self(t - theta, t).reshape(len(t), 1, 1)
            return vals * eye

        return CallableKernel(fn, du, du)


def control_kernel(name="one", **params):
    """Named control kernels: 'one' (phi = 1) and 'exp_gap' (phi = exp(-rate (t - s)))."""
    if name == "one":
        return ScalarControlKernel(None, 1.0, "one")
    if name == "exp_gap":
        rate = float(params.get("rate", 1.0))
        return ScalarControlKernel(lambda s, t: np.exp(-rate * (np.asarray(t) - np.asarray(s))),
                                   1.0 if rate >= 0 else math.inf, "exp_gap")
    raise ValueError(f"unknown control kernel {name!r}")


# ---------------------------------------------------------------- measures


@dataclass(frozen=True)
class LagQuadrature:
    """Grid-aligned lag weights for a delay measure at step dt."""

    dt: float
    offsets: np.ndarray
    atom: np.ndarray
    dens_left: np.ndarray
    dens_right: np.ndarray
    abs_atom: np.ndarray
    abs_left: np.ndarray
    abs_right: np.ndarray

    @property
    def weights(self):
        return self.atom + self.dens_left + self.dens_right

    @property
    def abs_weights(self):
        return self.abs_atom + self.abs_left + self.abs_right

    @property
    def max_offset(self):
        return int(self.offsets.max()) if len(self.offsets) else 0


@dataclass(frozen=True)
class DelayMeasure:
    """Finite signed measure on [0, inf): atoms plus a piecewise-constant density.

    Parameters
    ----------
    atoms : sequence of (lag, weight)
    breakpoints : increasing sequence b_0 < ... < b_n with b_0 >= 0
    values : density value on each cell [b_i, b_{i+1}]
    """

    atoms: tuple = ()
    breakpoints: tuple = ()
    values: tuple = ()
    _cache: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        atoms = tuple((float(l), float(w)) for l, w in self.atoms)
        bps = tuple(float(b) for b in self.breakpoints)
        vals = tuple(float(v) for v in self.values)
        for lag, w in atoms:
            if not (lag >= 0 and math.isfinite(lag) and math.isfinite(w)):
                raise ValueError(f"invalid atom ({lag}, {w})")
        if bps or vals:
            if len(bps) != len(vals) + 1:
                raise ValueError("density needs len(breakpoints) == len(values) + 1")
            if bps[0] < 0 or any(b1 <= b0 for b0, b1 in zip(bps, bps[1:])):
                raise ValueError("breakpoints must be nonnegative and strictly increasing")
            if not all(math.isfinite(v) for v in vals) or not math.isfinite(bps[-1]):
                raise ValueError("density must be finite with bounded support")
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "breakpoints", bps)
        object.__setattr__(self, "values", vals)

    @classmethod
    def dirac(cls, lag=0.0, weight=1.0):
        return cls(atoms=((lag, weight),))

    @classmethod
    def uniform(cls, a, b, value):
        return cls(breakpoints=(a, b), values=(value,))

    @classmethod
    def from_config(cls, cfg):
        atoms = [(a["lag"], a["weight"]) for a in cfg.get("atoms", [])]
        dens = cfg.get("density") or {}
        return cls(atoms=tuple(atoms), breakpoints=tuple(dens.get("breakpoints", ())),
                   values=tuple(dens.get("values", ())))

    @property
    def support_max(self):
        lags = [l for l, _ in self.atoms]
        if self.breakpoints:
            lags.append(self.breakpoints[-1])
        return max(lags) if lags else 0.0

    @property
    def is_atomic(self):
        return not self.values

    def total_mass(self):
        return sum(w for _, w in self.atoms) + sum(
            v * (b1 - b0) for v, b0, b1 in zip(self.values, self.breakpoints, self.breakpoints[1:]))

    def quadrature(self, dt):
        """Grid-aligned weights at step dt (cached)."""
        key = float(dt)
        if key not in self._cache:
            self._cache[key] = self._build_quadrature(key)
        return self._cache[key]

    def _build_quadrature(self, dt):
        offs = []
        for lag, _ in self.atoms:
            r = lag / dt
            k = int(round(r))
            if abs(r - k) > 1e-9 * max(1.0, r):
                raise GridMismatch(f"atom lag {lag} is not a multiple of dt={dt}")
            offs.append(k)
        snapped = [int(round(b / dt)) for b in self.breakpoints]
        hi = max(offs + snapped + [0])
        n = hi + 1
        atom = np.zeros(n)
        abs_atom = np.zeros(n)
        for (lag, w), k in zip(self.atoms, offs):
            atom[k] += w
            abs_atom[k] += abs(w)
        left, right = np.zeros(n), np.zeros(n)
        abs_left, abs_right = np.zeros(n), np.zeros(n)
        for v, ja, jb in zip(self.values, snapped, snapped[1:]):
            if jb <= ja:
                continue
            h = 0.5 * dt * v
            right[ja:jb] += h
            left[ja + 1:jb + 1] += h
            abs_right[ja:jb] += abs(h)
            abs_left[ja + 1:jb + 1] += abs(h)
        used = np.nonzero((abs_atom > 0) | (abs_left > 0) | (abs_right > 0))[0]
        q = LagQuadrature(dt, used.astype(np.int64), atom[used], left[used], right[used],
                          abs_atom[used], abs_left[used], abs_right[used])
        for a in (q.offsets, q.atom, q.dens_left, q.dens_right, q.abs_atom, q.abs_left, q.abs_right):
            a.setflags(write=False)
        return q


def total_variation(measure):
    """sum |w_i| + int |density| (exact over the density cells)."""
    tv = math.fsum(abs(w) for _, w in measure.atoms)
    tv += math.fsum(abs(v) * (b1 - b0) for v, b0, b1 in
                    zip(measure.values, measure.breakpoints, measure.breakpoints[1:]))
    return tv


# ---------------------------------------------------------------- operators


def _batch(values, d_expected=None):
    arr = np.asarray(values, dtype=float)
    lead = arr.shape[:-2]
    flat = np.ascontiguousarray(arr.reshape((-1,) + arr.shape[-2:]))
    if d_expected is not None and flat.shape[-1] != d_expected:
        raise ValueError(f"state dimension {flat.shape[-1]} does not match kernel input {d_expected}")
    return flat, lead


def _unpack_path(Z, grid, pre_history):
    if isinstance(Z, WeightedPath):
        return Z.values, Z.grid, Z.pre_history
    if grid is None:
        raise ValueError("grid is required when Z is an array")
    return np.asarray(Z, dtype=float), grid, pre_history


def r_weights(kernel, measure, grid, pre_history="zero"):
    """Source indices and weights of R on `grid` (used by lag_sum)."""
    q = measure.quadrature(grid.dt)
    ts = grid.forward_times
    n_out = len(ts)
    a = q.weights
    J = len(q.offsets)
    W = np.empty((J, n_out, kernel.dout, kernel.din))
    src = np.empty((J, n_out), dtype=np.int64)
    base = grid.i0 + np.arange(n_out, dtype=np.int64)
    for j, off in enumerate(q.offsets):
        W[j] = a[j] * kernel.checked_sample(ts, off * grid.dt)
        s = base - off
        if pre_history == "constant":
            s = np.maximum(s, 0)
        src[j] = np.where(s >= 0, s, -1)
    return src, W


def apply_R(kernel, measure, Z, grid=None, pre_history="zero"):
    """(R Z)(t) on the nodes of [0, T].

    Z is a WeightedPath or an array (..., n_nodes, din) on `grid`.  Returns an
    array (..., N + 1, dout).
    """
    vals, grid, pre_history = _unpack_path(Z, grid, pre_history)
    flat, lead = _batch(vals, kernel.din)
    if flat.shape[1] != grid.n_nodes:
        raise ValueError("path does not match grid")
    src, W = r_weights(kernel, measure, grid, pre_history)
    out = _backend.lag_sum(flat, src, np.ascontiguousarray(W))
    return out.reshape(lead + out.shape[1:])


def r_star_weights(kernel, measure, grid, rule="trapezoid"):
    """Source indices (into [0, T] nodes) and weights of R* on all grid nodes."""
    if rule not in ("trapezoid", "left"):
        raise ValueError("rule must be 'trapezoid' or 'left'")
    q = measure.quadrature(grid.dt)
    N = grid.n_steps
    n_out = grid.n_nodes
    ts = grid.forward_times
    J = len(q.offsets)
    W = np.zeros((J, n_out, kernel.din, kernel.dout))
    src = np.full((J, n_out), -1, dtype=np.int64)
    u_idx = np.arange(n_out, dtype=np.int64)
    w_u = np.full(n_out, grid.dt)
    w_u[0] = w_u[-1] = 0.5 * grid.dt
    w_t = grid.trapezoid_weights()
    for j, off in enumerate(q.offsets):
        t_idx = u_idx - grid.i0 + off
        if rule == "left":
            ok = (t_idx >= 0) & (t_idx <= N - 1)
            c = np.where(ok, q.weights[j], 0.0)
        else:
            ok = (t_idx >= 0) & (t_idx <= N)
            tc = np.clip(t_idx, 0, N)
            ratio = np.where(ok, w_t[tc] / w_u, 0.0)
            dens = np.where((t_idx > 0) & (t_idx < N), q.dens_left[j] + q.dens_right[j], 0.0)
            dens = dens + np.where(t_idx == 0, q.dens_right[j], 0.0)
            dens = dens + np.where((t_idx == N) & (u_idx < n_out - 1), q.dens_left[j], 0.0)
            c = q.atom[j] * ratio + dens
        K = kernel.checked_sample(ts[np.clip(t_idx, 0, N)], off * grid.dt)
        W[j] = c[:, None, None] * np.swapaxes(K, 1, 2)
        src[j] = np.where(ok, t_idx, -1)
    return src, W


def apply_R_star(kernel, measure, Q, grid, rule="trapezoid"):
    """(R* Q)(u) on every node of `grid` (u in [t0, T]).

    Q is an array (..., N + 1, dout) on the nodes of [0, T], extended by 0
    outside.  Returns (..., n_nodes, din); values vanish for u < -max lag.
    """
    flat, lead = _batch(Q, kernel.dout)
    if flat.shape[1] != grid.n_steps + 1:
        raise ValueError("Q must be given on the nodes of [0, T]")
    src, W = r_star_weights(kernel, measure, grid, rule)
    out = _backend.lag_sum(flat, src, np.ascontiguousarray(W))
    return out.reshape(lead + out.shape[1:])


def _fsum_inner(weights, a, b):
    """Trapezoid-weighted integral of <a, b> summed with exact rounding."""
    per_node = np.einsum("...i,...i->...", a, b)
    per_node = np.moveaxis(per_node, -1, 0)
    if per_node.ndim == 1:
        return math.fsum(weights * per_node)
    out = np.empty(per_node.shape[1:])
    for idx in np.ndindex(out.shape):
        out[idx] = math.fsum(weights * per_node[(slice(None),) + idx])
    return out


def duality_sides(kernel, measure, Z, Q, grid=None):
    """Both sides int_0^T <RZ, Q> dt and int_0^T <Z, R*Q> dt (trapezoid in t)."""
    vals, grid, _ = _unpack_path(Z, grid, "zero")
    if np.any(vals[..., : grid.i0 + 1, :] != 0.0):
        raise ValueError("Z must vanish on (-inf, 0]")
    w = grid.trapezoid_weights()
    RZ = apply_R(kernel, measure, vals, grid)
    RsQ = apply_R_star(kernel, measure, Q, grid, "trapezoid")
    lhs = _fsum_inner(w, RZ, np.asarray(Q, dtype=float))
    rhs = _fsum_inner(w, vals[..., grid.i0:, :], RsQ[..., grid.i0:, :])
    return lhs, rhs


def duality_residual(kernel, measure, Z, Q, grid=None):
    """|int <RZ, Q> - int <Z, R*Q>| with the same trapezoid rule on both sides."""
    lhs, rhs = duality_sides(kernel, measure, Z, Q, grid)
    return np.abs(np.asarray(lhs) - np.asarray(rhs)) if np.ndim(lhs) else abs(lhs - rhs)


def _kernel_norms(kernel, q, grid):
    """Spectral norms |K(t, theta_j)| at forward nodes, shape (J, N + 1)."""
    ts = grid.forward_times
    out = np.empty((len(q.offsets), len(ts)))
    for j, off in enumerate(q.offsets):
        K = kernel.checked_sample(ts, off * grid.dt)
        out[j] = np.linalg.norm(K, ord=2, axis=(1, 2))
    return out


def operator_bounds(kernel, measure, grid):
    """Estimates (M0, M) of sup_t int |K| d|alpha| and sup_u int |K(u+.,.)| 1_[0,T] d|alpha|.

    Each constant is the larger of its direct quadrature and the matching
    Schur sum of the discrete operator, so that the discrete R and R*
    satisfy |RZ|^2 <= M0 M |Z|^2 and |R*Q|^2 <= M0 M |Q|^2 exactly.
    """
    q = measure.quadrature(grid.dt)
    N = grid.n_steps
    n_u = grid.n_nodes
    if len(q.offsets) == 0:
        return 0.0, 0.0
    nK = _kernel_norms(kernel, q, grid)
    w_t = grid.trapezoid_weights()
    w_u = np.full(n_u, grid.dt)
    w_u[0] = w_u[-1] = 0.5 * grid.dt
    a = q.abs_weights
    m0_rows = (a[:, None] * nK).sum(axis=0)
    u_idx = np.arange(n_u)
    m_closed = np.zeros(n_u)
    col_R = np.zeros(n_u)
    col_Rs = np.zeros(N + 1)
    for j, off in enumerate(q.offsets):
        t_idx = u_idx - grid.i0 + off
        ok = (t_idx >= 0) & (t_idx <= N)
        tc = np.clip(t_idx, 0, N)
        k = np.where(ok, nK[j, tc], 0.0)
        dens_tr = np.where((t_idx > 0) & (t_idx < N), q.abs_left[j] + q.abs_right[j], 0.0)
        dens_tr += np.where(t_idx == 0, q.abs_right[j], 0.0)
        dens_tr += np.where((t_idx == N) & (u_idx < n_u - 1), q.abs_left[j], 0.0)
        closed = np.where(ok, q.abs_atom[j], 0.0) + dens_tr
        m_closed += closed * k
        col_R += np.where(ok, a[j] * w_t[tc] / w_u, 0.0) * k
        # Schur column of R*: weight used by apply_R_star times w_u / w_t
        ratio = np.where(ok, w_t[tc] / w_u, 0.0)
        c_tr = q.abs_atom[j] * ratio + dens_tr
        contrib = c_tr * w_u * k
        np.add.at(col_Rs, tc[ok], contrib[ok])
    col_Rs = col_Rs / w_t
    M0 = float(max(m0_rows.max(), col_Rs.max()))
    M = float(max(m_closed.max(), col_R.max()))
    return M0, M


def cv_identity_sides(g, measure, grid):
    """Both sides of the change-of-variables identity with |alpha|.

    LHS = int_0^T int g(t, theta) |alpha|(d theta) dt
    RHS = int_{t0}^T int g(u + theta, theta) 1_[0,T](u + theta) |alpha|(d theta) du

    g maps (t_array, theta) to an array of len(t_array).  Atom terms are
    formed so that each one appears with bit-identical value on both sides.
    """
    q = measure.quadrature(grid.dt)
    N = grid.n_steps
    ts = grid.forward_times
    w_t = grid.trapezoid_weights()
    n_u = grid.n_nodes
    w_u = np.full(n_u, grid.dt)
    w_u[0] = w_u[-1] = 0.5 * grid.dt
    u_idx = np.arange(n_u)
    lhs_terms, rhs_terms = [], []
    for j, off in enumerate(q.offsets):
        gv = np.asarray(g(ts, off * grid.dt), dtype=float)
        dens_full = q.abs_left[j] + q.abs_right[j]
        lhs_terms.append((w_t * q.abs_atom[j]) * gv)
        lhs_terms.append((w_t * dens_full) * gv)
        t_idx = u_idx - grid.i0 + off
        ok = (t_idx >= 0) & (t_idx <= N)
        tc = t_idx[ok]
        wu = w_u[ok]
        ratio = w_t[tc] / wu
        rhs_terms.append(((wu * ratio) * q.abs_atom[j]) * gv[tc])
        dens = np.where((tc > 0) & (tc < N), dens_full, 0.0)
        dens += np.where(tc == 0, q.abs_right[j], 0.0)
        dens += np.where((tc == N) & (u_idx[ok] < n_u - 1), q.abs_left[j], 0.0)
        rhs_terms.append((wu * dens) * gv[tc])
    lhs = math.fsum(np.concatenate(lhs_terms)) if lhs_terms else 0.0
    rhs = math.fsum(np.concatenate(rhs_terms)) if rhs_terms else 0.0
    return lhs, rhs


def cv_identity_check(g, measure, grid):
    """Residual |LHS - RHS| of the change-of-variables identity."""
    lhs, rhs = cv_identity_sides(g, measure, grid)
    return abs(lhs - rhs)


def adapted_adjoint(kernel, measure, Q, grid, estimator, rule="trapezoid"):
    """(A* Q)(t) = E_t[(R* Q)(t)] on the nodes of [0, T].

    Q is an ensemble array (P, N + 1, dout); `estimator` is a
    ConditionalExpectation bound to the same ensemble.
    """
    if estimator is None or not getattr(estimator, "fitted", False):
        raise EstimatorNotFitted("adapted_adjoint needs an estimator bound to the ensemble")
    RsQ = apply_R_star(kernel, measure, Q, grid, rule)[:, grid.i0:, :]
    out = np.empty_like(RsQ)
    for k in range(grid.n_steps + 1):
        out[:, k, :] = estimator.project(k, RsQ[:, k, :])
    return out


def kernel_from_config(cfg, d_out, d_in=None):
    """Build a kernel from a registry entry.

    Entries: {"type": "identity"}, {"type": "scaled_identity", "function": {...}},
    {"type": "matrix", "value": [[...]], "function": {...}?},
    {"type": "tabulated", "t": [...], "theta": [...], "values": [...]}.
    """
    d_in = d_out if d_in is None else d_in
    kind = cfg.get("type", "identity")
    fn = None
    if cfg.get("function"):
        f = dict(cfg["function"])
        fn = scalar_function(f.pop("name"), **f)
    if kind == "identity":
        if d_in != d_out:
            raise ValueError("identity kernel needs square shape")
        return MatrixKernel(np.eye(d_out), fn)
    if kind == "scaled_identity":
        return MatrixKernel(np.eye(d_out), fn)
    if kind == "matrix":
        M = np.asarray(cfg["value"], dtype=float).reshape(d_out, d_in)
        return MatrixKernel(M, fn)
    if kind == "tabulated":
        vals = np.asarray(cfg["values"], dtype=float).reshape(len(cfg["t"]), len(cfg["theta"]), d_out, d_in)
        return TabulatedKernel(cfg["t"], cfg["theta"], vals)
    raise ValueError(f"unknown kernel type {kind!r}")
