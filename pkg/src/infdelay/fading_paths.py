"""Paths in the fading-memory space with weighted sup norm.

A path lives on (-inf, T].  Only the window [t0, T] is stored on a uniform
grid; values before t0 follow a pre-history rule ("zero" or "constant").
"""
import math
from dataclasses import dataclass

import numpy as np

from .errors import GridMismatch, InvalidTolerance, NonFinite, NotFadingMemory, OutOfRange

PRE_HISTORY_RULES = ("zero", "constant")

_ALIGN_TOL = 1e-9


def _as_steps(x, dt, what):
    r = x / dt
    k = int(round(r))
    if abs(r - k) > _ALIGN_TOL * max(1.0, abs(r)):
        raise GridMismatch(f"{what}={x!r} is not an integer multiple of dt={dt!r}")
    return k


class TimeGrid:
    """Uniform grid t0 = s_0 < ... < s_N = T with 0 as a node.

    Parameters
    ----------
    T : float
        Horizon, > 0.
    dt : float
        Step, > 0, with T/dt integral.
    t0 : float
        Start of the retained history, <= 0 and an integer multiple of dt.
    """

    def __init__(self, T, dt, t0=0.0):
        T, dt, t0 = float(T), float(dt), float(t0)
        if not (dt > 0 and math.isfinite(dt)):
            raise ValueError(f"dt must be positive, got {dt}")
        if not (T > 0 and math.isfinite(T)):
            raise ValueError(f"T must be positive, got {T}")
        if t0 > 0:
            raise ValueError(f"t0 must be <= 0, got {t0}")
        self.dt = dt
        self.n_steps = _as_steps(T, dt, "T")
        self.n_hist = -_as_steps(t0, dt, "t0")
        self.T = self.n_steps * dt
        self.t0 = -self.n_hist * dt
        # integer-indexed nodes so shifted indices reproduce identical floats
        self.nodes = np.arange(-self.n_hist, self.n_steps + 1, dtype=float) * dt
        self.nodes.setflags(write=False)

    @classmethod
    def with_history(cls, T, dt, theta_max):
        """Grid whose history strictly covers lags up to theta_max."""
        n = int(math.ceil(theta_max / dt - _ALIGN_TOL)) + 1
        return cls(T, dt, -n * dt)

    @property
    def i0(self):
        """Index of time 0."""
        return self.n_hist

    @property
    def n_nodes(self):
        return self.n_hist + self.n_steps + 1

    @property
    def forward_times(self):
        """Nodes on [0, T]."""
        return self.nodes[self.i0:]

    def index(self, t):
        """Index of the node at time t (must be on the grid)."""
        k = _as_steps(t, self.dt, "t") + self.n_hist
        if k < 0 or k >= self.n_nodes:
            raise OutOfRange(f"time {t} outside grid [{self.t0}, {self.T}]")
        return k

    def lag_steps(self, theta):
        return _as_steps(theta, self.dt, "lag")

    def trapezoid_weights(self, start=None):
        """Trapezoid weights on nodes from index `start` (default: time 0) to T."""
        start = self.i0 if start is None else start
        n = self.n_nodes - start
        w = np.full(n, self.dt)
        w[0] = w[-1] = 0.5 * self.dt
        return w

    def __eq__(self, other):
        return (isinstance(other, TimeGrid) and self.dt == other.dt
                and self.n_steps == other.n_steps and self.n_hist == other.n_hist)

    def __hash__(self):
        return hash((self.dt, self.n_steps, self.n_hist))

    def __repr__(self):
        return f"TimeGrid(T={self.T}, dt={self.dt}, t0={self.t0})"


def truncation_horizon(lam, tol):
    """Lag beyond which the weight e^{-lam*theta} drops below tol."""
    if not (0.0 < tol < 1.0):
        raise InvalidTolerance(f"tol must lie in (0, 1), got {tol}")
    if not lam > 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    return math.log(1.0 / tol) / lam


def _check_finite(values):
    if not np.all(np.isfinite(values)):
        raise NonFinite("path contains NaN or Inf values")


def check_history_membership(history, lam, t0, probes=13):
    """Probe e^{lam s}|x(s)| as s -> -inf; raise if it does not fade out.

    `history` maps an array of times to an (n, d) array.
    """
    s = t0 - 2.0 ** np.arange(probes)
    with np.errstate(over="ignore", invalid="ignore"):
        x = np.asarray(history(s), dtype=float).reshape(len(s), -1)
        mags = np.exp(lam * s) * np.linalg.norm(x, axis=1)
    if not np.all(np.isfinite(mags)):
        raise NotFadingMemory("weighted history is unbounded as s -> -inf")
    head = max(float(mags[0]), 1.0)
    if mags[-1] > 1e-6 * head:
        raise NotFadingMemory(
            f"e^(lambda s)|x(s)| does not vanish as s -> -inf (value {mags[-1]:.3g} at s={s[-1]:.0f})")


@dataclass(frozen=True, eq=False)
class WeightedPath:
    """A path on (-inf, T] stored on `grid` with decay rate `lam`."""

    grid: TimeGrid
    values: np.ndarray
    lam: float
    pre_history: str = "zero"

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.shape[0] != self.grid.n_nodes:
            raise ValueError(f"expected {self.grid.n_nodes} nodes, got {v.shape[0]}")
        if not self.lam > 0:
            raise ValueError(f"lambda must be positive, got {self.lam}")
        if self.pre_history not in PRE_HISTORY_RULES:
            raise ValueError(f"pre_history must be one of {PRE_HISTORY_RULES}")
        _check_finite(v)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def from_function(cls, fn, grid, lam, pre_history="zero"):
        """Sample fn on the grid; fn maps times (n,) to values (n, d).

        The tail of fn beyond the grid is probed to make sure the weighted
        path fades out.  Under the constant rule the tail is replaced by the
        value at t0 and always fades.
        """
        if pre_history == "zero":
            check_history_membership(fn, lam, grid.t0)
        vals = np.asarray(fn(grid.nodes), dtype=float).reshape(grid.n_nodes, -1)
        return cls(grid, vals, lam, pre_history)

    @property
    def d(self):
        return self.values.shape[1]

    def with_values(self, values):
        return WeightedPath(self.grid, values, self.lam, self.pre_history)


def weighted_norm(path, up_to=None):
    """sup over s <= up_to of e^{lam s}|x(s)| (grid nodes plus pre-history)."""
    g = path.grid
    up_to = g.T if up_to is None else float(up_to)
    if up_to > g.T + _ALIGN_TOL * g.dt:
        raise OutOfRange(f"up_to={up_to} exceeds T={g.T}")
    _check_finite(path.values)
    norms = np.linalg.norm(path.values, axis=1)
    k = int(np.searchsorted(g.nodes, up_to + _ALIGN_TOL * g.dt, side="right"))
    if k == 0:
        if path.pre_history == "zero":
            return 0.0
        return float(math.exp(path.lam * up_to) * norms[0])
    best = float(np.max(np.exp(path.lam * g.nodes[:k]) * norms[:k]))
    # constant pre-history adds e^{lam t0}|x(t0)|, already the first node's term
    return best


def evaluate_at(path, r):
    """x(r) by linear interpolation on the grid, pre-history rule before t0."""
    g = path.grid
    r = float(r)
    if r > g.T + _ALIGN_TOL * g.dt:
        raise OutOfRange(f"r={r} exceeds T={g.T}")
    if r < g.t0:
        if path.pre_history == "zero":
            return np.zeros(path.d)
        return path.values[0].copy()
    pos = (r - g.t0) / g.dt
    k = min(int(math.floor(pos)), g.n_nodes - 2) if g.n_nodes > 1 else 0
    frac = pos - k
    if frac <= 1e-12:
        return path.values[k].copy()
    if frac >= 1 - 1e-12:
        return path.values[k + 1].copy()
    return (1.0 - frac) * path.values[k] + frac * path.values[k + 1]


def freeze_extension(path, t):
    """x_t(s) = x(s) for s <= t and x(t) for t < s <= T; t must be a node."""
    g = path.grid
    if t < -_ALIGN_TOL * g.dt or t > g.T + _ALIGN_TOL * g.dt:
        raise OutOfRange(f"freeze time {t} outside [0, {g.T}]")
    k = g.index(t)
    vals = np.array(path.values)
    vals[k + 1:] = vals[k]
    return path.with_values(vals)


class PathSegment:
    """Past segment X_t or future segment X_{t+} of a batch of paths.

    `values` has shape (..., n_nodes, d) on `grid`; `anchor` is a node index.
    A past segment keeps only nodes <= anchor and a future segment only
    nodes >= anchor, so neither can read across its anchor.
    """

    def __init__(self, grid, values, anchor, kind="past", pre_history="zero"):
        if kind not in ("past", "future"):
            raise ValueError("kind must be 'past' or 'future'")
        self.grid = grid
        self.anchor = int(anchor)
        self.kind = kind
        self.pre_history = pre_history
        if kind == "past":
            self._v = values[..., : self.anchor + 1, :]
        else:
            self._v = values[..., self.anchor:, :]

    @property
    def time(self):
        return self.grid.nodes[self.anchor] if self.anchor < self.grid.n_nodes else None

    def current(self):
        return self._v[..., -1, :] if self.kind == "past" else self._v[..., 0, :]

    def at_steps(self, k):
        """Value k steps away from the anchor (into the past or the future)."""
        k = int(k)
        if k < 0:
            raise ValueError("step offset must be nonnegative")
        n = self._v.shape[-2]
        if k < n:
            return self._v[..., n - 1 - k, :] if self.kind == "past" else self._v[..., k, :]
        if self.kind == "past" and self.pre_history == "constant":
            return self._v[..., 0, :]
        return np.zeros_like(self._v[..., 0, :])

    def at(self, theta):
        """Value at lag theta (past) or lead theta (future), theta on the grid."""
        return self.at_steps(self.grid.lag_steps(theta))

    def window(self):
        """Read-only view of the retained nodes."""
        return self._v
