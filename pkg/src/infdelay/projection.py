"""Regression estimates of conditional expectations E_t[.] on an ensemble.

At every node t of [0, T] the target is regressed on polynomial features of
quantities observed at time t: the current state, selected lagged states
and, optionally, the current Brownian value.  Each node gets its own fit.
"""
import itertools
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import EstimatorNotFitted, SingularNormalMatrix, UnderdeterminedFit

MIN_PATHS_PER_FEATURE = 10
COND_LIMIT = 1e12


@dataclass(frozen=True)
class FeatureMap:
    """Polynomial basis in time-t observables.

    Parameters
    ----------
    degree : int
        Maximal total degree.
    state : bool
        Use the current state X(t).
    lag_steps : tuple of int
        Use X(t - k dt) for each k listed.
    noise : bool
        Use the Brownian value W(t).
    """

    degree: int = 2
    state: bool = True
    lag_steps: tuple = ()
    noise: bool = False

    @property
    def name(self):
        if self.lag_steps:
            return "polynomial-in-(state, delayed-state)"
        return "polynomial-in-state"


def _monomials(n_inputs, degree):
    out = []
    for deg in range(1, degree + 1):
        out.extend(itertools.combinations_with_replacement(range(n_inputs), deg))
    return out


class _NodeFit:
    __slots__ = ("mean", "scale", "keep", "terms", "chol", "n_basis", "cond")


class ConditionalExpectation:
    """Per-node least-squares projection bound to one ensemble.

    Parameters
    ----------
    grid : TimeGrid
    X : array (P, n_nodes, d)
        States on the full grid.
    W : array (P, N + 1, m) or None
        Brownian values on [0, T] (needed when features.noise is set).
    features : FeatureMap
    ridge : float or None
        Ridge added to the non-intercept diagonal of the normal matrix;
        None selects 1e-8 * trace(Gram) / basis size.
    """

    def __init__(self, grid, X, W=None, features=FeatureMap(), ridge=None):
        self.grid = grid
        self.X = X
        self.W = W
        self.features = features
        self.ridge = ridge
        self.n_paths = X.shape[0]
        if features.noise and W is None:
            raise ValueError("noise features need the Brownian paths")
        self._fits = {}

    @property
    def fitted(self):
        return True

    def raw_inputs(self, k):
        """Time-t observables at forward node k, shape (P, q)."""
        f = self.features
        cols = []
        i = self.grid.i0 + k
        if f.state:
            cols.append(self.X[:, i, :])
        for lag in f.lag_steps:
            cols.append(self.X[:, max(i - lag, 0), :])
        if f.noise:
            cols.append(self.W[:, k, :])
        if not cols:
            return np.zeros((self.n_paths, 0))
        return np.concatenate(cols, axis=1)

    def _design(self, fit, raw):
        z = (raw[:, fit.keep] - fit.mean) / fit.scale
        cols = [np.ones(len(raw))]
        for term in fit.terms:
            c = z[:, term[0]].copy()
            for idx in term[1:]:
                c *= z[:, idx]
            cols.append(c)
        return np.stack(cols, axis=1)

    def _fit(self, k):
        if k in self._fits:
            return self._fits[k]
        if not (0 <= k <= self.grid.n_steps):
            raise EstimatorNotFitted(f"no fit for node {k}")
        raw = self.raw_inputs(k)
        fit = _NodeFit()
        mean = raw.mean(axis=0) if raw.shape[1] else np.zeros(0)
        scale = raw.std(axis=0) if raw.shape[1] else np.zeros(0)
        keep = scale > 1e-12 * (1.0 + np.abs(mean))
        fit.keep = np.nonzero(keep)[0]
        fit.mean = mean[keep]
        fit.scale = scale[keep]
        fit.terms = _monomials(len(fit.keep), self.features.degree)
        fit.n_basis = 1 + len(fit.terms)
        if self.n_paths < MIN_PATHS_PER_FEATURE * fit.n_basis:
            raise UnderdeterminedFit(
                f"{self.n_paths} paths for {fit.n_basis} basis functions at node {k}; "
                f"need at least {MIN_PATHS_PER_FEATURE * fit.n_basis}")
        Phi = self._design(fit, raw)
        G = Phi.T @ Phi / self.n_paths
        ridge = self.ridge
        if ridge is None:
            ridge = 1e-8 * np.trace(G) / fit.n_basis
        if ridge == 0:
            cond = np.linalg.cond(G)
            if not cond <= COND_LIMIT:
                raise SingularNormalMatrix(f"Gram condition {cond:.3g} at node {k}")
        G = G.copy()
        G[np.arange(1, fit.n_basis), np.arange(1, fit.n_basis)] += ridge
        fit.cond = float(np.linalg.cond(G))
        fit.chol = cho_factor(G, lower=True)
        self._fits[k] = fit
        return fit

    def coefficients(self, k, target):
        fit = self._fit(k)
        raw = self.raw_inputs(k)
        Phi = self._design(fit, raw)
        y = np.asarray(target, dtype=float).reshape(self.n_paths, -1)
        rhs = Phi.T @ y / self.n_paths
        return cho_solve(fit.chol, rhs), Phi

    def project(self, k, target):
        """E_t[target] at forward node k; target has shape (P, ...)."""
        target = np.asarray(target, dtype=float)
        if target.shape[0] != self.n_paths:
            raise ValueError("target must have one row per trajectory")
        if np.all(target == target[:1]):
            # constants are measurable at every time
            self._fit(k)
            return np.array(np.broadcast_to(target[:1], target.shape))
        coef, Phi = self.coefficients(k, target)
        return (Phi @ coef).reshape(target.shape)

    def diagnostics(self, k, target):
        """(node time, basis size, residual variance, Gram condition)."""
        pred = self.project(k, target)
        r = np.asarray(target, dtype=float) - pred
        fit = self._fits[k]
        return (float(self.grid.forward_times[k]), fit.n_basis,
                float(np.mean(r.reshape(self.n_paths, -1) ** 2)), fit.cond)


def fit(ensemble, features=FeatureMap(), ridge=None):
    """Estimator bound to an Ensemble (uses its states and Brownian paths)."""
    return ConditionalExpectation(ensemble.grid, ensemble.X, ensemble.W, features, ridge)


def default_features(measure_lags_steps=(), degree=2):
    """Current state plus every lagged state referenced by atoms."""
    lags = tuple(sorted({int(k) for k in measure_lags_steps if k > 0}))
    return FeatureMap(degree=degree, state=True, lag_steps=lags)


def tower_gap(est, s, t, target):
    """E_s[E_t[target]] - E_s[target] per trajectory (s <= t)."""
    if s > t:
        raise ValueError("need s <= t")
    inner = est.project(t, target)
    return est.project(s, inner) - est.project(s, target)


__all__ = ["FeatureMap", "ConditionalExpectation", "fit", "default_features", "tower_gap",
           "MIN_PATHS_PER_FEATURE"]
