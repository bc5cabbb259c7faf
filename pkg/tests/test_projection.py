import numpy as np
import pytest

from infdelay.errors import EstimatorNotFitted, SingularNormalMatrix, UnderdeterminedFit
from infdelay.fading_paths import TimeGrid
from infdelay.forward_see import InitialData, LinearDelayCoefficients, simulate_forward
from infdelay.projection import ConditionalExpectation, FeatureMap, default_features, fit, tower_gap
from infdelay.stats import mean_se


def _bm_ensemble(paths, seed=3, T=1.0, dt=1 / 32):
    g = TimeGrid(T, dt)
    c = LinearDelayCoefficients(1, 1, 1, s0=lambda t: np.ones((1, 1)))
    return simulate_forward(c, InitialData(np.zeros(1)), g, paths=paths, seed=seed)


def test_constant_target():
    ens = _bm_ensemble(200)
    est = fit(ens)
    out = est.project(10, np.full((200, 2), 3.5))
    assert np.all(out == 3.5)
    assert np.all(est.project(10, np.zeros(200)) == 0.0)


def test_exact_linear_fit():
    ens = _bm_ensemble(500)
    est = fit(ens, FeatureMap(degree=1), ridge=0.0)
    x = ens.X[:, ens.grid.i0 + 16, 0]
    target = 2.5 * x - 0.75
    coef, _ = est.coefficients(16, target)
    # coefficients live on the standardized input
    m, s = x.mean(), x.std()
    assert coef[0, 0] == pytest.approx(-0.75 + 2.5 * m, abs=1e-10)
    assert coef[1, 0] == pytest.approx(2.5 * s, abs=1e-10)
    assert np.allclose(est.project(16, target), target, rtol=0, atol=1e-10)


def test_martingale_coefficient():
    ens = _bm_ensemble(10_000)
    est = ConditionalExpectation(ens.grid, ens.X, ens.W, FeatureMap(degree=1, state=False, noise=True),
                                 ridge=0.0)
    k, lead = 8, 16
    w = ens.W[:, k, 0]
    target = ens.W[:, k + lead, 0]
    coef, _ = est.coefficients(k, target)
    slope = coef[1, 0] / w.std()
    # per-path slope estimate for the batch-mean standard error
    resid = target - w
    se = np.sqrt(np.mean(resid ** 2) / np.sum((w - w.mean()) ** 2))
    assert abs(slope - 1.0) <= 3 * se
    pred = est.project(k, target)
    assert np.sqrt(np.mean((pred - w) ** 2)) <= 0.05 * np.sqrt(lead * ens.grid.dt)


def test_underdetermined_fit():
    ens = _bm_ensemble(50)
    est = fit(ens, FeatureMap(degree=2))  # 3 basis functions need 30 paths
    est.project(5, ens.X[:, -1, 0])
    est = ConditionalExpectation(ens.grid, ens.X, ens.W, FeatureMap(degree=2, lag_steps=(1, 2)))
    with pytest.raises(UnderdeterminedFit):
        est.project(5, ens.X[:, -1, 0])


def test_singular_normal_matrix():
    ens = _bm_ensemble(400)
    # W(t) and X(t) coincide, so the pair basis is collinear
    est = ConditionalExpectation(ens.grid, ens.X, ens.W, FeatureMap(degree=1, noise=True), ridge=0.0)
    with pytest.raises(SingularNormalMatrix):
        est.project(5, ens.X[:, -1, 0])
    ok = ConditionalExpectation(ens.grid, ens.X, ens.W, FeatureMap(degree=1, noise=True))
    assert np.all(np.isfinite(ok.project(5, ens.X[:, -1, 0])))


def test_estimator_not_fitted_outside_grid():
    ens = _bm_ensemble(200)
    with pytest.raises(EstimatorNotFitted):
        fit(ens).project(ens.grid.n_steps + 1, ens.X[:, -1, 0])


def test_adaptedness_under_future_perturbation():
    ens = _bm_ensemble(300)
    target = np.sin(ens.X[:, -1, 0])
    k = 12
    a = fit(ens).coefficients(k, target)[0]
    X2 = ens.X.copy()
    X2[:, ens.grid.i0 + k + 1:] += np.random.default_rng(0).normal(size=X2[:, ens.grid.i0 + k + 1:].shape)
    b = ConditionalExpectation(ens.grid, X2, ens.W).coefficients(k, target)[0]
    assert np.array_equal(a, b)


def test_unbiased_on_fit_sample():
    ens = _bm_ensemble(1000)
    target = np.exp(ens.X[:, -1, 0])
    for k in (0, 7, 20):
        r = target - fit(ens).project(k, target)
        assert abs(r.mean()) <= 1e-10


def test_determinism():
    a = fit(_bm_ensemble(300, seed=9)).coefficients(11, _bm_ensemble(300, seed=9).X[:, -1, 0])[0]
    b = fit(_bm_ensemble(300, seed=9)).coefficients(11, _bm_ensemble(300, seed=9).X[:, -1, 0])[0]
    assert np.array_equal(a, b)


def test_tower_property():
    ens = _bm_ensemble(10_000)
    est = fit(ens)
    target = ens.W[:, -1, 0]
    gap = tower_gap(est, 8, 20, target)
    m, se = mean_se(gap)
    assert abs(m) <= 3 * se + 1e-12
    assert np.sqrt(np.mean(gap ** 2)) <= 0.02
    with pytest.raises(ValueError):
        tower_gap(est, 5, 4, target)


def test_default_features_and_diagnostics():
    f = default_features((0, 4, 2, 4), degree=1)
    assert f.lag_steps == (2, 4) and f.name == "polynomial-in-(state, delayed-state)"
    assert default_features().name == "polynomial-in-state"
    ens = _bm_ensemble(300)
    t, nb, rv, cond = fit(ens).diagnostics(16, ens.X[:, -1, 0])
    assert t == 0.5 and nb == 3 and rv > 0 and cond >= 1
