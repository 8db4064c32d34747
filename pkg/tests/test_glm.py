import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import lasso_logistic_prox, lasso_objective
from tlrisk.data import DataError, stratified_folds
from tlrisk.glm import (GlmFit, LambdaGrid, bernoulli_nll, fit_l1_logistic, fit_l1_logistic_cv,
                        fit_path, kkt_violation, lambda_max, loss_gradient, select_lambda_cv,
                        sigmoid)

KKT_TOL = 1e-6


def certify(fit, X, y, offset=None):
    """Every converged fit in this suite must carry a KKT certificate."""
    if fit.converged:
        assert kkt_violation(fit, X, y, offset) <= KKT_TOL
    return fit


def instance(seed, n=60, p=5, signal=1.0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, p)) * rng.uniform(0.5, 3, p) + rng.normal(size=p)
    eta = signal * (X[:, 0] - X[:, 0].mean()) / X[:, 0].std() - 0.3
    y = (rng.uniform(size=n) < sigmoid(eta)).astype(float)
    return X, y


# ---------------------------------------------------------------- link and loss


def test_sigmoid_values():
    assert sigmoid(0.0) == 0.5
    assert sigmoid(np.inf) == 1.0
    t = np.linspace(-30, 30, 101)
    np.testing.assert_allclose(sigmoid(t) + sigmoid(-t), 1.0, atol=1e-15)


def test_bernoulli_nll_values():
    assert bernoulli_nll(1, 0.0) == pytest.approx(math.log(2), abs=1e-15)
    assert bernoulli_nll(1, 35.0) <= 1e-12
    # frozen from log1p(exp(2)) in double precision
    assert bernoulli_nll(0, 2.0) == pytest.approx(2.1269280110429727, abs=1e-12)
    assert np.isfinite(bernoulli_nll(0, 800.0))


# ---------------------------------------------------------------- lambda_max


def test_fit_at_and_above_lambda_max_is_null():
    X, y = instance(0)
    lm = lambda_max(X, y)
    for lam in (lm, 1.01 * lm):
        fit = certify(fit_l1_logistic(X, y, lam), X, y)
        assert np.all(fit.coefficients == 0.0)
        assert fit.intercept == pytest.approx(math.log(y.mean() / (1 - y.mean())), abs=1e-12)


def test_lambda_max_matches_bisection():
    rng = np.random.default_rng(20)
    X = rng.normal(size=(20, 5))
    y = (rng.uniform(size=20) < sigmoid(X[:, 1])).astype(float)
    lo, hi = 0.0, 5.0
    for _ in range(45):
        mid = 0.5 * (lo + hi)
        if np.any(fit_l1_logistic(X, y, mid).coefficients != 0):
            lo = mid
        else:
            hi = mid
    assert lambda_max(X, y) == pytest.approx(hi, abs=1e-6)


def test_lambda_max_with_offset():
    X, y = instance(1)
    off = np.random.default_rng(1).normal(size=y.shape[0])
    lm = lambda_max(X, y, off)
    fit = certify(fit_l1_logistic(X, y, lm, off), X, y, off)
    assert np.all(fit.coefficients == 0)
    assert np.any(fit_l1_logistic(X, y, 0.9 * lm, off).coefficients != 0)


# ---------------------------------------------------------------- solver


def test_objective_matches_proximal_gradient_oracle():
    rng = np.random.default_rng(30)
    X = rng.normal(size=(30, 4))
    y = (rng.uniform(size=30) < sigmoid(X @ [1.0, -0.5, 0.0, 0.3])).astype(float)
    lam = 0.1 * lambda_max(X, y)
    fit = certify(fit_l1_logistic(X, y, lam), X, y)
    Z = fit.standardizer.apply(X)
    theta = lasso_logistic_prox(Z, y, lam)
    ref = lasso_objective(Z, y, theta[0], theta[1:], lam)
    got = lasso_objective(Z, y, fit.intercept, fit.coefficients, lam)
    assert got == pytest.approx(ref, abs=1e-6)
    assert got <= ref + 1e-9


def test_offset_absorbs_signal():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(5000, 3))
    off = 1.5 * X[:, 0] - X[:, 2]
    y = (rng.uniform(size=5000) < sigmoid(off)).astype(float)
    fit = certify(fit_l1_logistic(X, y, 10.0, off), X, y, off)
    assert np.all(fit.coefficients == 0)
    # the intercept only soaks up sampling noise (se ~ 0.035 here)
    assert abs(fit.intercept) < 0.1
    np.testing.assert_allclose(fit.predict_proba(X, off), sigmoid(off), atol=0.025)


@pytest.mark.parametrize("seed", range(8))
@pytest.mark.parametrize("frac", [0.5, 0.1, 0.01])
def test_kkt_certificate_random(seed, frac):
    X, y = instance(seed, n=80, p=6)
    off = np.random.default_rng(seed + 100).normal(scale=0.5, size=80) if seed % 2 else None
    lam = frac * lambda_max(X, y, off)
    fit = fit_l1_logistic(X, y, lam, off)
    assert fit.converged
    certify(fit, X, y, off)


def test_objective_trace_non_increasing():
    for seed in range(10):
        X, y = instance(seed, n=50, p=8)
        fit = fit_l1_logistic(X, y, 0.05 * lambda_max(X, y))
        tr = np.asarray(fit.objective_trace)
        assert np.all(np.diff(tr) <= 1e-12)


def test_separation_reported_not_rejected():
    X = np.array([[-2.0], [-1.0], [1.0], [2.0]])
    y = np.array([0, 0, 1, 1])
    fit = fit_l1_logistic(X, y, 0.0)
    assert not fit.converged
    assert fit.coefficients[0] > 0


def test_constant_labels_rejected():
    with pytest.raises(DataError):
        fit_l1_logistic(np.zeros((5, 1)) + np.arange(5)[:, None], np.ones(5), 0.1)


def test_scale_equivariance():
    X, y = instance(7, n=100, p=4)
    lam = 0.2 * lambda_max(X, y)
    a = fit_l1_logistic(X, y, lam)
    X10 = X.copy()
    X10[:, 2] *= 10
    b = fit_l1_logistic(X10, y, lam)
    np.testing.assert_allclose(a.predict_proba(X), b.predict_proba(X10), atol=1e-8)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(8)
    for _ in range(10):
        Z = rng.normal(size=(25, 4))
        y = rng.integers(0, 2, 25).astype(float)
        off = rng.normal(size=25)
        theta = rng.normal(size=5)

        def f(th):
            return float(np.mean(bernoulli_nll(y, off + th[0] + Z @ th[1:])))

        h = 1e-5
        fd = np.array([(f(theta + h * e) - f(theta - h * e)) / (2 * h) for e in np.eye(5)])
        g = loss_gradient(Z, y, theta[0], theta[1:], off)
        assert np.linalg.norm(g - fd) / np.linalg.norm(fd) < 1e-6


def test_zero_fit_predicts_constant():
    X, y = instance(9)
    fit = fit_l1_logistic(X, y, 2 * lambda_max(X, y))
    eta = fit.predict_log_odds(X)
    assert np.all(eta == eta[0])
    assert eta[0] == pytest.approx(math.log(y.mean() / (1 - y.mean())), abs=1e-12)


def test_offset_shift_is_linear():
    X, y = instance(10)
    off = np.random.default_rng(0).normal(size=y.shape[0])
    fit = fit_l1_logistic(X, y, 0.1 * lambda_max(X, y, off), off)
    np.testing.assert_allclose(fit.predict_log_odds(X, off + 2.5),
                               fit.predict_log_odds(X, off) + 2.5, atol=1e-12)


def test_predict_replays_internal_eta():
    X, y = instance(11)
    off = np.random.default_rng(1).normal(size=y.shape[0])
    fit = fit_l1_logistic(X, y, 0.05 * lambda_max(X, y, off), off)
    np.testing.assert_allclose(fit.predict_log_odds(X, off), fit.train_eta, atol=1e-10)


def test_serialization_round_trip():
    X, y = instance(12)
    fit = fit_l1_logistic(X, y, 0.1 * lambda_max(X, y), feature_names=list("abcde"))
    back = GlmFit.loads(fit.dumps())
    np.testing.assert_array_equal(back.predict_log_odds(X), fit.predict_log_odds(X))
    assert back.feature_names == list("abcde") and back.lam == fit.lam
    b0, beta = fit.raw_coefficients()
    np.testing.assert_allclose(b0 + X @ beta, fit.predict_log_odds(X), atol=1e-10)


# ---------------------------------------------------------------- path and CV


def test_path_warm_start_active_set():
    X, y = instance(13, n=120, p=6)
    grid = LambdaGrid.from_lambda_max(lambda_max(X, y), 20)
    assert grid.values[0] == pytest.approx(lambda_max(X, y))
    fits = fit_path(X, y, grid.values)
    assert np.count_nonzero(fits[0].coefficients) == 0
    assert np.count_nonzero(fits[-1].coefficients) > 0
    for fit in fits:
        certify(fit, X, y)


def test_grid_of_length_one():
    X, y = instance(14)
    lam, _ = select_lambda_cv(X, y, grid=LambdaGrid.from_lambda_max(0.03, 1))
    assert lam == 0.03


def _noise_hits(n=100, p=5, reps=50):
    hits = 0
    for seed in range(reps):
        rng = np.random.default_rng(1000 + seed)
        X = rng.normal(size=(n, p))
        y = rng.integers(0, 2, n)
        grid = LambdaGrid.from_lambda_max(lambda_max(X, y), 50)
        lam, _ = select_lambda_cv(X, y, grid=grid, seed=seed)
        hits += lam == grid.values[0]
    return hits


@pytest.fixture(scope="module")
def noise_hits():
    return _noise_hits()


@pytest.mark.xfail(strict=True, reason="minimum-deviance CV keeps a spurious feature in ~1/3 "
                                       "of pure-noise draws at n=100, p=5 (measured 32/50)")
def test_pure_noise_selects_top_of_grid(noise_hits):
    assert noise_hits >= 40


def test_pure_noise_mostly_selects_top_of_grid(noise_hits):
    assert noise_hits >= 30


def test_duplicated_rows_same_lambda():
    X, y = instance(15, n=90, p=5, signal=1.5)
    folds = stratified_folds(y, 5, 3).fold_index
    lam1, c1 = select_lambda_cv(X, y, folds=folds)
    lam2, c2 = select_lambda_cv(np.vstack([X, X]), np.r_[y, y], folds=np.tile(folds, 2))
    assert lam1 == pytest.approx(lam2, rel=1e-12)
    np.testing.assert_allclose(c1, c2, atol=1e-7)


def test_cv_fit_certified_and_sparse():
    rng = np.random.default_rng(16)
    X = rng.normal(size=(300, 10))
    y = (rng.uniform(size=300) < sigmoid(2 * X[:, 0])).astype(float)
    fit = certify(fit_l1_logistic_cv(X, y, seed=1), X, y)
    assert fit.cv_curve is not None and len(fit.cv_curve) == 50
    assert np.argmax(np.abs(fit.coefficients)) == 0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.02, 1.0))
def test_kkt_property(seed, frac):
    X, y = instance(seed, n=40, p=3)
    if y.min() == y.max():
        return
    lam = frac * lambda_max(X, y)
    certify(fit_l1_logistic(X, y, lam), X, y)
