"""L1-penalized logistic regression with an optional fixed offset.

The objective is the per-observation average negative log-likelihood plus
``lam * ||beta||_1`` with an unpenalized intercept::

    F(b0, beta) = mean_i nll(y_i, b0 + offset_i + z_i @ beta) + lam * |beta|_1

where ``z_i`` is the standardized design row. It is minimized by a proximal
Newton scheme: each outer iteration forms the IRLS quadratic approximation,
solves the penalized weighted least squares problem by cyclic coordinate
descent, and backtracks along the resulting direction so the objective never
increases.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy.special import expit

from .data import DataError, Standardizer, stratified_folds

log = logging.getLogger(__name__)

EPS = 1e-12
FORMAT_VERSION = 1


def sigmoid(t):
    return expit(t)


def clamp_prob(p, eps: float = EPS):
    return np.clip(p, eps, 1.0 - eps)


def logit(p, eps: float = EPS):
    p = clamp_prob(np.asarray(p, dtype=float), eps)
    return np.log(p) - np.log1p(-p)


def _softplus(t):
    return np.logaddexp(0.0, t)


def bernoulli_nll(y, eta):
    """Per-observation negative log-likelihood of labels ``y`` at log-odds ``eta``."""
    y = np.asarray(y, dtype=float)
    eta = np.asarray(eta, dtype=float)
    out = y * _softplus(-eta) + (1.0 - y) * _softplus(eta)
    return out if out.ndim else float(out)


def mean_nll(y, eta) -> float:
    return float(np.mean(bernoulli_nll(y, eta)))


@dataclass
class LambdaGrid:
    values: np.ndarray
    n_points: int
    ratio: float

    @classmethod
    def from_lambda_max(cls, lam_max: float, n_points: int = 50, ratio: float = 1e-3) -> "LambdaGrid":
        lam_max = max(float(lam_max), 1e-10)
        if n_points == 1:
            vals = np.array([lam_max])
        else:
            vals = np.geomspace(lam_max, lam_max * ratio, n_points)
        return cls(vals, n_points, ratio)


@dataclass
class GlmFit:
    intercept: float
    coefficients: np.ndarray
    standardizer: Standardizer
    lam: float
    converged: bool
    n_iterations: int
    feature_names: list[str] | None = None
    objective_trace: list[float] = field(default_factory=list, repr=False)
    cv_curve: np.ndarray | None = field(default=None, repr=False)
    train_eta: np.ndarray | None = field(default=None, repr=False)

    @property
    def width(self) -> int:
        return int(self.coefficients.shape[0])

    @property
    def active(self) -> np.ndarray:
        return np.flatnonzero(self.coefficients != 0.0)

    def predict_log_odds(self, X, offset=None) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.width:
            raise DataError(f"design width mismatch: fit has {self.width} columns, got {X.shape}")
        eta = self.intercept + self.standardizer.apply(X) @ self.coefficients
        if offset is not None:
            eta = eta + np.asarray(offset, dtype=float)
        return eta

    def predict_proba(self, X, offset=None) -> np.ndarray:
        return sigmoid(self.predict_log_odds(X, offset))

    def raw_coefficients(self) -> tuple[float, np.ndarray]:
        """Intercept and slopes on the original (unstandardized) column scale."""
        b = self.coefficients / self.standardizer.sd
        return float(self.intercept - self.standardizer.mean @ b), b

    def to_dict(self) -> dict:
        return {
            "format": "tlrisk.GlmFit",
            "version": FORMAT_VERSION,
            "feature_names": self.feature_names,
            "intercept": self.intercept,
            "coefficients": self.coefficients.tolist(),
            "lambda": self.lam,
            "converged": self.converged,
            "n_iterations": self.n_iterations,
            "standardizer": self.standardizer.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GlmFit":
        if d.get("format") != "tlrisk.GlmFit" or d.get("version") != FORMAT_VERSION:
            raise ValueError("not a supported GlmFit document")
        return cls(
            intercept=float(d["intercept"]),
            coefficients=np.array(d["coefficients"], dtype=float),
            standardizer=Standardizer.from_dict(d["standardizer"]),
            lam=float(d["lambda"]),
            converged=bool(d["converged"]),
            n_iterations=int(d["n_iterations"]),
            feature_names=d.get("feature_names"),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def loads(cls, text: str) -> "GlmFit":
        return cls.from_dict(json.loads(text))


# ------------------------------------------------------------------ kernel


@njit(cache=True)
def _gram_lasso_cd(Q, c, theta, lam, tol, max_cycles):
    """Coordinate descent for theta' Q theta / 2 - c' theta + lam |theta[1:]|_1.

    ``Q`` and ``c`` are the weighted Gram matrix and cross-products of the
    design with a leading intercept column, so each sweep costs O(p^2)
    instead of O(n p). Coordinate 0 (intercept) is unpenalized. Full sweeps
    alternate with active-set sweeps until a full sweep moves nothing by
    more than ``tol``. ``theta`` is updated in place.
    """
    p = Q.shape[0]
    Qt = Q @ theta
    cycles = 0
    full = True
    while cycles < max_cycles:
        cycles += 1
        maxch = 0.0
        for j in range(p):
            if Q[j, j] <= 0.0:
                continue
            if j > 0 and not full and theta[j] == 0.0:
                continue
            g = c[j] - Qt[j] + Q[j, j] * theta[j]
            if j == 0:
                new = g / Q[j, j]
            elif g > lam:
                new = (g - lam) / Q[j, j]
            elif g < -lam:
                new = (g + lam) / Q[j, j]
            else:
                new = 0.0
            d = new - theta[j]
            if d != 0.0:
                for k in range(p):
                    Qt[k] += d * Q[k, j]
                theta[j] = new
                if abs(d) > maxch:
                    maxch = abs(d)
        if maxch < tol:
            if full:
                break
            full = True
        else:
            full = False
    return cycles


# ------------------------------------------------------------------ solver


def _objective(y, eta, beta, lam) -> float:
    return mean_nll(y, eta) + lam * float(np.abs(beta).sum())


def _offset_intercept(y, off) -> float:
    """Intercept solving the offset-only (all slopes zero) problem."""
    ybar = float(np.mean(y))
    if ybar <= 0.0 or ybar >= 1.0:
        raise DataError("labels are all 0 or all 1; intercept is unidentifiable")
    b0 = float(np.log(ybar) - np.log1p(-ybar))
    if not np.any(off):
        return b0
    b0 -= float(np.mean(off))
    for _ in range(100):
        p = sigmoid(b0 + off)
        g = float(np.sum(y - p))
        h = float(np.sum(p * (1 - p)))
        step = g / max(h, 1e-12)
        b0 += step
        if abs(step) < 1e-13 * max(1.0, abs(b0)):
            break
    return b0


def _null_gradient(Z, y, off) -> tuple[float, np.ndarray]:
    b0 = _offset_intercept(y, off)
    return b0, Z.T @ (y - sigmoid(b0 + off)) / y.shape[0]


def _solve(Z, y, off, lam, b0=None, beta=None, tol=1e-7, max_iter=10000):
    """Core proximal-Newton loop on an already standardized design."""
    n, p = Z.shape
    b0_null, grad0 = _null_gradient(Z, y, off)
    if p == 0 or lam >= float(np.max(np.abs(grad0), initial=0.0)):
        # all-zero slopes satisfy KKT; return the closed form exactly
        eta = b0_null + off
        return b0_null, np.zeros(p), True, 0, [_objective(y, eta, np.zeros(p), lam)], eta
    if beta is None:
        beta = np.zeros(p)
        b0 = b0_null
    beta = np.array(beta, dtype=float)
    b0 = float(b0)
    eta = b0 + off + Z @ beta
    F = _objective(y, eta, beta, lam)
    trace = [F]
    A = np.column_stack([np.ones(n), Z])
    inner_tol = min(tol * 1e-1, 1e-8)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        prob = sigmoid(eta)
        w = np.maximum(prob * (1.0 - prob), 1e-10)
        resid = y - prob
        # weighted normal equations of the IRLS step, intercept in column 0
        Aw = A * (w / n)[:, None]
        Q = A.T @ Aw
        c = Aw.T @ ((eta - off) + resid / w)
        theta = np.concatenate([[b0], beta])
        _gram_lasso_cd(Q, c, theta, lam, inner_tol, 100000)
        d0 = theta[0] - b0
        d = theta[1:] - beta
        if d0 == 0.0 and not np.any(d):
            converged = True
            break
        # Armijo backtracking on the composite objective
        g0 = -float(resid.sum()) / n
        gb = -(Z.T @ resid) / n
        pen_old = float(np.abs(beta).sum())
        delta = g0 * d0 + float(gb @ d) + lam * (float(np.abs(theta[1:]).sum()) - pen_old)
        Zd = Z @ d + d0
        t = 1.0
        while True:
            b_t = beta + t * d
            eta_t = eta + t * Zd
            F_t = _objective(y, eta_t, b_t, lam)
            if F_t <= F + 1e-4 * t * min(delta, 0.0) + 1e-14 * abs(F):
                break
            t *= 0.5
            if t < 1e-12:
                break
        if t < 1e-12:
            # no descent possible at machine precision
            converged = True
            break
        step = t * max(abs(d0), float(np.max(np.abs(d), initial=0.0)))
        beta, b0, eta, F = b_t, b0 + t * d0, eta_t, F_t
        trace.append(F)
        if step < tol:
            converged = True
            break
        if lam == 0.0 and _separated(y, eta):
            log.warning("data are separable at lambda=0; stopping with converged=False")
            break
    return b0, beta, converged, it, trace, eta


def _separated(y, eta) -> bool:
    correct = np.where(y == 1, eta, -eta)
    return bool(np.min(correct) > 20.0)


def _prepare(X, y, offset, standardize):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    y = np.asarray(y, dtype=float)
    if X.shape[0] != y.shape[0]:
        raise DataError("X and y lengths differ")
    if not np.all(np.isfinite(X)):
        raise DataError("non-finite values in design")
    off = np.zeros(y.shape[0]) if offset is None else np.asarray(offset, dtype=float)
    if off.shape != y.shape:
        raise DataError("offset length mismatch")
    if standardize:
        st = Standardizer.fit(X)
    else:
        st = Standardizer(np.zeros(X.shape[1]), np.ones(X.shape[1]))
    Z = np.asfortranarray(st.apply(X))
    return Z, y, off, st


def lambda_max(X, y, offset=None, standardize: bool = True) -> float:
    """Smallest penalty at which all slopes are zero (KKT at the null solution)."""
    Z, y, off, _ = _prepare(X, y, offset, standardize)
    _, g = _null_gradient(Z, y, off)
    return float(np.max(np.abs(g), initial=0.0))


def fit_l1_logistic(
    X,
    y,
    lam: float,
    offset=None,
    *,
    standardize: bool = True,
    tol: float = 1e-7,
    max_iter: int = 10000,
    init: GlmFit | None = None,
    feature_names=None,
) -> GlmFit:
    """Fit L1-penalized logistic regression with a fixed offset.

    Parameters
    ----------
    X : (n, p) array
        Raw design; standardized internally unless ``standardize=False``.
    y : (n,) array of 0/1
    lam : float
        Penalty on the average-loss scale.
    offset : (n,) array, optional
        Fixed per-row log-odds added to the linear predictor; never refit.
    init : GlmFit, optional
        Warm start (coefficients are on the standardized scale).

    Returns
    -------
    GlmFit
        ``converged`` is False when ``max_iter`` outer iterations were used
        or separation was detected at ``lam == 0``.
    """
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    Z, y, off, st = _prepare(X, y, offset, standardize)
    b0 = beta = None
    if init is not None:
        b0, beta = init.intercept, init.coefficients
    b0, beta, conv, it, trace, eta = _solve(Z, y, off, float(lam), b0, beta, tol, max_iter)
    return GlmFit(float(b0), beta, st, float(lam), conv, it, feature_names, trace, train_eta=eta)


def fit_path(X, y, lambdas, offset=None, *, standardize: bool = True, tol: float = 1e-7,
             max_iter: int = 10000) -> list[GlmFit]:
    """Fits along a decreasing lambda sequence, warm-starting each from the last."""
    Z, y, off, st = _prepare(X, y, offset, standardize)
    fits = []
    b0 = beta = None
    for lam in lambdas:
        b0, beta, conv, it, trace, eta = _solve(Z, y, off, float(lam), b0, beta, tol, max_iter)
        fits.append(GlmFit(float(b0), beta, st, float(lam), conv, it, None, trace))
    return fits


def select_lambda_cv(
    X,
    y,
    offset=None,
    grid: LambdaGrid | None = None,
    k_folds: int = 5,
    seed: int = 0,
    *,
    folds=None,
    n_lambdas: int = 50,
    ratio: float = 1e-3,
) -> tuple[float, np.ndarray]:
    """Choose lambda by stratified k-fold CV on mean held-out deviance.

    Ties go to the larger lambda. ``folds`` may supply a precomputed fold
    index per row instead of drawing one from ``seed``.

    Returns
    -------
    lambda_star, cv_curve
        ``cv_curve[i]`` is the mean held-out negative log-likelihood at
        ``grid.values[i]``.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    y = np.asarray(y)
    off = np.zeros(y.shape[0]) if offset is None else np.asarray(offset, dtype=float)
    if grid is None:
        grid = LambdaGrid.from_lambda_max(lambda_max(X, y, off), n_lambdas, ratio)
    lams = np.asarray(grid.values, dtype=float)
    if lams.shape[0] == 1:
        return float(lams[0]), np.array([np.nan])
    if folds is None:
        fold_index = stratified_folds(y, k_folds, seed).fold_index
    else:
        fold_index = np.asarray(folds)
        k_folds = int(fold_index.max()) + 1
    losses = np.zeros((k_folds, lams.shape[0]))
    counts = np.zeros(k_folds)
    for f in range(k_folds):
        te = fold_index == f
        tr = ~te
        fits = fit_path(X[tr], y[tr], lams, off[tr])
        for i, fit in enumerate(fits):
            losses[f, i] = np.sum(bernoulli_nll(y[te], fit.predict_log_odds(X[te], off[te])))
        counts[f] = te.sum()
    curve = losses.sum(axis=0) / counts.sum()
    # grid is decreasing, so argmin returns the first (largest) lambda among ties
    best = int(np.argmin(curve))
    return float(lams[best]), curve


def fit_l1_logistic_cv(X, y, offset=None, *, k_folds: int = 5, seed: int = 0,
                       n_lambdas: int = 50, ratio: float = 1e-3, feature_names=None) -> GlmFit:
    """CV-selected lambda, then a refit on all rows.

    Falls back to ``lambda_max / 10`` when the labels cannot be stratified
    into ``k_folds`` folds.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    try:
        lam, curve = select_lambda_cv(X, y, offset, None, k_folds, seed,
                                      n_lambdas=n_lambdas, ratio=ratio)
    except DataError as exc:
        lam = lambda_max(X, y, offset) / 10.0
        curve = None
        log.warning("lambda CV not possible (%s); using lambda_max/10 = %.4g", exc, lam)
    fit = fit_l1_logistic(X, y, lam, offset, feature_names=feature_names)
    fit.cv_curve = curve
    return fit


# ------------------------------------------------------------------ checks


def loss_gradient(Z, y, intercept: float, beta, offset=None) -> np.ndarray:
    """Gradient of the mean loss in (intercept, beta) on design ``Z``."""
    Z = np.asarray(Z, dtype=float)
    y = np.asarray(y, dtype=float)
    off = 0.0 if offset is None else np.asarray(offset, dtype=float)
    resid = sigmoid(intercept + off + Z @ np.asarray(beta, dtype=float)) - y
    return np.concatenate([[resid.mean()], Z.T @ resid / y.shape[0]])


def kkt_violation(fit: GlmFit, X, y, offset=None) -> float:
    """Largest violation of the lasso optimality conditions at ``fit``.

    Zero slopes need ``|grad_j| <= lam``; active slopes need
    ``grad_j = -lam * sign(beta_j)``; the intercept gradient must vanish.
    """
    Z = fit.standardizer.apply(np.asarray(X, dtype=float))
    g = loss_gradient(Z, y, fit.intercept, fit.coefficients, offset)
    viol = [abs(g[0])]
    gb = g[1:]
    b = fit.coefficients
    zero = b == 0
    if np.any(zero):
        viol.append(float(np.max(np.abs(gb[zero]) - fit.lam)))
    if np.any(~zero):
        viol.append(float(np.max(np.abs(gb[~zero] + fit.lam * np.sign(b[~zero])))))
    return max(0.0, max(viol))
