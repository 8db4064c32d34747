"""Two-step transfer: a pooled source learner plus per-group offset adjustments.

Step 1 fits a source learner (lasso logistic on main effects and all pairwise
products, or boosted trees) on pooled data. Step 2 fits, per group, a lasso
logistic regression whose offset is the source log-odds, so only the
group-specific deviation is estimated. Optional per-group logistic
recalibration maps the final log-odds through ``a + b * logit(p)``.
"""
from __future__ import annotations

import enum
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .data import (Cohort, DataError, DesignMap, GroupedDataset, TransformSpec,
                   expanded_names)
from .gbt import GbtConfig, GbtModel, fit_gbt
from .glm import (EPS, GlmFit, clamp_prob, fit_l1_logistic, fit_l1_logistic_cv, lambda_max,
                  logit, sigmoid)

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


class LearnerKind(str, enum.Enum):
    GLM = "glm"
    GBT = "gbt"


@dataclass(frozen=True)
class GlmConfig:
    k_folds: int = 5
    n_lambdas: int = 50
    ratio: float = 1e-3
    seed: int = 0
    lam: float | None = None  # fixed penalty, bypasses CV
    lam_factor: float | None = None  # fixed penalty as a multiple of lambda_max


@dataclass(frozen=True)
class LearnerConfig:
    glm: GlmConfig = field(default_factory=GlmConfig)
    gbt: GbtConfig = field(default_factory=GbtConfig)
    adjustment: GlmConfig = field(default_factory=GlmConfig)
    adjustment_spec: TransformSpec = TransformSpec.MAIN_ONLY

    @classmethod
    def from_dict(cls, d: dict | None) -> "LearnerConfig":
        d = d or {}
        return cls(
            glm=GlmConfig(**d.get("glm", {})),
            gbt=GbtConfig(**d.get("gbt", {})),
            adjustment=GlmConfig(**d.get("adjustment", {})),
            adjustment_spec=TransformSpec(d.get("adjustment_spec", TransformSpec.MAIN_ONLY.value)),
        )

    def to_dict(self) -> dict:
        return {
            "glm": asdict(self.glm),
            "gbt": asdict(self.gbt),
            "adjustment": asdict(self.adjustment),
            "adjustment_spec": self.adjustment_spec.value,
        }


def _fit_penalized(D, y, cfg: GlmConfig, offset=None, names=None) -> GlmFit:
    if cfg.lam is not None:
        return fit_l1_logistic(D, y, cfg.lam, offset, feature_names=names)
    if cfg.lam_factor is not None:
        lam = cfg.lam_factor * lambda_max(D, y, offset)
        return fit_l1_logistic(D, y, lam, offset, feature_names=names)
    return fit_l1_logistic_cv(D, y, offset, k_folds=cfg.k_folds, seed=cfg.seed,
                              n_lambdas=cfg.n_lambdas, ratio=cfg.ratio, feature_names=names)


# ------------------------------------------------------------------ learners


@dataclass
class SourceLearner:
    kind: LearnerKind
    model: GlmFit | GbtModel
    design: DesignMap | None
    n: int
    prevalence: float

    def log_odds(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if self.kind == LearnerKind.GLM:
            return self.model.predict_log_odds(self.design.apply(X))
        return self.model.predict_log_odds(X)

    def predict_proba(self, X) -> np.ndarray:
        return sigmoid(self.log_odds(X))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "model": self.model.to_dict(),
            "design": None if self.design is None else self.design.to_dict(),
            "n": self.n,
            "prevalence": self.prevalence,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SourceLearner":
        kind = LearnerKind(d["kind"])
        model = GlmFit.from_dict(d["model"]) if kind == LearnerKind.GLM else GbtModel.from_dict(d["model"])
        design = None if d["design"] is None else DesignMap.from_dict(d["design"])
        return cls(kind, model, design, int(d["n"]), float(d["prevalence"]))


def _as_cohort(data) -> Cohort:
    return data.pooled() if isinstance(data, GroupedDataset) else data


def fit_source(pooled, kind: LearnerKind, config: LearnerConfig | None = None) -> SourceLearner:
    """Step 1: fit a learner on pooled rows.

    GLM learners use main effects plus all pairwise products and squares
    with a CV-chosen penalty; GBT learners use raw features. The same call
    fits the target-only baselines when given a single group's rows.
    """
    config = config or LearnerConfig()
    c = _as_cohort(pooled)
    kind = LearnerKind(kind)
    if c.labels.min() == c.labels.max():
        raise DataError(f"{c.group_id!r}: both classes must be present to fit a learner")
    if kind == LearnerKind.GLM:
        design = DesignMap.fit(c.features, TransformSpec.MAIN_PLUS_INTERACTIONS)
        model = _fit_penalized(design.apply(c.features), c.labels, config.glm,
                               names=expanded_names(c.feature_names, design.spec))
    else:
        design = None
        model = fit_gbt(c.features, c.labels, config.gbt)
    return SourceLearner(kind, model, design, c.m, c.prevalence)


@dataclass
class Adjustment:
    """Group-specific deviation fitted on top of a fixed source offset."""

    design: DesignMap
    fit: GlmFit

    def delta(self, X) -> np.ndarray:
        return self.fit.predict_log_odds(self.design.apply(X))

    def to_dict(self) -> dict:
        return {"design": self.design.to_dict(), "fit": self.fit.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "Adjustment":
        return cls(DesignMap.from_dict(d["design"]), GlmFit.from_dict(d["fit"]))


def fit_target_adjustment(source: SourceLearner, target: Cohort,
                          spec: TransformSpec | None = None,
                          config: LearnerConfig | None = None) -> Adjustment:
    """Step 2: lasso logistic on ``phi(x)`` with the source log-odds as offset.

    When the group is too small to stratify the inner CV, the penalty falls
    back to ``lambda_max / 10`` (logged).
    """
    config = config or LearnerConfig()
    spec = TransformSpec(spec or config.adjustment_spec)
    if target.labels.min() == target.labels.max():
        raise DataError(f"group {target.group_id!r}: both classes must be present")
    offset = source.log_odds(target.features)
    design = DesignMap.fit(target.features, spec)
    names = expanded_names(target.feature_names, spec)
    fit = _fit_penalized(design.apply(target.features), target.labels, config.adjustment,
                         offset=offset, names=names)
    if not fit.converged:
        log.warning("group %r: adjustment did not converge", target.group_id)
    return Adjustment(design, fit)


# ------------------------------------------------------------------ recalibration


@dataclass(frozen=True)
class RecalibrationParams:
    a: float = 0.0
    b: float = 1.0

    def __post_init__(self):
        if not (np.isfinite(self.a) and np.isfinite(self.b)):
            raise ValueError("recalibration parameters must be finite")


class RecalibrationError(ValueError):
    pass


def fit_recalibration(p_hat, y, *, tol: float = 1e-10, max_iter: int = 100) -> RecalibrationParams:
    """Logistic regression of ``y`` on ``logit(p_hat)`` (intercept and slope).

    Newton iterations with step halving, until the mean-scale score vector has
    norm below ``tol``.
    """
    p_hat = clamp_prob(np.asarray(p_hat, dtype=float))
    y = np.asarray(y, dtype=float)
    if p_hat.shape != y.shape:
        raise RecalibrationError("p_hat and y differ in length")
    if np.all(p_hat == p_hat[0]):
        raise RecalibrationError("degenerate predictions: all p_hat identical, slope unidentifiable")
    if y.min() == y.max():
        raise RecalibrationError("both classes are needed to recalibrate")
    L = np.column_stack([np.ones_like(p_hat), logit(p_hat)])
    n = y.shape[0]
    theta = np.array([0.0, 1.0])

    def nll(th):
        eta = L @ th
        return float(np.mean(np.logaddexp(0.0, eta) - y * eta))

    f = nll(theta)
    for _ in range(max_iter):
        mu = sigmoid(L @ theta)
        grad = L.T @ (y - mu) / n
        if np.linalg.norm(grad) < tol:
            return RecalibrationParams(float(theta[0]), float(theta[1]))
        H = (L * (mu * (1 - mu))[:, None]).T @ L / n
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            break
        t = 1.0
        while t > 1e-10:
            cand = theta + t * step
            fc = nll(cand)
            if fc <= f + 1e-14 * abs(f):
                break
            t *= 0.5
        theta, f = cand, fc
    raise RecalibrationError("recalibration did not converge (predictions may separate the labels)")


def apply_recalibration(params: RecalibrationParams | None, p_hat) -> np.ndarray:
    p = np.asarray(p_hat, dtype=float)
    if params is None:
        return p
    return sigmoid(params.a + params.b * logit(p))


def recalibrate_log_odds(params: RecalibrationParams | None, eta) -> np.ndarray:
    """Log-odds after recalibration, passing through the clamped probability."""
    eta = np.asarray(eta, dtype=float)
    if params is None:
        return eta
    return params.a + params.b * logit(clamp_prob(sigmoid(eta), EPS))


def holdout_split(labels, frac: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Stratified split: ``frac`` of each class (at least one row) is held out."""
    y = np.asarray(labels)
    rng = np.random.default_rng(seed)
    held = []
    for cls in (1, 0):
        idx = np.flatnonzero(y == cls)
        if idx.shape[0] < 2:
            raise DataError("each class needs at least two rows for a holdout split")
        idx = idx[rng.permutation(idx.shape[0])]
        held.append(idx[: max(1, int(round(frac * idx.shape[0])))])
    hold = np.sort(np.concatenate(held))
    mask = np.zeros(y.shape[0], dtype=bool)
    mask[hold] = True
    return np.flatnonzero(~mask), hold


def holdout_recalibration(fit_predict: Callable[[Cohort, np.ndarray], np.ndarray],
                          cohort: Cohort, *, frac: float = 0.2,
                          seed: int = 0) -> RecalibrationParams | None:
    """Fit (a, b) on out-of-sample predictions from an internal holdout.

    ``fit_predict(train_cohort, X_holdout)`` must fit a model on the training
    part and return probabilities for the held-out rows. Returns ``None``
    (identity) when the holdout cannot support a recalibration fit.
    """
    try:
        tr, ho = holdout_split(cohort.labels, frac, seed)
        p = fit_predict(cohort.subset(tr), cohort.features[ho])
        params = fit_recalibration(p, cohort.labels[ho])
    except (DataError, RecalibrationError) as exc:
        log.warning("group %r: recalibration skipped (%s)", cohort.group_id, exc)
        return None
    if params.b <= 0:
        # a non-positive slope would flatten or invert the risk ordering
        log.warning("group %r: recalibration skipped (fitted slope %.3g <= 0)",
                    cohort.group_id, params.b)
        return None
    return params


# ------------------------------------------------------------------ bundle


class UnknownGroupError(KeyError):
    pass


@dataclass
class TransferModel:
    source: SourceLearner
    adjustments: dict[str, Adjustment]
    recalibration: dict[str, RecalibrationParams | None] = field(default_factory=dict)
    fallback_to_source: bool = False

    def log_odds(self, X, group_id: str) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        eta = self.source.log_odds(X)
        adj = self.adjustments.get(group_id)
        if adj is None:
            if not self.fallback_to_source:
                raise UnknownGroupError(f"no adjustment for group {group_id!r}")
            return eta
        eta = eta + adj.delta(X)
        return recalibrate_log_odds(self.recalibration.get(group_id), eta)

    def predict(self, X, group_id: str) -> np.ndarray:
        return sigmoid(self.log_odds(X, group_id))

    def to_dict(self) -> dict:
        return {
            "format": "tlrisk.TransferModel",
            "version": FORMAT_VERSION,
            "source": self.source.to_dict(),
            "adjustments": {g: a.to_dict() for g, a in self.adjustments.items()},
            "recalibration": {g: None if r is None else asdict(r)
                              for g, r in self.recalibration.items()},
            "fallback_to_source": self.fallback_to_source,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TransferModel":
        if d.get("format") != "tlrisk.TransferModel" or d.get("version") != FORMAT_VERSION:
            raise ValueError("not a supported TransferModel document")
        return cls(
            SourceLearner.from_dict(d["source"]),
            {g: Adjustment.from_dict(a) for g, a in d["adjustments"].items()},
            {g: None if r is None else RecalibrationParams(**r)
             for g, r in d["recalibration"].items()},
            bool(d["fallback_to_source"]),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def loads(cls, text: str) -> "TransferModel":
        return cls.from_dict(json.loads(text))


def fit_transfer_model(dataset: GroupedDataset, kind: LearnerKind,
                       config: LearnerConfig | None = None, *, recalibrate: bool = True,
                       holdout_frac: float = 0.2, seed: int = 0) -> TransferModel:
    """Source on all groups pooled, then one adjustment (and recalibration) per group."""
    config = config or LearnerConfig()
    pooled = dataset.pooled()
    source = fit_source(pooled, kind, config)
    adjustments, recal = {}, {}
    for c in dataset.cohorts:
        adjustments[c.group_id] = fit_target_adjustment(source, c, config=config)
        if recalibrate:
            def fp(train, X_ho, _c=c):
                # held-out rows are also in the pool: refit the source without them
                held = np.setdiff1d(_c.row_ids, train.row_ids)
                src = fit_source(pooled.subset(np.flatnonzero(~np.isin(pooled.row_ids, held))),
                                 kind, config)
                adj = fit_target_adjustment(src, train, config=config)
                return sigmoid(src.log_odds(X_ho) + adj.delta(X_ho))
            recal[c.group_id] = holdout_recalibration(fp, c, frac=holdout_frac, seed=seed)
    return TransferModel(source, adjustments, recal)
