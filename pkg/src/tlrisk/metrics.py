"""Discrimination, calibration and threshold metrics for binary risk scores.

Classification convention throughout: a row is predicted positive when its
score is >= the threshold.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata
from statsmodels.nonparametric.smoothers_lowess import lowess


class MetricError(ValueError):
    pass


def _check(scores, labels):
    s = np.asarray(scores, dtype=float).ravel()
    y = np.asarray(labels).ravel().astype(np.int64)
    if s.shape != y.shape:
        raise MetricError("scores and labels differ in length")
    return s, y


def _both_classes(y):
    n_pos = int(y.sum())
    if n_pos == 0:
        raise MetricError("no positive labels")
    if n_pos == y.shape[0]:
        raise MetricError("no negative labels")
    return n_pos, y.shape[0] - n_pos


def auroc(scores, labels) -> float:
    """Mann-Whitney estimate of P(score+ > score-) with ties counted half."""
    s, y = _check(scores, labels)
    n_pos, n_neg = _both_classes(y)
    ranks = rankdata(s, method="average")
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auprc(scores, labels) -> float:
    """Average precision; tied scores enter the ranking as one block."""
    s, y = _check(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise MetricError("average precision needs at least one positive label")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    # last index of each block of equal scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = np.cumsum(y)[ends]
    pp = ends + 1
    d_recall = np.diff(np.r_[0, tp]) / n_pos
    precision = tp / pp
    # fsum is exactly rounded, so the result does not depend on block order
    return math.fsum(d_recall * precision)


def brier(probs, labels) -> float:
    p, y = _check(probs, labels)
    if np.any((p < 0) | (p > 1)):
        raise MetricError("probabilities must lie in [0, 1]")
    return float(np.mean((p - y) ** 2))


def smoothed_observed_rate(probs, labels, span: float = 0.75) -> np.ndarray:
    """Local-linear tricube smoother of labels on predicted probabilities.

    Evaluated at every input point, without robustness iterations. For large
    inputs the smoother is solved on points at least 1e-3 of the probability
    range apart and linearly interpolated in between.
    """
    p, y = _check(probs, labels)
    delta = 0.0 if p.shape[0] <= 5000 else 1e-3 * float(np.ptp(p))
    fitted = lowess(y.astype(float), p, frac=span, it=0, delta=delta, return_sorted=False)
    return np.clip(fitted, 0.0, 1.0)


def ici(probs, labels, span: float = 0.75) -> float:
    """Integrated calibration index: mean |smoothed observed rate - prediction|."""
    p, y = _check(probs, labels)
    if p.shape[0] < 20:
        raise MetricError("ICI needs at least 20 rows; the smoother is unstable below that")
    if np.all(p == p[0]):
        raise MetricError("constant predictions; calibration curve undefined")
    return float(np.mean(np.abs(smoothed_observed_rate(p, y, span) - p)))


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class ThresholdMetrics:
    counts: ConfusionCounts
    threshold: float
    sensitivity: float
    specificity: float
    precision: float | None
    balanced_accuracy: float
    f1: float | None


def confusion_at(scores, labels, threshold: float) -> ThresholdMetrics:
    """Confusion counts and derived rates at ``threshold``.

    Precision and F1 are ``None`` when nothing is predicted positive.
    """
    s, y = _check(scores, labels)
    if not 0.0 < threshold < 1.0:
        raise MetricError("threshold must lie in (0, 1)")
    if not np.any(y == 1):
        raise MetricError("sensitivity undefined: no positive labels")
    if not np.any(y == 0):
        raise MetricError("specificity undefined: no negative labels")
    pred = s >= threshold
    tp = int(np.sum(pred & (y == 1)))
    fp = int(np.sum(pred & (y == 0)))
    tn = int(np.sum(~pred & (y == 0)))
    fn = int(np.sum(~pred & (y == 1)))
    return metrics_from_counts(ConfusionCounts(tp, fp, tn, fn), threshold)


def metrics_from_counts(c: ConfusionCounts, threshold: float = math.nan) -> ThresholdMetrics:
    sens = c.tp / (c.tp + c.fn)
    spec = c.tn / (c.tn + c.fp)
    if c.tp + c.fp == 0:
        prec = f1 = None
    else:
        prec = c.tp / (c.tp + c.fp)
        f1 = 0.0 if prec + sens == 0 else 2.0 * prec * sens / (prec + sens)
    return ThresholdMetrics(c, threshold, sens, spec, prec, 0.5 * (sens + spec), f1)


def youden_threshold(scores, labels) -> float:
    """Observed score maximizing sensitivity + specificity - 1 (rule: score >= t).

    Ties go to the smallest such threshold.
    """
    s, y = _check(scores, labels)
    n_pos, n_neg = _both_classes(y)
    order = np.argsort(-s, kind="stable")
    s_sorted, y_sorted = s[order], y[order]
    ends = np.flatnonzero(np.r_[s_sorted[1:] != s_sorted[:-1], True])
    tp = np.cumsum(y_sorted)[ends]
    fp = (ends + 1) - tp
    # integer numerators keep the comparison exact
    j_num = tp * n_neg - fp * n_pos
    cand = s_sorted[ends]  # descending thresholds
    best = j_num.max()
    return float(cand[np.flatnonzero(j_num == best)[-1]])


class ThresholdKind(str, enum.Enum):
    FIXED = "fixed"
    PREVALENCE = "prevalence"
    YOUDEN = "youden"


@dataclass(frozen=True)
class ThresholdSpec:
    kind: ThresholdKind
    value: float | None = None

    @classmethod
    def parse(cls, text: str) -> "ThresholdSpec":
        t = text.strip().lower()
        if t in ("prevalence", "youden"):
            return cls(ThresholdKind(t))
        try:
            c = float(t)
        except ValueError:
            raise ValueError(f"unknown threshold {text!r}") from None
        if not 0 < c < 1:
            raise ValueError("fixed threshold must lie in (0, 1)")
        return cls(ThresholdKind.FIXED, c)

    @property
    def label(self) -> str:
        return repr(self.value) if self.kind == ThresholdKind.FIXED else self.kind.value

    def resolve(self, train_scores, train_labels) -> float:
        """Bind the threshold to training data only, clipped into (0, 1)."""
        if self.kind == ThresholdKind.FIXED:
            t = float(self.value)
        elif self.kind == ThresholdKind.PREVALENCE:
            t = float(np.mean(train_labels))
        else:
            t = youden_threshold(train_scores, train_labels)
        # saturated probabilities can sit exactly at 0.0 or 1.0
        return float(np.clip(t, 1e-12, 1.0 - 1e-12))


DEFAULT_THRESHOLDS = (
    ThresholdSpec(ThresholdKind.FIXED, 0.5),
    ThresholdSpec(ThresholdKind.PREVALENCE),
    ThresholdSpec(ThresholdKind.YOUDEN),
)


@dataclass
class MetricReport:
    n: int
    prevalence: float
    auroc: float
    auprc: float
    brier: float
    ici: float | None
    thresholds: dict[str, ThresholdMetrics]


def evaluate(probs, labels, thresholds: dict[str, float] | None = None,
             ici_span: float = 0.75) -> MetricReport:
    """Full metric report on one evaluation set.

    ``thresholds`` maps a label to an already-resolved threshold value.
    ICI is ``None`` when it cannot be computed (too few rows, constant probs).
    """
    p, y = _check(probs, labels)
    try:
        ici_val = ici(p, y, ici_span)
    except MetricError:
        ici_val = None
    blocks = {k: confusion_at(p, y, v) for k, v in (thresholds or {}).items()}
    return MetricReport(int(y.shape[0]), float(y.mean()), auroc(p, y), auprc(p, y),
                        brier(p, y), ici_val, blocks)
