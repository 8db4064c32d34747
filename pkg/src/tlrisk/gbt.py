"""Second-order gradient-boosted regression trees under logistic loss.

Exact greedy split search: every midpoint between consecutive distinct
feature values is a candidate. Trees output log-odds increments with the
learning rate already folded into the stored leaf weights.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from numba import njit

from .data import DataError
from .glm import bernoulli_nll, sigmoid

FORMAT_VERSION = 1


@dataclass(frozen=True)
class GbtConfig:
    n_trees: int = 200
    max_depth: int = 4
    learning_rate: float = 0.1
    min_child_weight: float = 1.0
    l2_leaf_penalty: float = 1.0
    subsample_rows: float = 0.8
    min_split_gain: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if not 0.0 < self.learning_rate <= 1.0:
            raise ValueError("learning_rate must be in (0, 1]")
        if not 0.0 < self.subsample_rows <= 1.0:
            raise ValueError("subsample_rows must be in (0, 1]")
        if self.min_child_weight < 0 or self.l2_leaf_penalty < 0 or self.min_split_gain < 0:
            raise ValueError("penalties must be nonnegative")


@dataclass
class Tree:
    feature: np.ndarray  # -1 marks a leaf
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    gain: np.ndarray

    @property
    def depth(self) -> int:
        def _d(i):
            if self.feature[i] < 0:
                return 0
            return 1 + max(_d(self.left[i]), _d(self.right[i]))
        return _d(0)

    def predict(self, X) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        while True:
            f = self.feature[node]
            internal = f >= 0
            if not internal.any():
                break
            r, nd = rows[internal], node[internal]
            go_left = X[r, f[internal]] < self.threshold[nd]
            node[internal] = np.where(go_left, self.left[nd], self.right[nd])
        return self.value[node]

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in
                ("feature", "threshold", "left", "right", "value", "gain")}

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        return cls(
            np.array(d["feature"], dtype=np.int64),
            np.array(d["threshold"], dtype=float),
            np.array(d["left"], dtype=np.int64),
            np.array(d["right"], dtype=np.int64),
            np.array(d["value"], dtype=float),
            np.array(d["gain"], dtype=float),
        )


# gains closer than this (relative) are ties; prefix sums taken in different
# orders can separate exact ties by a few ulps
TIE_RTOL = 1e-12


def split_gain(GL, HL, GR, HR, lam) -> float:
    return 0.5 * (GL * GL / (HL + lam) + GR * GR / (HR + lam) - (GL + GR) ** 2 / (HL + HR + lam))


def _scan_sorted(xs, gs, hs, G, H, l2, min_child_weight):
    """Best cut along one feature whose values ``xs`` are already sorted."""
    cut = np.flatnonzero(xs[:-1] < xs[1:])
    if cut.size == 0:
        return None
    GL = np.cumsum(gs)[cut]
    HL = np.cumsum(hs)[cut]
    GR, HR = G - GL, H - HL
    ok = (HL >= min_child_weight) & (HR >= min_child_weight)
    if not ok.any():
        return None
    gain = 0.5 * (GL * GL / (HL + l2) + GR * GR / (HR + l2) - G * G / (H + l2))
    gain = np.where(ok, gain, -np.inf)
    top = gain.max()
    k = int(np.flatnonzero(gain >= top - TIE_RTOL * (1.0 + abs(top)))[0])
    return float(gain[k]), 0.5 * (xs[cut[k]] + xs[cut[k] + 1])


def best_split(X, g, h, l2: float, min_child_weight: float):
    """Highest-gain (feature, threshold) over all midpoint candidates.

    Ties go to the lower feature index, then the lower threshold. Returns
    ``(gain, feature, threshold)`` or ``None`` when no candidate satisfies
    the child-weight constraint.
    """
    G, H = g.sum(), h.sum()
    best = None
    for f in range(X.shape[1]):
        o = np.argsort(X[:, f], kind="stable")
        s = _scan_sorted(X[o, f], g[o], h[o], G, H, l2, min_child_weight)
        if s is not None and (best is None or s[0] > best[0] + TIE_RTOL * (1.0 + abs(best[0]))):
            best = (s[0], f, s[1])
    return best


@njit(cache=True)
def _node_best_split(X, g, h, order, in_node, G, H, l2, min_child_weight):
    """Sweep each presorted feature over the rows flagged in ``in_node``."""
    n, p = X.shape
    parent = G * G / (H + l2)
    best_gain = -np.inf
    best_f = -1
    best_thr = 0.0
    for f in range(p):
        GL = 0.0
        HL = 0.0
        prev = -1
        for k in range(n):
            i = order[f, k]
            if not in_node[i]:
                continue
            if prev >= 0 and X[prev, f] < X[i, f]:
                HR = H - HL
                if HL >= min_child_weight and HR >= min_child_weight:
                    GR = G - GL
                    gain = 0.5 * (GL * GL / (HL + l2) + GR * GR / (HR + l2) - parent)
                    if best_f < 0 or gain > best_gain + TIE_RTOL * (1.0 + abs(best_gain)):
                        best_gain = gain
                        best_f = f
                        best_thr = 0.5 * (X[prev, f] + X[i, f])
            GL += g[i]
            HL += h[i]
            prev = i
    return best_gain, best_f, best_thr


def build_tree(X, g, h, config: GbtConfig, rows=None, order=None) -> Tree:
    """Grow one tree depth-first on gradients ``g`` and hessians ``h``.

    ``rows`` restricts growth to a subsample of the rows of ``X``; ``order``
    is an optional precomputed per-feature argsort of all of ``X``, shape
    (p, n), reused so nodes never re-sort.
    """
    n, p = X.shape
    if order is None:
        order = np.argsort(X, axis=0, kind="stable").T
    order = np.ascontiguousarray(order)
    in_node = np.zeros(n, dtype=bool)
    feature, threshold, left, right, value, gains = [], [], [], [], [], []
    lam = config.l2_leaf_penalty

    def new_node():
        for lst, v in ((feature, -1), (threshold, 0.0), (left, -1), (right, -1),
                       (value, 0.0), (gains, 0.0)):
            lst.append(v)
        return len(feature) - 1

    def grow(idx, depth):
        node = new_node()
        G, H = g[idx].sum(), h[idx].sum()
        if depth < config.max_depth and idx.shape[0] >= 2:
            in_node[idx] = True
            gain, f, thr = _node_best_split(X, g, h, order, in_node, G, H, lam,
                                            config.min_child_weight)
            in_node[idx] = False
            if f >= 0 and gain > config.min_split_gain:
                mask = X[idx, f] < thr
                feature[node], threshold[node], gains[node] = f, thr, gain
                left[node] = grow(idx[mask], depth + 1)
                right[node] = grow(idx[~mask], depth + 1)
                return node
        value[node] = -config.learning_rate * G / (H + lam)
        return node

    grow(np.arange(n) if rows is None else np.asarray(rows), 0)
    return Tree(
        np.array(feature, dtype=np.int64),
        np.array(threshold, dtype=float),
        np.array(left, dtype=np.int64),
        np.array(right, dtype=np.int64),
        np.array(value, dtype=float),
        np.array(gains, dtype=float),
    )


@dataclass
class GbtModel:
    base_score: float
    trees: list[Tree]
    config: GbtConfig
    n_features: int
    train_loss_trace: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def predict_log_odds(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise DataError(f"expected {self.n_features} feature columns, got shape {X.shape}")
        out = np.full(X.shape[0], self.base_score)
        for t in self.trees:
            out += t.predict(X)
        return out

    def predict_proba(self, X) -> np.ndarray:
        return sigmoid(self.predict_log_odds(X))

    def to_dict(self) -> dict:
        return {
            "format": "tlrisk.GbtModel",
            "version": FORMAT_VERSION,
            "base_score": self.base_score,
            "n_features": self.n_features,
            "config": asdict(self.config),
            "train_loss_trace": self.train_loss_trace.tolist(),
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GbtModel":
        if d.get("format") != "tlrisk.GbtModel" or d.get("version") != FORMAT_VERSION:
            raise ValueError("not a supported GbtModel document")
        return cls(
            float(d["base_score"]),
            [Tree.from_dict(t) for t in d["trees"]],
            GbtConfig(**d["config"]),
            int(d["n_features"]),
            np.array(d["train_loss_trace"], dtype=float),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def loads(cls, text: str) -> "GbtModel":
        return cls.from_dict(json.loads(text))


def fit_gbt(X, y, config: GbtConfig | None = None) -> GbtModel:
    config = config or GbtConfig()
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise DataError("X must be 2-d with one row per label")
    if X.shape[0] < 2:
        raise DataError("need at least 2 rows")
    if not np.all(np.isfinite(X)):
        raise DataError("non-finite feature values (missing values are not supported)")
    ybar = y.mean()
    if ybar <= 0 or ybar >= 1:
        raise DataError("both classes must be present")
    n = X.shape[0]
    base = float(np.log(ybar) - np.log1p(-ybar))
    rng = np.random.default_rng(config.seed)
    n_sub = max(2, int(round(config.subsample_rows * n)))
    eta = np.full(n, base)
    order = np.ascontiguousarray(np.argsort(X, axis=0, kind="stable").T)
    trees, trace = [], []
    for _ in range(config.n_trees):
        p = sigmoid(eta)
        g, h = p - y, p * (1.0 - p)
        rows = np.sort(rng.choice(n, size=n_sub, replace=False)) if n_sub < n else None
        tree = build_tree(X, g, h, config, rows=rows, order=order)
        eta = eta + tree.predict(X)
        trees.append(tree)
        trace.append(float(np.mean(bernoulli_nll(y, eta))))
    return GbtModel(base, trees, config, X.shape[1], np.array(trace))


def predict_log_odds_gbt(model: GbtModel, X) -> np.ndarray:
    return model.predict_log_odds(X)


def training_loss_trace(model: GbtModel) -> np.ndarray:
    return model.train_loss_trace.copy()
