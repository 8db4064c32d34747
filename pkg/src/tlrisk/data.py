"""Grouped binary-outcome tabular data: loading, folding, feature maps, scaling."""
from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


class DataError(ValueError):
    """Raised for malformed input data or violated data preconditions."""


@dataclass
class Cohort:
    """One group's feature matrix and binary labels."""

    group_id: str
    features: np.ndarray
    labels: np.ndarray
    feature_names: list[str]
    row_ids: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        if self.features.ndim == 1:
            self.features = self.features.reshape(-1, 1)
        self.labels = np.asarray(self.labels).astype(np.int64)
        if self.features.shape[0] != self.labels.shape[0]:
            raise DataError(
                f"group {self.group_id!r}: {self.features.shape[0]} feature rows "
                f"but {self.labels.shape[0]} labels"
            )
        if self.features.shape[1] < 1:
            raise DataError(f"group {self.group_id!r}: no feature columns")
        if len(self.feature_names) != self.features.shape[1]:
            raise DataError(f"group {self.group_id!r}: feature_names length mismatch")
        if not np.all((self.labels == 0) | (self.labels == 1)):
            raise DataError(f"group {self.group_id!r}: labels must be 0/1")
        if not np.all(np.isfinite(self.features)):
            raise DataError(f"group {self.group_id!r}: non-finite feature values")
        if self.row_ids is None:
            self.row_ids = np.arange(self.labels.shape[0])
        self.row_ids = np.asarray(self.row_ids, dtype=np.int64)

    @property
    def m(self) -> int:
        return int(self.labels.shape[0])

    @property
    def p(self) -> int:
        return int(self.features.shape[1])

    @property
    def prevalence(self) -> float:
        return float(self.labels.mean())

    def subset(self, idx) -> "Cohort":
        idx = np.asarray(idx)
        return Cohort(
            self.group_id,
            self.features[idx],
            self.labels[idx],
            list(self.feature_names),
            self.row_ids[idx],
        )


@dataclass
class GroupedDataset:
    cohorts: list[Cohort]

    def __post_init__(self):
        ids = [c.group_id for c in self.cohorts]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate group ids")
        if not self.cohorts:
            raise DataError("dataset has no groups")
        names = self.cohorts[0].feature_names
        for c in self.cohorts[1:]:
            if c.feature_names != names:
                raise DataError(f"group {c.group_id!r} has a different feature schema")
        all_ids = np.concatenate([c.row_ids for c in self.cohorts])
        if np.unique(all_ids).shape[0] != all_ids.shape[0]:
            # row ids must identify rows dataset-wide; renumber in cohort order
            start = 0
            for c in self.cohorts:
                c.row_ids = np.arange(start, start + c.m)
                start += c.m

    @property
    def feature_names(self) -> list[str]:
        return list(self.cohorts[0].feature_names)

    @property
    def group_ids(self) -> list[str]:
        return [c.group_id for c in self.cohorts]

    @property
    def n(self) -> int:
        return sum(c.m for c in self.cohorts)

    @property
    def K(self) -> int:
        return len(self.cohorts)

    def __getitem__(self, group_id: str) -> Cohort:
        for c in self.cohorts:
            if c.group_id == group_id:
                return c
        raise KeyError(group_id)

    def pooled(self, group_id: str = "pooled") -> Cohort:
        """Concatenate all cohorts in order into one cohort."""
        return Cohort(
            group_id,
            np.vstack([c.features for c in self.cohorts]),
            np.concatenate([c.labels for c in self.cohorts]),
            self.feature_names,
            np.concatenate([c.row_ids for c in self.cohorts]),
        )

    def to_csv(self, path, label_column: str = "label", group_column: str = "group") -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow([group_column, *self.feature_names, label_column])
            for c in self.cohorts:
                for row, lab in zip(c.features, c.labels):
                    w.writerow([c.group_id, *(repr(float(v)) for v in row), int(lab)])


def load_grouped_csv(path, label_column: str = "label", group_column: str = "group") -> GroupedDataset:
    """Read a grouped CSV into one cohort per distinct group value.

    Row ids are the 0-based data-row positions in the file, so they are unique
    across groups. Missing cells are rejected; there is no imputation.
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        for col in (label_column, group_column):
            if col not in header:
                raise DataError(f"{path}: missing column {col!r}")
        li, gi = header.index(label_column), header.index(group_column)
        feat_idx = [i for i in range(len(header)) if i not in (li, gi)]
        if not feat_idx:
            raise DataError(f"{path}: no feature columns")
        names = [header[i] for i in feat_idx]

        rows: dict[str, list] = {}
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not s.strip() for s in rec):
                continue
            if len(rec) != len(header):
                raise DataError(f"{path}: row {lineno} has {len(rec)} cells, expected {len(header)}")
            lab = rec[li].strip()
            if lab not in ("0", "1"):
                raise DataError(f"{path}: row {lineno}: label {lab!r} is not 0/1")
            vals = []
            for i in feat_idx:
                cell = rec[i].strip()
                try:
                    v = float(cell)
                except ValueError:
                    raise DataError(
                        f"{path}: row {lineno}, column {header[i]!r}: non-numeric value {cell!r}"
                    ) from None
                if not math.isfinite(v):
                    raise DataError(f"{path}: row {lineno}, column {header[i]!r}: non-finite value")
                vals.append(v)
            g = rec[gi].strip()
            rows.setdefault(g, []).append((lineno - 2, vals, int(lab)))

    if not rows:
        raise DataError(f"{path}: no data rows")
    cohorts = []
    for g, recs in rows.items():
        cohorts.append(
            Cohort(
                g,
                np.array([r[1] for r in recs], dtype=float).reshape(len(recs), len(names)),
                np.array([r[2] for r in recs], dtype=np.int64),
                list(names),
                np.array([r[0] for r in recs], dtype=np.int64),
            )
        )
    return GroupedDataset(cohorts)


# ---------------------------------------------------------------- folding


@dataclass(frozen=True)
class FoldAssignment:
    fold_index: np.ndarray
    k_folds: int
    seed: int

    def train_test(self, fold: int) -> tuple[np.ndarray, np.ndarray]:
        test = np.flatnonzero(self.fold_index == fold)
        train = np.flatnonzero(self.fold_index != fold)
        return train, test

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["row_index", "fold"])
            for i, f in enumerate(self.fold_index):
                w.writerow([i, int(f)])


def stratified_folds(labels, k_folds: int, seed: int, group_id: str = "?") -> FoldAssignment:
    labels = np.asarray(labels)
    if k_folds < 2:
        raise DataError("k_folds must be >= 2")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos < k_folds:
        raise DataError(
            f"group {group_id!r}: insufficient positive cases ({n_pos}) for {k_folds} folds"
        )
    if n_neg < k_folds:
        raise DataError(
            f"group {group_id!r}: insufficient negative cases ({n_neg}) for {k_folds} folds"
        )
    rng = np.random.default_rng(seed)
    fold = np.empty(labels.shape[0], dtype=np.int64)
    for cls in (1, 0):
        idx = np.flatnonzero(labels == cls)
        idx = idx[rng.permutation(idx.shape[0])]
        fold[idx] = np.arange(idx.shape[0]) % k_folds
    return FoldAssignment(fold, k_folds, seed)


def stratified_kfold(cohort: Cohort, k_folds: int, seed: int) -> FoldAssignment:
    """Shuffle each label stratum with ``seed`` and deal it round-robin into folds."""
    return stratified_folds(cohort.labels, k_folds, seed, cohort.group_id)


# ---------------------------------------------------------------- features


class TransformSpec(str, enum.Enum):
    MAIN_ONLY = "main"
    MAIN_PLUS_INTERACTIONS = "main+interactions"


def interaction_pairs(p: int) -> list[tuple[int, int]]:
    return [(i, j) for i in range(p) for j in range(i, p)]


def expand_features(X, spec: TransformSpec) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if not np.all(np.isfinite(X)):
        raise DataError("non-finite values in feature matrix")
    if spec == TransformSpec.MAIN_ONLY:
        return X
    p = X.shape[1]
    ii, jj = np.triu_indices(p)
    return np.hstack([X, X[:, ii] * X[:, jj]])


def expanded_names(names: Sequence[str], spec: TransformSpec) -> list[str]:
    names = list(names)
    if spec == TransformSpec.MAIN_ONLY:
        return names
    return names + [f"{names[i]}:{names[j]}" for i, j in interaction_pairs(len(names))]


@dataclass
class Standardizer:
    mean: np.ndarray
    sd: np.ndarray
    constant: np.ndarray = field(default=None)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.sd = np.asarray(self.sd, dtype=float)
        if self.constant is None:
            self.constant = np.zeros(self.mean.shape, dtype=bool)
        self.constant = np.asarray(self.constant, dtype=bool)

    @classmethod
    def fit(cls, X) -> "Standardizer":
        X = np.asarray(X, dtype=float)
        if X.shape[0] < 2:
            raise DataError("standardization needs at least 2 rows")
        mean = X.mean(axis=0)
        sd = X.std(axis=0)
        # relative test: a column of identical floats can still have sd ~ 1e-17
        constant = sd <= 1e-12 * np.maximum(1.0, np.abs(mean))
        sd = np.where(constant, 1.0, sd)
        return cls(mean, sd, constant)

    def apply(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.shape[1] != self.mean.shape[0]:
            raise DataError(f"expected {self.mean.shape[0]} columns, got {X.shape[1]}")
        return (X - self.mean) / self.sd

    def to_dict(self) -> dict:
        return {
            "mean": self.mean.tolist(),
            "sd": self.sd.tolist(),
            "constant": self.constant.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Standardizer":
        return cls(np.array(d["mean"], dtype=float), np.array(d["sd"], dtype=float),
                   np.array(d["constant"], dtype=bool))


def standardize(X_train) -> tuple[Standardizer, np.ndarray]:
    st = Standardizer.fit(X_train)
    return st, st.apply(X_train)


@dataclass
class DesignMap:
    """Raw features -> penalized design columns.

    With interactions, raw columns are standardized first and products are
    formed on the standardized values; the GLM standardizes the full design
    again, so every penalized column ends up on unit scale.
    """

    spec: TransformSpec
    pre: Standardizer | None = None

    @classmethod
    def fit(cls, X, spec: TransformSpec) -> "DesignMap":
        spec = TransformSpec(spec)
        if spec == TransformSpec.MAIN_ONLY:
            return cls(spec)
        return cls(spec, Standardizer.fit(X))

    def apply(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if self.pre is not None:
            X = self.pre.apply(X)
        return expand_features(X, self.spec)

    def to_dict(self) -> dict:
        return {"spec": self.spec.value, "pre": None if self.pre is None else self.pre.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "DesignMap":
        pre = None if d["pre"] is None else Standardizer.from_dict(d["pre"])
        return cls(TransformSpec(d["spec"]), pre)
