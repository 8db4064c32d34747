"""Config-driven experiments: the simulation grid and the per-group CV protocol.

Both runners emit tidy result rows (one per metric per unit per method) and
reduce them in a fixed order, so the output files depend only on the config.
"""
from __future__ import annotations

import csv
import enum
import json
import logging
import math
import platform
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .data import Cohort, DataError, GroupedDataset, load_grouped_csv, stratified_kfold
from .glm import fit_l1_logistic, sigmoid
from .metrics import (MetricError, ThresholdSpec, auprc, auroc, brier,
                      confusion_at, ici)
from .simgen import SimConfig, bayes_log_odds, generate_study, scenario_grid
from .transfer import (LearnerConfig, LearnerKind, apply_recalibration,
                       fit_source, fit_target_adjustment, holdout_recalibration)

log = logging.getLogger(__name__)

RESULT_COLUMNS = ["scenario_or_group", "method", "replicate_or_fold", "metric", "threshold",
                  "value", "absent_flag"]
SUMMARY_COLUMNS = ["scenario_or_group", "method", "metric", "threshold", "n", "mean", "sd",
                   "absent_count"]


class Method(str, enum.Enum):
    SINGLE_FEATURE_POOLED_GLM = "single_feature_glm"
    TARGET_ONLY_GLM = "target_glm"
    SOURCE_GLM = "source_glm"
    TL_GLM = "tl_glm"
    TARGET_ONLY_GBT = "target_gbt"
    SOURCE_GBT = "source_gbt"
    TL_GBT = "tl_gbt"
    BAYES_ORACLE = "bayes_oracle"


COHORT_METHODS = (
    Method.SINGLE_FEATURE_POOLED_GLM, Method.TARGET_ONLY_GLM, Method.SOURCE_GLM, Method.TL_GLM,
    Method.TARGET_ONLY_GBT, Method.SOURCE_GBT, Method.TL_GBT,
)
SIMULATION_METHODS = (
    Method.BAYES_ORACLE, Method.SOURCE_GLM, Method.TL_GLM, Method.SOURCE_GBT, Method.TL_GBT,
)
SIM_SINGLE_FEATURE = "x3"
THRESHOLD_FREE = ("auroc", "auprc", "brier", "ici")
THRESHOLD_METRICS = ("threshold_value", "sensitivity", "specificity", "precision",
                     "balanced_accuracy", "f1")


@dataclass(frozen=True)
class ResultRow:
    scenario_or_group: str
    method: str
    replicate_or_fold: int
    metric: str
    threshold: str | None
    value: float | None

    @property
    def absent(self) -> bool:
        return self.value is None or not math.isfinite(self.value)


@dataclass
class ExperimentConfig:
    mode: str = "simulation"  # or "cohort"
    methods: list[str] | None = None
    thresholds: list[str] = field(default_factory=lambda: ["0.5", "prevalence", "youden"])
    k_folds: int = 3
    seed: int = 0
    learners: LearnerConfig = field(default_factory=LearnerConfig)
    # cohort study
    input_path: str | None = None
    label_column: str = "label"
    group_column: str = "group"
    single_feature: str | None = None
    min_positives: int | None = None
    recalibration: str = "holdout"  # or "none"
    holdout_frac: float = 0.2
    # simulation
    scenarios: list[SimConfig] | None = None
    replicates: int | None = None
    jobs: int = 1

    def __post_init__(self):
        if self.mode not in ("simulation", "cohort"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.recalibration not in ("holdout", "none"):
            raise ValueError("recalibration must be 'holdout' or 'none'")
        methods = self.resolved_methods()
        if not methods:
            raise ValueError("at least one method is required")
        if self.mode == "cohort" and Method.BAYES_ORACLE in methods:
            raise ValueError("bayes_oracle is only available in simulation mode")
        if self.k_folds < 2:
            raise ValueError("k_folds must be >= 2")

    def resolved_methods(self) -> list[Method]:
        if self.methods is None:
            return list(SIMULATION_METHODS if self.mode == "simulation" else COHORT_METHODS)
        return [Method(m) for m in self.methods]

    def threshold_specs(self) -> list[ThresholdSpec]:
        return [ThresholdSpec.parse(t) for t in self.thresholds]

    def resolved_scenarios(self) -> list[SimConfig]:
        scen = self.scenarios if self.scenarios is not None else scenario_grid()
        out = []
        for s in scen:
            s = replace(s, seed=self.seed)
            if self.replicates is not None:
                s = replace(s, replicates=self.replicates)
            out.append(s)
        return out

    def to_dict(self) -> dict:
        d = {
            "mode": self.mode,
            "methods": [m.value for m in self.resolved_methods()],
            "thresholds": list(self.thresholds),
            "k_folds": self.k_folds,
            "seed": self.seed,
            "learners": self.learners.to_dict(),
            "recalibration": self.recalibration,
            "holdout_frac": self.holdout_frac,
        }
        if self.mode == "cohort":
            d.update(input_path=self.input_path, label_column=self.label_column,
                     group_column=self.group_column, single_feature=self.single_feature,
                     min_positives=self.min_positives)
        else:
            d["scenarios"] = [s.to_dict() for s in self.resolved_scenarios()]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        if "learners" in d:
            d["learners"] = LearnerConfig.from_dict(d["learners"])
        if d.get("scenarios") is not None:
            d["scenarios"] = [SimConfig.from_dict(s) for s in d["scenarios"]]
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


# ------------------------------------------------------------------ simulation


def _simulation_unit(args) -> list[ResultRow]:
    scfg, rep, methods, learners = args
    study = generate_study(scfg, rep)
    pool = study.training_pool()
    Xe, ye = study.test.features, study.test.labels
    scores: dict[Method, np.ndarray] = {}
    for kind, src_m, tl_m in ((LearnerKind.GLM, Method.SOURCE_GLM, Method.TL_GLM),
                              (LearnerKind.GBT, Method.SOURCE_GBT, Method.TL_GBT)):
        if src_m not in methods and tl_m not in methods:
            continue
        src = fit_source(pool, kind, learners)
        eta = src.log_odds(Xe)
        scores[src_m] = eta
        if tl_m in methods:
            adj = fit_target_adjustment(src, study.target, config=learners)
            scores[tl_m] = eta + adj.delta(Xe)
    if Method.BAYES_ORACLE in methods:
        scores[Method.BAYES_ORACLE] = bayes_log_odds(Xe, scfg)
    rows = []
    for m in methods:
        if m not in scores:
            continue
        rows.append(ResultRow(scfg.name, m.value, rep, "auroc", None, auroc(scores[m], ye)))
        rows.append(ResultRow(scfg.name, m.value, rep, "auprc", None, auprc(scores[m], ye)))
    return rows


def _map(fn, units, jobs: int):
    if jobs <= 1:
        return [fn(u) for u in units]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, units))


def run_simulation_study(config: ExperimentConfig) -> list[ResultRow]:
    """AUROC/AUPRC on an independent target test set, per scenario x replicate."""
    methods = config.resolved_methods()
    invalid = set(methods) - set(SIMULATION_METHODS)
    if invalid:
        raise ValueError(f"methods not available in simulation mode: {sorted(m.value for m in invalid)}")
    units = [(s, r, methods, config.learners)
             for s in config.resolved_scenarios() for r in range(s.replicates)]
    rows = []
    for (s, r, *_), unit_rows in zip(units, _map(_simulation_unit_safe, units, config.jobs)):
        if isinstance(unit_rows, Exception):
            raise RuntimeError(f"scenario {s.name}: replicate {r} failed: {unit_rows}") from unit_rows
        rows.extend(unit_rows)
    return rows


def _simulation_unit_safe(args):
    try:
        return _simulation_unit(args)
    except Exception as exc:  # reported with the replicate index by the caller
        return exc


# ------------------------------------------------------------------ cohort study


@dataclass(frozen=True)
class SplitIds:
    """Row ids of one (group, fold) unit, for leakage auditing."""

    source_train: np.ndarray
    target_train: np.ndarray
    test: np.ndarray


def cohort_split(dataset: GroupedDataset, group_id: str, fold_index: np.ndarray,
                 fold: int) -> tuple[Cohort, Cohort, Cohort]:
    """(source training pool, target training rows, test rows) for one fold.

    The source pool is every row of the dataset except the group's test fold.
    """
    target = dataset[group_id]
    test_mask = fold_index == fold
    test = target.subset(np.flatnonzero(test_mask))
    target_train = target.subset(np.flatnonzero(~test_mask))
    parts = [c if c.group_id != group_id else target_train for c in dataset.cohorts]
    pool = GroupedDataset(parts).pooled("source")
    overlap = np.intersect1d(test.row_ids, pool.row_ids).size + \
        np.intersect1d(test.row_ids, target_train.row_ids).size
    if overlap:
        raise AssertionError(f"group {group_id!r} fold {fold}: test rows leaked into training")
    return pool, target_train, test


def split_ids(pool: Cohort, target_train: Cohort, test: Cohort) -> SplitIds:
    return SplitIds(pool.row_ids.copy(), target_train.row_ids.copy(), test.row_ids.copy())


def _cohort_unit(args) -> list[ResultRow]:
    dataset, group_id, fold_index, fold, config, label = args
    methods = config.resolved_methods()
    learners = config.learners
    pool, train, test = cohort_split(dataset, group_id, fold_index, fold)
    recal_on = config.recalibration == "holdout"
    seed = config.seed
    frac = config.holdout_frac

    def recal(fit_predict, cohort):
        return holdout_recalibration(fit_predict, cohort, frac=frac, seed=seed) if recal_on else None

    # method -> (probabilities on training rows, probabilities on test rows)
    preds: dict[Method, tuple[np.ndarray, np.ndarray]] = {}

    for kind, src_m, tl_m, tgt_m in (
        (LearnerKind.GLM, Method.SOURCE_GLM, Method.TL_GLM, Method.TARGET_ONLY_GLM),
        (LearnerKind.GBT, Method.SOURCE_GBT, Method.TL_GBT, Method.TARGET_ONLY_GBT),
    ):
        if src_m in methods or tl_m in methods:
            src = fit_source(pool, kind, learners)
            if src_m in methods:
                r = recal(lambda tr, X, k=kind: fit_source(tr, k, learners).predict_proba(X), pool)
                preds[src_m] = (apply_recalibration(r, src.predict_proba(train.features)),
                                apply_recalibration(r, src.predict_proba(test.features)))
            if tl_m in methods:
                adj = fit_target_adjustment(src, train, config=learners)

                def tl_fp(tr, X, k=kind):
                    # the holdout rows sit in the source pool too; refit without them
                    held = np.setdiff1d(train.row_ids, tr.row_ids)
                    keep = np.flatnonzero(~np.isin(pool.row_ids, held))
                    s = fit_source(pool.subset(keep), k, learners)
                    a = fit_target_adjustment(s, tr, config=learners)
                    return sigmoid(s.log_odds(X) + a.delta(X))
                r = recal(tl_fp, train)
                preds[tl_m] = tuple(
                    apply_recalibration(r, sigmoid(src.log_odds(c.features) + adj.delta(c.features)))
                    for c in (train, test))
        if tgt_m in methods:
            tgt = fit_source(train, kind, learners)
            r = recal(lambda tr, X, k=kind: fit_source(tr, k, learners).predict_proba(X), train)
            preds[tgt_m] = (apply_recalibration(r, tgt.predict_proba(train.features)),
                            apply_recalibration(r, tgt.predict_proba(test.features)))

    if Method.SINGLE_FEATURE_POOLED_GLM in methods:
        names = dataset.feature_names
        col = names.index(config.single_feature) if config.single_feature else 0
        fit = fit_l1_logistic(pool.features[:, [col]], pool.labels, 0.0)
        preds[Method.SINGLE_FEATURE_POOLED_GLM] = (
            fit.predict_proba(train.features[:, [col]]), fit.predict_proba(test.features[:, [col]]))

    rows: list[ResultRow] = []
    specs = config.threshold_specs()
    for m in methods:
        if m not in preds:
            continue
        p_train, p_test = preds[m]
        rows.extend(_metric_rows(label, m.value, fold, p_train, train.labels, p_test, test.labels,
                                 specs))
    return rows


def _metric_rows(label, method, fold, p_train, y_train, p_test, y_test, specs):
    rows = []

    def add(metric, threshold, value):
        rows.append(ResultRow(label, method, fold, metric, threshold,
                              None if value is None else float(value)))

    add("auroc", None, auroc(p_test, y_test))
    add("auprc", None, auprc(p_test, y_test))
    add("brier", None, brier(p_test, y_test))
    try:
        add("ici", None, ici(p_test, y_test))
    except MetricError:
        add("ici", None, None)
    for spec in specs:
        t = spec.resolve(p_train, y_train)
        tm = confusion_at(p_test, y_test, t)
        add("threshold_value", spec.label, t)
        add("sensitivity", spec.label, tm.sensitivity)
        add("specificity", spec.label, tm.specificity)
        add("precision", spec.label, tm.precision)
        add("balanced_accuracy", spec.label, tm.balanced_accuracy)
        add("f1", spec.label, tm.f1)
    return rows


def eligible_groups(dataset: GroupedDataset, k_folds: int, min_positives: int | None = None):
    """(eligible group ids, {skipped group: reason})."""
    cutoff = max(k_folds, min_positives or 0)
    ok, skipped = [], {}
    for c in dataset.cohorts:
        n_pos = int(c.labels.sum())
        n_neg = c.m - n_pos
        if n_pos < cutoff:
            skipped[c.group_id] = f"{n_pos} positive cases < {cutoff}"
        elif n_neg < k_folds:
            skipped[c.group_id] = f"{n_neg} negative cases < {k_folds}"
        else:
            ok.append(c.group_id)
    return ok, skipped


def run_cohort_study(config: ExperimentConfig, dataset: GroupedDataset | None = None,
                     label_prefix: str = "", groups=None) -> list[ResultRow]:
    """Stratified k-fold protocol within each group.

    Target-only and transfer models train on the group's other folds; source
    and single-feature models train on every row except the group's test fold.
    Thresholds are resolved on the group's training rows. ``groups`` limits
    which groups are evaluated; every group still feeds the source pool.
    """
    if dataset is None:
        if not config.input_path:
            raise ValueError("cohort mode needs input_path")
        dataset = load_grouped_csv(config.input_path, config.label_column, config.group_column)
    if config.single_feature and config.single_feature not in dataset.feature_names:
        raise DataError(f"single_feature {config.single_feature!r} is not a feature column")
    ok, skipped = eligible_groups(dataset, config.k_folds, config.min_positives)
    if groups is None:
        groups = ok
    else:
        unknown = set(groups) - set(dataset.group_ids)
        if unknown:
            raise DataError(f"unknown groups: {sorted(unknown)}")
        skipped = {g: w for g, w in skipped.items() if g in groups}
        groups = [g for g in groups if g in ok]
    for g, why in skipped.items():
        log.warning("skipping group %r: %s", g, why)
    units = []
    for g in groups:
        folds = stratified_kfold(dataset[g], config.k_folds, config.seed)
        for f in range(config.k_folds):
            units.append((dataset, g, folds.fold_index, f, config, label_prefix + g))
    rows = []
    for unit_rows in _map(_cohort_unit, units, config.jobs):
        rows.extend(unit_rows)
    return rows


def simulation_cohort_study(config: ExperimentConfig, scenario: SimConfig,
                            replicate: int = 0) -> list[ResultRow]:
    """Run the cohort protocol on one simulated source/target dataset.

    Only the target-domain group is evaluated; the source group serves as
    the rest of the pool, the role non-target diagnoses play in real data.
    The single-feature baseline defaults to a coordinate whose effect is
    shared by both domains, the analogue of a validated severity score.
    """
    study = generate_study(replace(scenario, seed=config.seed), replicate)
    if config.single_feature is None:
        config = replace(config, single_feature=SIM_SINGLE_FEATURE)
    return run_cohort_study(config, study.as_grouped(), label_prefix=f"{scenario.name}/",
                            groups=[study.target.group_id])


# ------------------------------------------------------------------ output


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def write_results(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_COLUMNS)
        for r in rows:
            w.writerow([r.scenario_or_group, r.method, r.replicate_or_fold, r.metric,
                        r.threshold or "", "" if r.absent else _fmt(r.value), int(r.absent)])


def read_results(path) -> list[ResultRow]:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(RESULT_COLUMNS) - set(reader.fieldnames or [])
        if missing:
            raise DataError(f"{path}: missing result columns {sorted(missing)}")
        for rec in reader:
            absent = rec["absent_flag"] == "1"
            rows.append(ResultRow(rec["scenario_or_group"], rec["method"],
                                  int(rec["replicate_or_fold"]), rec["metric"],
                                  rec["threshold"] or None,
                                  None if absent else float(rec["value"])))
    return rows


@dataclass(frozen=True)
class SummaryRow:
    scenario_or_group: str
    method: str
    metric: str
    threshold: str | None
    n: int
    mean: float | None
    sd: float | None
    absent_count: int


def summarize(rows) -> list[SummaryRow]:
    """Mean and sample SD per (unit label, method, metric, threshold) cell.

    Absent values are excluded and counted. Output is sorted, so the result
    does not depend on input order.
    """
    cells: dict[tuple, list] = {}
    for r in rows:
        key = (r.scenario_or_group, r.method, r.metric, r.threshold or "")
        cells.setdefault(key, []).append(r)
    out = []
    for key in sorted(cells):
        rs = sorted(cells[key], key=lambda r: r.replicate_or_fold)
        vals = np.array([r.value for r in rs if not r.absent], dtype=float)
        absent = len(rs) - vals.shape[0]
        mean = float(vals.mean()) if vals.size else None
        sd = float(vals.std(ddof=1)) if vals.size >= 2 else None
        out.append(SummaryRow(key[0], key[1], key[2], key[3] or None, int(vals.size), mean, sd,
                              absent))
    return out


def write_summary(summary, path_or_stream) -> None:
    if hasattr(path_or_stream, "write"):
        _write_summary(summary, path_or_stream)
        return
    with open(path_or_stream, "w", newline="", encoding="utf-8") as fh:
        _write_summary(summary, fh)


def _write_summary(summary, fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for s in summary:
        w.writerow([s.scenario_or_group, s.method, s.metric, s.threshold or "", s.n,
                    _fmt(s.mean), _fmt(s.sd), s.absent_count])


def manifest(config: ExperimentConfig, n_rows: int) -> dict:
    import numba
    import scipy
    import statsmodels
    return {
        "tool": "tlrisk",
        "tool_version": __version__,
        "config": config.to_dict(),
        "seed": config.seed,
        "n_result_rows": n_rows,
        "versions": {
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "numba": numba.__version__,
            "statsmodels": statsmodels.__version__,
        },
    }


def write_outputs(config: ExperimentConfig, rows, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_results(rows, out / "results.csv")
    write_summary(summarize(rows), out / "summary.csv")
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest(config, len(rows)), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out


def run(config: ExperimentConfig) -> list[ResultRow]:
    if config.mode == "simulation":
        return run_simulation_study(config)
    return run_cohort_study(config)
