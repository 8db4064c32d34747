"""Two-step transfer learning for grouped binary risk prediction.

A source learner (L1 logistic regression or gradient boosted trees) is fit on
pooled data; each group then gets a sparse logistic adjustment fit with the
source log-odds as a fixed offset.
"""
__version__ = "0.1.0"

from .data import (Cohort, DataError, GroupedDataset, TransformSpec, load_grouped_csv,  # noqa: E402
                   stratified_kfold)
from .gbt import GbtConfig, GbtModel, fit_gbt  # noqa: E402
from .glm import GlmFit, fit_l1_logistic, fit_l1_logistic_cv, lambda_max, select_lambda_cv  # noqa: E402
from .metrics import ThresholdSpec, auprc, auroc, brier, confusion_at, ici, youden_threshold  # noqa: E402
from .simgen import SimConfig, bayes_log_odds, generate_study, scenario_grid  # noqa: E402
from .transfer import (LearnerConfig, LearnerKind, TransferModel, fit_recalibration,  # noqa: E402
                       fit_source, fit_target_adjustment, fit_transfer_model)

__all__ = [
    "Cohort", "DataError", "GroupedDataset", "TransformSpec", "load_grouped_csv",
    "stratified_kfold", "GbtConfig", "GbtModel", "fit_gbt", "GlmFit", "fit_l1_logistic",
    "fit_l1_logistic_cv", "lambda_max", "select_lambda_cv", "ThresholdSpec", "auprc", "auroc",
    "brier", "confusion_at", "ici", "youden_threshold", "SimConfig", "bayes_log_odds",
    "generate_study", "scenario_grid", "LearnerConfig", "LearnerKind", "TransferModel",
    "fit_recalibration", "fit_source", "fit_target_adjustment", "fit_transfer_model",
]
