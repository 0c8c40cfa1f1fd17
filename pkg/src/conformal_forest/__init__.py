"""Conformal prediction sets and intervals built on a parallel random forest."""

from .datasets import load_csv, make_blobs, make_linear
from .engine import (
    CvCalibration,
    JabCalibration,
    PredictionIntervals,
    PredictionSets,
    ScoreKind,
    SplitCalibration,
    calibrate_cv,
    calibrate_jab,
    calibrate_split,
    epsilon_cv_bound,
    lower_quantile,
    predict_interval_cross,
    predict_interval_split,
    predict_set_cross,
    predict_set_split,
    sample_num_bootstraps,
    search_k_and_lambda,
    upper_quantile,
)
from .errors import ValidationError
from .estimator import ConformalForest, RunConfig
from .forest import Dataset, ForestModel, ForestParams, Task, fit_forest, predict_forest
from .kernels import cross_giqs_kernel, split_sets_kernel
from .metrics import (
    EvalReport,
    average_interval_length,
    average_set_size,
    classification_coverage,
    evaluate_intervals,
    evaluate_sets,
    regression_coverage,
)
from .scores import RapsParams

__version__ = "0.1.0"

__all__ = [
    "ConformalForest",
    "CvCalibration",
    "Dataset",
    "EvalReport",
    "ForestModel",
    "ForestParams",
    "JabCalibration",
    "PredictionIntervals",
    "PredictionSets",
    "RapsParams",
    "RunConfig",
    "ScoreKind",
    "SplitCalibration",
    "Task",
    "ValidationError",
    "average_interval_length",
    "average_set_size",
    "calibrate_cv",
    "calibrate_jab",
    "calibrate_split",
    "classification_coverage",
    "cross_giqs_kernel",
    "epsilon_cv_bound",
    "evaluate_intervals",
    "evaluate_sets",
    "fit_forest",
    "load_csv",
    "lower_quantile",
    "make_blobs",
    "make_linear",
    "predict_forest",
    "predict_interval_cross",
    "predict_interval_split",
    "predict_set_cross",
    "predict_set_split",
    "regression_coverage",
    "sample_num_bootstraps",
    "search_k_and_lambda",
    "split_sets_kernel",
    "upper_quantile",
]
