"""Split conformal, CV+ and jackknife+-after-bootstrap calibration and prediction.

Calibration states keep raw conformity scores, so the miscoverage level
``alpha`` is chosen at prediction time.  Quantile indices that fall outside
``1..n`` resolve to ``-inf``/``+inf`` (unbounded intervals, full sets) instead
of being clamped.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Sequence

import numpy as np

from . import errors
from ._rng import Stream, derive_seed, uniforms
from .forest import (
    Dataset,
    ForestModel,
    ForestParams,
    Task,
    fit_forest,
    oob_predict,
    oob_predict_train,
    oob_tree_sets,
    predict_forest,
)
from .kernels import cross_giqs_kernel, pvalues_from_giqs, sets_from_pvalues, split_sets_kernel
from .scores import RapsParams, calibration_scores, true_label_ranks

logger = logging.getLogger(__name__)

LAMBDA_GRID = (0.001, 0.01, 0.1, 0.2, 0.5, 1.0)

# Index arithmetic treats values within this distance of an integer as that
# integer, so decimal alphas such as 0.1 give the textbook index.
_INDEX_TOL = 1e-9

# zero-tree draws are redrawn; give up when the success probability is hopeless
_MAX_REDRAWS = 1000


class ScoreKind(str, Enum):
    RESIDUAL = "residual"
    APS = "aps"
    RAPS = "raps"


def default_score_kind(task: Task, raps: RapsParams | None) -> ScoreKind:
    if Task(task) is Task.REGRESSION:
        return ScoreKind.RESIDUAL
    if raps is None or (raps.k_star == 0 and raps.lambda_star == 0.0):
        return ScoreKind.APS
    return ScoreKind.RAPS


# ---------------------------------------------------------------------------
# quantiles and constants
# ---------------------------------------------------------------------------


def _check_alpha(alpha: float) -> None:
    if not 0.0 < alpha < 1.0:
        raise errors.AlphaOutOfRange(f"alpha={alpha} outside (0, 1)")


def upper_index(n: int, alpha: float) -> int:
    """1-based index ceil((1 - alpha)(n + 1))."""
    return math.ceil((1.0 - alpha) * (n + 1) - _INDEX_TOL)


def lower_index(n: int, alpha: float) -> int:
    """1-based index floor(alpha (n + 1))."""
    return math.floor(alpha * (n + 1) + _INDEX_TOL)


def upper_quantile(values, alpha: float) -> float:
    """The ceil((1 - alpha)(n + 1))-th smallest value, ``+inf`` past ``n``."""
    _check_alpha(alpha)
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise errors.EmptyInput("no values")
    k = upper_index(v.size, alpha)
    if k > v.size:
        return math.inf
    return float(np.partition(v, k - 1)[k - 1])


def lower_quantile(values, alpha: float) -> float:
    """The floor(alpha (n + 1))-th smallest value, ``-inf`` at index 0."""
    _check_alpha(alpha)
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise errors.EmptyInput("no values")
    k = lower_index(v.size, alpha)
    if k < 1:
        return -math.inf
    return float(np.partition(v, k - 1)[k - 1])


def _upper_quantile_cols(a: np.ndarray, alpha: float) -> np.ndarray:
    n = a.shape[0]
    k = upper_index(n, alpha)
    if k > n:
        return np.full(a.shape[1:], np.inf)
    return np.partition(a, k - 1, axis=0)[k - 1]


def _lower_quantile_cols(a: np.ndarray, alpha: float) -> np.ndarray:
    n = a.shape[0]
    k = lower_index(n, alpha)
    if k < 1:
        return np.full(a.shape[1:], -np.inf)
    return np.partition(a, k - 1, axis=0)[k - 1]


def epsilon_cv_bound(K: int, n: int) -> float:
    """Slack term of the CV+ coverage guarantee ``1 - 2 alpha - eps``."""
    if not 2 <= K <= n:
        raise errors.InvalidKn(f"need 2 <= K <= n, got K={K}, n={n}")
    return min(2.0 * (1.0 - 1.0 / K) / (n / K + 1.0), (1.0 - K / n) / (K + 1.0))


def sample_num_bootstraps(B_tilde: int, n: int, m: int, seed: int) -> int:
    """Draw the tree count ``B ~ Binomial(B_tilde, (1 - 1/(n+1))^m)``, redrawing zeros."""
    if B_tilde < 1:
        raise errors.ValidationError("B_tilde must be >= 1")
    p = (1.0 - 1.0 / (n + 1)) ** m
    rng = np.random.default_rng(int(seed))
    for _ in range(_MAX_REDRAWS):
        B = int(rng.binomial(B_tilde, p))
        if B >= 1:
            return B
        logger.info("binomial draw gave B=0; redrawing")
    raise errors.ValidationError(
        f"Binomial({B_tilde}, {p:.3g}) returned 0 in {_MAX_REDRAWS} draws; increase B_tilde")


# ---------------------------------------------------------------------------
# calibration states and outputs
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class SplitCalibration:
    sorted_scores: np.ndarray
    score_kind: ScoreKind
    raps: RapsParams
    task: Task
    n_classes: int = 0

    def tau_for(self, alpha: float) -> float:
        return upper_quantile(self.sorted_scores, alpha)


@dataclass(eq=False)
class CvCalibration:
    fold_models: list[ForestModel]
    fold_of: np.ndarray
    scores: np.ndarray
    score_kind: ScoreKind
    raps: RapsParams
    task: Task
    n_classes: int = 0
    model_seed: int = 0

    @property
    def K(self) -> int:
        return len(self.fold_models)

    @property
    def active(self) -> np.ndarray:
        return np.arange(self.fold_of.shape[0])


@dataclass(eq=False)
class JabCalibration:
    model: ForestModel
    scores: np.ndarray
    active: np.ndarray
    score_kind: ScoreKind
    raps: RapsParams
    task: Task
    n_classes: int = 0
    B_tilde: int = 0

    @property
    def B(self) -> int:
        return self.model.n_trees

    @property
    def oob_sets(self) -> list[np.ndarray]:
        return oob_tree_sets(self.model)[0]

    @property
    def n_inactive(self) -> int:
        return self.model.n_train - self.active.shape[0]


CrossCalibration = CvCalibration | JabCalibration


@dataclass(eq=False)
class PredictionIntervals:
    lo: np.ndarray
    hi: np.ndarray
    prediction: np.ndarray

    def __len__(self) -> int:
        return self.lo.shape[0]

    def as_array(self) -> np.ndarray:
        return np.column_stack([self.lo, self.hi])


@dataclass(eq=False)
class PredictionSets:
    """Boolean membership matrix ``(n_test, C)`` plus the argmax point prediction."""

    sets: np.ndarray
    prediction: np.ndarray

    def __len__(self) -> int:
        return self.sets.shape[0]

    def classes(self, j: int) -> np.ndarray:
        return np.flatnonzero(self.sets[j])

    def as_lists(self) -> list[list[int]]:
        return [self.classes(j).tolist() for j in range(len(self))]


# ---------------------------------------------------------------------------
# calibration
# ---------------------------------------------------------------------------


def _resolve_kind(task: Task, raps: RapsParams | None, score_kind) -> ScoreKind:
    if score_kind is None:
        return default_score_kind(task, raps)
    kind = ScoreKind(score_kind)
    if (kind is ScoreKind.RESIDUAL) != (Task(task) is Task.REGRESSION):
        raise errors.TaskMismatch(f"score kind {kind.value} does not fit a {Task(task).value} task")
    return kind


def _scores(task: Task, predictions: np.ndarray, y: np.ndarray, u: np.ndarray | None,
            raps: RapsParams, kind: ScoreKind) -> np.ndarray:
    if task is Task.REGRESSION:
        return np.abs(y - predictions)
    return calibration_scores(predictions, y, u, raps, regularized=kind is ScoreKind.RAPS)


def _calib_u(seed: int, raps: RapsParams, task: Task, n: int) -> np.ndarray | None:
    if task is Task.REGRESSION or not raps.randomized:
        return None
    return uniforms(seed, Stream.CALIB_U, n)


def calibrate_split(train: Dataset, calib: Dataset, params: ForestParams | None = None,
                    raps: RapsParams | None = None, seed: int = 0, score_kind=None,
                    threads: int | None = None) -> tuple[ForestModel, SplitCalibration]:
    """Fit one forest on ``train`` and score the held-out ``calib`` rows."""
    if train.task != calib.task or train.n_features != calib.n_features or (
            train.n_classes != calib.n_classes):
        raise errors.SchemaMismatch("training and calibration sets differ in schema")
    model = fit_forest(train, params, derive_seed(seed, Stream.MODEL), threads)
    return model, rescore_split(model, calib, raps, seed, score_kind, threads)


def rescore_split(model: ForestModel, calib: Dataset, raps: RapsParams | None = None, seed: int = 0,
                  score_kind=None, threads: int | None = None) -> SplitCalibration:
    """Split calibration scores of ``calib`` under an already fitted ``model``."""
    if model.task != calib.task or model.n_features != calib.n_features:
        raise errors.SchemaMismatch("calibration set does not match the model")
    raps = raps or RapsParams()
    kind = _resolve_kind(calib.task, raps, score_kind)
    pred = predict_forest(model, calib.features, threads=threads)
    u = _calib_u(seed, raps, calib.task, calib.n_samples)
    scores = _scores(calib.task, pred, calib.targets, u, raps, kind)
    return SplitCalibration(np.sort(scores), kind, raps, calib.task, calib.n_classes)


def make_folds(n: int, K: int, seed: int) -> np.ndarray:
    """Balanced fold labels after a seeded shuffle (sizes differ by at most one)."""
    if not 2 <= K <= n:
        raise errors.KOutOfRange(f"need 2 <= K <= n, got K={K}, n={n}")
    perm = np.random.default_rng(derive_seed(seed, Stream.FOLDS)).permutation(n)
    fold_of = np.empty(n, dtype=np.int64)
    for k, members in enumerate(np.array_split(perm, K)):
        fold_of[members] = k
    return fold_of


def calibrate_cv(train: Dataset, K: int, params: ForestParams | None = None,
                 raps: RapsParams | None = None, seed: int = 0, score_kind=None,
                 threads: int | None = None) -> CvCalibration:
    """Fit K leave-one-fold-out forests and score each sample with the model that skipped it.

    Every fold forest uses the same seed, so fold ``k``'s model is exactly
    ``fit_forest(train minus fold k, params, model_seed)``.
    """
    fold_of = make_folds(train.n_samples, K, seed)
    model_seed = derive_seed(seed, Stream.MODEL)
    models = [
        fit_forest(train.subset(np.flatnonzero(fold_of != k)), params, model_seed, threads)
        for k in range(K)
    ]
    shell = CvCalibration(models, fold_of, np.empty(0), ScoreKind.RESIDUAL, RapsParams(), train.task,
                          train.n_classes, model_seed)
    return rescore_cross(shell, train, raps, seed, score_kind, threads)


def calibrate_jab(train: Dataset, B_tilde: int, m: int | None = None, resample_B: bool = True,
                  params: ForestParams | None = None, raps: RapsParams | None = None, seed: int = 0,
                  score_kind=None, threads: int | None = None) -> JabCalibration:
    """Fit one bagged forest and score each sample with its out-of-bag trees.

    With ``resample_B`` the tree count is drawn by :func:`sample_num_bootstraps`
    with ``B_tilde`` as the trial count.  Samples that landed in every bootstrap
    have no out-of-bag trees; they are dropped from calibration with a warning.
    """
    n = train.n_samples
    params = params or ForestParams()
    m = params.resolved_bootstrap_size(n) if m is None else int(m)
    if m < 1:
        raise errors.ValidationError("bootstrap size m must be >= 1")
    if B_tilde < 1:
        raise errors.ValidationError("B_tilde must be >= 1")
    B = sample_num_bootstraps(B_tilde, n, m, derive_seed(seed, Stream.N_BOOTSTRAPS)) if resample_B else B_tilde
    fp = replace(params, n_estimators=B, bootstrap_size=m)
    model = fit_forest(train, fp, derive_seed(seed, Stream.MODEL), threads)
    _, empty = oob_tree_sets(model)
    active = np.flatnonzero(~empty)
    if active.size == 0:
        raise errors.AllSamplesInBag("every sample is in-bag for every tree")
    if active.size < n:
        logger.warning("%d of %d samples have no out-of-bag trees and are excluded", n - active.size, n)
    shell = JabCalibration(model, np.empty(0), active, ScoreKind.RESIDUAL, RapsParams(), train.task,
                           train.n_classes, B_tilde)
    return rescore_cross(shell, train, raps, seed, score_kind, threads)


def rescore_cross(cal: CrossCalibration, train: Dataset, raps: RapsParams | None = None, seed: int = 0,
                  score_kind=None, threads: int | None = None) -> CrossCalibration:
    """Recompute leave-out conformity scores of ``train`` under new RAPS settings.

    The fitted models are reused; ``train`` must be the data they were fitted on.
    """
    raps = raps or RapsParams()
    kind = _resolve_kind(train.task, raps, score_kind)
    u_all = _calib_u(seed, raps, train.task, train.n_samples)
    if isinstance(cal, CvCalibration):
        scores = np.empty(train.n_samples, dtype=np.float64)
        for k, model in enumerate(cal.fold_models):
            held = np.flatnonzero(cal.fold_of == k)
            pred = predict_forest(model, train.features[held], threads=threads)
            u = None if u_all is None else u_all[held]
            scores[held] = _scores(train.task, pred, train.targets[held], u, raps, kind)
        return replace(cal, scores=scores, score_kind=kind, raps=raps)
    pred = oob_predict_train(cal.model, train.features, cal.active, threads)
    u = None if u_all is None else u_all[cal.active]
    scores = _scores(train.task, pred, train.targets[cal.active], u, raps, kind)
    return replace(cal, scores=scores, score_kind=kind, raps=raps)


# ---------------------------------------------------------------------------
# prediction
# ---------------------------------------------------------------------------


def _require(task: Task, expected: Task) -> None:
    if task is not expected:
        raise errors.TaskMismatch(f"calibration is for {task.value}, not {expected.value}")


def predict_interval_split(model: ForestModel, cal: SplitCalibration, X, alpha: float,
                           threads: int | None = None) -> PredictionIntervals:
    _require(cal.task, Task.REGRESSION)
    tau = cal.tau_for(alpha)
    f = predict_forest(model, X, threads=threads)
    return PredictionIntervals(f - tau, f + tau, f)


def leave_out_predictions(cal: CrossCalibration, X, threads: int | None = None) -> np.ndarray:
    """Prediction of every active sample's leave-out model on ``X``.

    Shape ``(n_active, n_test)`` for regression, ``(n_active, n_test, C)`` for
    classification.
    """
    if isinstance(cal, CvCalibration):
        per_fold = np.stack([predict_forest(m, X, threads=threads) for m in cal.fold_models])
        return per_fold[cal.fold_of]
    return oob_predict(cal.model, X, cal.active, threads)


def point_prediction(cal: CrossCalibration, X, threads: int | None = None) -> np.ndarray:
    """Full-model prediction: mean over fold models (CV+) or the whole forest (J+ab)."""
    if isinstance(cal, CvCalibration):
        return np.mean([predict_forest(m, X, threads=threads) for m in cal.fold_models], axis=0)
    return predict_forest(cal.model, X, threads=threads)


def intervals_from_leave_out(f_minus: np.ndarray, residuals: np.ndarray, alpha: float):
    _check_alpha(alpha)
    r = residuals[:, None]
    return _lower_quantile_cols(f_minus - r, alpha), _upper_quantile_cols(f_minus + r, alpha)


def predict_interval_cross(cal: CrossCalibration, X, alpha: float,
                           threads: int | None = None) -> PredictionIntervals:
    _require(cal.task, Task.REGRESSION)
    if cal.scores.size == 0:
        raise errors.NoActiveSamples("calibration has no active samples")
    lo, hi = intervals_from_leave_out(leave_out_predictions(cal, X, threads), cal.scores, alpha)
    return PredictionIntervals(lo, hi, point_prediction(cal, X, threads))


def draw_test_uniforms(cal, n_test: int, seed: int) -> np.ndarray | None:
    if not cal.raps.randomized:
        return None
    return uniforms(seed, Stream.TEST_U, n_test)


def predict_set_split(model: ForestModel, cal: SplitCalibration, X, alpha: float, seed: int = 0,
                      threads: int | None = None) -> PredictionSets:
    _require(cal.task, Task.CLASSIFICATION)
    probs = predict_forest(model, X, threads=threads)
    u = draw_test_uniforms(cal, probs.shape[0], seed)
    sets = split_sets_kernel(probs, cal.tau_for(alpha), cal.raps, u, threads,
                             regularized=cal.score_kind is ScoreKind.RAPS)
    return PredictionSets(sets, np.argmax(probs, axis=1))


def cross_pvalues(cal: CrossCalibration, X, seed: int = 0, threads: int | None = None,
                  chunk_size: int | None = None) -> np.ndarray:
    """Conformal p-value of every class at every test point, ``(n_test, C)``.

    ``chunk_size`` bounds the number of test points scored at once; the result
    does not depend on it.
    """
    _require(cal.task, Task.CLASSIFICATION)
    if cal.scores.size == 0:
        raise errors.NoActiveSamples("calibration has no active samples")
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    n_test = X.shape[0]
    u = draw_test_uniforms(cal, n_test, seed)
    step = n_test if not chunk_size else max(1, int(chunk_size))
    out = np.empty((n_test, cal.n_classes), dtype=np.float64)
    for start in range(0, n_test, step):
        stop = min(start + step, n_test)
        oob = leave_out_predictions(cal, X[start:stop], threads)
        giqs = cross_giqs_kernel(oob, cal.raps, None if u is None else u[start:stop], threads,
                                 regularized=cal.score_kind is ScoreKind.RAPS)
        out[start:stop] = pvalues_from_giqs(cal.scores, giqs, threads)
    return out


def predict_set_cross(cal: CrossCalibration, X, alpha: float, seed: int = 0,
                      threads: int | None = None, chunk_size: int | None = None) -> PredictionSets:
    _check_alpha(alpha)
    p = cross_pvalues(cal, X, seed, threads, chunk_size)
    sets = sets_from_pvalues(p, alpha, cal.raps.allow_empty_sets)
    return PredictionSets(sets, np.argmax(point_prediction(cal, X, threads), axis=1))


# ---------------------------------------------------------------------------
# k / lambda search
# ---------------------------------------------------------------------------


def search_k_and_lambda_from_probs(probs, y, alpha: float, seed: int = 0, randomized: bool = True,
                                   allow_empty_sets: bool = True, threads: int | None = None,
                                   grid: Sequence[float] = LAMBDA_GRID) -> RapsParams:
    """Pick ``k*`` from the true-label rank quantile and ``lambda*`` by smallest tuning sets.

    For each ``lambda`` in ``grid`` the tuning rows are conformalized on
    themselves at level ``alpha`` and the average set size recorded; the first
    minimum wins, so ties go to the smaller ``lambda``.
    """
    probs = np.asarray(probs, dtype=np.float64)
    y = np.asarray(y)
    n, C = probs.shape
    if n < 10:
        raise errors.TuningTooSmall(f"tuning set has {n} rows, need at least 10")
    q = upper_quantile(true_label_ranks(probs, y), alpha)
    k_star = C if math.isinf(q) else int(q)
    k_star = min(max(k_star, 1), C)
    u = uniforms(seed, Stream.TUNING_U, n) if randomized else None
    best_lam, best_size = None, math.inf
    for lam in grid:
        params = RapsParams(k_star, float(lam), randomized, allow_empty_sets)
        tau = upper_quantile(calibration_scores(probs, y, u, params, regularized=True), alpha)
        size = float(split_sets_kernel(probs, tau, params, u, threads).sum(axis=1).mean())
        logger.debug("lambda=%g k=%d tuning size %.4f", lam, k_star, size)
        if size < best_size:
            best_lam, best_size = float(lam), size
    return RapsParams(k_star, best_lam, randomized, allow_empty_sets)


def search_k_and_lambda(tuning: Dataset, models: ForestModel | Sequence[ForestModel], alpha: float,
                        seed: int = 0, randomized: bool = True, allow_empty_sets: bool = True,
                        threads: int | None = None) -> RapsParams:
    """RAPS parameter search on a tuning set disjoint from the calibration data.

    ``models`` may be one forest or a list whose probabilities are averaged
    (the CV+ fold models).
    """
    _require(tuning.task, Task.CLASSIFICATION)
    if isinstance(models, ForestModel):
        models = [models]
    probs = np.mean([predict_forest(m, tuning.features, threads=threads) for m in models], axis=0)
    return search_k_and_lambda_from_probs(probs, tuning.targets, alpha, seed, randomized,
                                          allow_empty_sets, threads)
