"""End-to-end conformal forest: configuration, fitting, prediction and bundles.

A bundle is a single ``.npz`` archive.  Its ``bundle_meta`` entry is a JSON
document::

    {"format": "conformal-forest-bundle", "version": 1,
     "config": {...RunConfig...}, "manifest": {...}, "schema": {...},
     "calibration": {"method": "split" | "cv" | "bootstrap", "score_kind": ...,
                     "raps": {...}, ...}}

The remaining entries are numpy arrays: ``scores`` (split: ascending), plus
``fold_of`` (cv) or ``active`` (bootstrap), and one forest per ``model/`` or
``fold<k>/`` prefix in the layout of :func:`conformal_forest.forest.forest_to_arrays`.
No pickled objects are stored.
"""

from __future__ import annotations

import io
import json
import logging
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import errors
from ._rng import Stream, derive_seed
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
    cross_pvalues,
    default_score_kind,
    epsilon_cv_bound,
    point_prediction,
    predict_interval_cross,
    predict_interval_split,
    predict_set_split,
    rescore_cross,
    rescore_split,
    search_k_and_lambda,
)
from .forest import Dataset, ForestModel, ForestParams, Task, forest_from_arrays, forest_to_arrays
from .kernels import sets_from_pvalues
from .scores import RapsParams

logger = logging.getLogger(__name__)

AUTO = "auto"
METHODS = ("split", "cv", "bootstrap")
BUNDLE_FORMAT = "conformal-forest-bundle"
BUNDLE_VERSION = 1


@dataclass
class RunConfig:
    """Everything that determines a fitted model.

    ``n_estimators`` is the per-fold tree count for ``cv`` and the binomial
    trial count for ``bootstrap`` when ``resample_n_estimators`` is set.
    ``alpha[0]`` is the level used by the automatic k/lambda search.
    """

    task: str = "classification"
    method: str = "cv"
    alpha: list[float] = field(default_factory=lambda: [0.05])
    n_estimators: int = 100
    cv_folds: int = 5
    k_init: int | str = 0
    lambda_init: float | str = 0.0
    randomized: bool = True
    allow_empty_sets: bool = True
    resample_n_estimators: bool = True
    bootstrap_size: int | None = None
    calib_fraction: float = 0.5
    tuning_fraction: float = 0.2
    max_features: int | None = None
    min_samples_leaf: int = 1
    max_depth: int | None = None
    seed: int = 0
    threads: int | None = None

    def validate(self) -> None:
        if self.task not in {t.value for t in Task}:
            raise errors.ValidationError(f"task must be regression or classification, got {self.task!r}")
        if self.method not in METHODS:
            raise errors.ValidationError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.method == "cv" and self.cv_folds < 2:
            raise errors.KOutOfRange("cv_folds must be >= 2")
        if not self.alpha or any(not 0.0 < a < 1.0 for a in self.alpha):
            raise errors.AlphaOutOfRange(f"alpha values must lie in (0, 1): {self.alpha}")
        if (self.k_init == AUTO) != (self.lambda_init == AUTO):
            raise errors.ValidationError('k_init and lambda_init must both be "auto" or both numeric')
        if self.k_init != AUTO and (int(self.k_init) < 0 or float(self.lambda_init) < 0):
            raise errors.ValidationError("k_init and lambda_init must be non-negative")
        if self.n_estimators < 1:
            raise errors.ValidationError("n_estimators must be >= 1")
        if not 0.0 < self.calib_fraction < 1.0:
            raise errors.ValidationError("calib_fraction must lie in (0, 1)")
        if not 0.0 < self.tuning_fraction < 1.0:
            raise errors.ValidationError("tuning_fraction must lie in (0, 1)")
        if self.seed < 0:
            raise errors.ValidationError("seed must be non-negative")

    def persisted(self) -> dict:
        """Fields that determine outputs; ``threads`` never does, so it is left out."""
        d = asdict(self)
        del d["threads"]
        return d

    @property
    def auto(self) -> bool:
        return self.k_init == AUTO

    def forest_params(self) -> ForestParams:
        return ForestParams(
            n_estimators=self.n_estimators,
            max_features=self.max_features,
            min_samples_leaf=self.min_samples_leaf,
            max_depth=self.max_depth,
            bootstrap_size=self.bootstrap_size,
        )

    def raps_params(self) -> RapsParams:
        if self.auto:
            return RapsParams(0, 0.0, self.randomized, self.allow_empty_sets)
        return RapsParams(int(self.k_init), float(self.lambda_init), self.randomized, self.allow_empty_sets)


def _split_index(n: int, n_first: int, seed: int, stream: Stream) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng(derive_seed(seed, stream)).permutation(n)
    return np.sort(perm[:n_first]), np.sort(perm[n_first:])


def _write_npz(path, arrays: dict[str, np.ndarray]) -> None:
    # np.savez stamps entries with the wall clock; a fixed stamp keeps bundles byte-identical
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for name in sorted(arrays):
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            info.compress_type = zipfile.ZIP_DEFLATED
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(arrays[name]), allow_pickle=False)
            zf.writestr(info, buf.getvalue())


class ConformalForest:
    """Random-forest conformal predictor for one task and one method.

    Parameters
    ----------
    config : RunConfig
        Method, forest and RAPS settings plus the master seed.

    Examples
    --------
    >>> from conformal_forest.datasets import make_blobs
    >>> data = make_blobs(300, n_classes=4, seed=1)
    >>> cf = ConformalForest(RunConfig(method="bootstrap", n_estimators=50)).fit(data)
    >>> sets = cf.predict(data.features[:5], alpha=0.1)
    >>> sets.sets.shape
    (5, 4)
    """

    def __init__(self, config: RunConfig | None = None):
        self.config = config or RunConfig()
        self.model_: ForestModel | None = None
        self.calibration_: SplitCalibration | CvCalibration | JabCalibration | None = None
        self.manifest_: dict = {}
        self.schema_: dict = {}

    # -- fitting ---------------------------------------------------------

    def fit(self, data: Dataset) -> ConformalForest:
        cfg = self.config
        cfg.validate()
        task = Task(cfg.task)
        if data.task is not task:
            raise errors.TaskMismatch(f"config task {task.value} but data is {data.task.value}")
        n = data.n_samples
        seed = cfg.seed
        params = cfg.forest_params()
        raps = cfg.raps_params()
        auto = cfg.auto and task is Task.CLASSIFICATION
        if cfg.auto and not auto:
            logger.info("k/lambda search only applies to classification; ignored")
        kind = ScoreKind.RAPS if auto else default_score_kind(task, raps)

        tune = None
        rest = data
        if auto:
            n_tune = max(10, int(round(cfg.tuning_fraction * n)))
            if n - n_tune < 2:
                raise errors.TuningTooSmall(f"{n} rows cannot spare {n_tune} for tuning")
            tune_idx, rest_idx = _split_index(n, n_tune, seed, Stream.TUNING_SPLIT)
            tune, rest = data.subset(tune_idx), data.subset(rest_idx)

        manifest = {
            "task": task.value,
            "method": cfg.method,
            "n_train": n,
            "n_tune": 0 if tune is None else tune.n_samples,
            "seed": seed,
            "model_seed": derive_seed(seed, Stream.MODEL),
        }
        if cfg.method == "split":
            n_rest = rest.n_samples
            if n_rest < 2:
                raise errors.ValidationError("split conformal needs at least two rows")
            n_cal = min(max(int(round(cfg.calib_fraction * n_rest)), 1), n_rest - 1)
            cal_idx, fit_idx = _split_index(n_rest, n_cal, seed, Stream.CALIB_SPLIT)
            fit_part, cal_part = rest.subset(fit_idx), rest.subset(cal_idx)
            model, cal = calibrate_split(fit_part, cal_part, params, raps, seed, kind, cfg.threads)
            if auto:
                raps = search_k_and_lambda(tune, model, cfg.alpha[0], seed, cfg.randomized,
                                           cfg.allow_empty_sets, cfg.threads)
                cal = rescore_split(model, cal_part, raps, seed, kind, cfg.threads)
            self.model_ = model
            manifest.update(n_fit=fit_part.n_samples, n_calib=cal_part.n_samples,
                            n_estimators=model.n_trees)
        elif cfg.method == "cv":
            if not 2 <= cfg.cv_folds <= rest.n_samples:
                raise errors.KOutOfRange(f"need 2 <= K <= n, got K={cfg.cv_folds}, n={rest.n_samples}")
            cal = calibrate_cv(rest, cfg.cv_folds, params, raps, seed, kind, cfg.threads)
            if auto:
                raps = search_k_and_lambda(tune, cal.fold_models, cfg.alpha[0], seed, cfg.randomized,
                                           cfg.allow_empty_sets, cfg.threads)
                cal = rescore_cross(cal, rest, raps, seed, kind, cfg.threads)
            manifest.update(n_calib=rest.n_samples, K=cal.K, n_estimators=cfg.n_estimators,
                            epsilon_K_n=epsilon_cv_bound(cal.K, rest.n_samples),
                            folds_seed=derive_seed(seed, Stream.FOLDS))
        else:
            cal = calibrate_jab(rest, cfg.n_estimators, cfg.bootstrap_size, cfg.resample_n_estimators,
                                params, raps, seed, kind, cfg.threads)
            if auto:
                raps = search_k_and_lambda(tune, cal.model, cfg.alpha[0], seed, cfg.randomized,
                                           cfg.allow_empty_sets, cfg.threads)
                cal = rescore_cross(cal, rest, raps, seed, kind, cfg.threads)
            manifest.update(n_calib=int(cal.active.size), n_inactive=cal.n_inactive, B_tilde=cfg.n_estimators,
                            B=cal.B, resample_n_estimators=cfg.resample_n_estimators,
                            bootstrap_size=cal.model.params.bootstrap_size,
                            n_bootstraps_seed=derive_seed(seed, Stream.N_BOOTSTRAPS))
        manifest.update(score_kind=cal.score_kind.value, k_star=cal.raps.k_star,
                        lambda_star=cal.raps.lambda_star)
        self.calibration_ = cal
        self.manifest_ = manifest
        self.schema_ = {
            "task": task.value,
            "n_features": data.n_features,
            "n_classes": data.n_classes,
            "feature_names": data.feature_names,
            "class_labels": data.class_labels,
        }
        return self

    # -- prediction --------------------------------------------------------

    def _check_fitted(self):
        if self.calibration_ is None:
            raise errors.ValidationError("model is not fitted")

    def _X(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X.reshape(1, -1)
        if X.shape[1] != self.schema_["n_features"]:
            raise errors.SchemaMismatch(f"expected {self.schema_['n_features']} features, got {X.shape[1]}")
        return X

    def predict_many(self, X, alphas, seed: int | None = None, chunk_size: int | None = None) -> dict:
        """Predictions for several levels at once, keyed by ``alpha``.

        Cross-conformal p-values are computed once and thresholded per level.
        Test-point randomization draws come from ``seed`` (default: the config
        seed), so repeated calls are identical.
        """
        self._check_fitted()
        X = self._X(X)
        seed = self.config.seed if seed is None else seed
        threads = self.config.threads
        cal = self.calibration_
        out = {}
        if isinstance(cal, SplitCalibration):
            for a in alphas:
                if cal.task is Task.REGRESSION:
                    out[a] = predict_interval_split(self.model_, cal, X, a, threads)
                else:
                    out[a] = predict_set_split(self.model_, cal, X, a, seed, threads)
        elif cal.task is Task.REGRESSION:
            for a in alphas:
                out[a] = predict_interval_cross(cal, X, a, threads)
        else:
            p = cross_pvalues(cal, X, seed, threads, chunk_size)
            pred = np.argmax(point_prediction(cal, X, threads), axis=1)
            for a in alphas:
                if not 0.0 < a < 1.0:
                    raise errors.AlphaOutOfRange(f"alpha={a} outside (0, 1)")
                out[a] = PredictionSets(sets_from_pvalues(p, a, cal.raps.allow_empty_sets), pred)
        return out

    def predict(self, X, alpha: float | None = None, seed: int | None = None,
                chunk_size: int | None = None) -> PredictionSets | PredictionIntervals:
        alpha = self.config.alpha[0] if alpha is None else alpha
        return self.predict_many(X, [alpha], seed, chunk_size)[alpha]

    # -- persistence -------------------------------------------------------

    def save(self, path) -> None:
        self._check_fitted()
        cal = self.calibration_
        arrays: dict[str, np.ndarray] = {}
        cmeta = {"score_kind": cal.score_kind.value, "raps": asdict(cal.raps)}
        if isinstance(cal, SplitCalibration):
            cmeta["method"] = "split"
            arrays["scores"] = cal.sorted_scores
            arrays.update(forest_to_arrays(self.model_, "model/"))
        elif isinstance(cal, CvCalibration):
            cmeta.update(method="cv", K=cal.K, model_seed=cal.model_seed)
            arrays["scores"] = cal.scores
            arrays["fold_of"] = cal.fold_of
            for k, m in enumerate(cal.fold_models):
                arrays.update(forest_to_arrays(m, f"fold{k}/"))
        else:
            cmeta.update(method="bootstrap", B_tilde=cal.B_tilde)
            arrays["scores"] = cal.scores
            arrays["active"] = cal.active
            arrays.update(forest_to_arrays(cal.model, "model/"))
        meta = {
            "format": BUNDLE_FORMAT,
            "version": BUNDLE_VERSION,
            "config": self.config.persisted(),
            "manifest": self.manifest_,
            "schema": self.schema_,
            "calibration": cmeta,
        }
        arrays["bundle_meta"] = np.array(json.dumps(meta, sort_keys=True))
        _write_npz(path, arrays)

    @classmethod
    def load(cls, path) -> ConformalForest:
        try:
            npz = np.load(Path(path), allow_pickle=False)
        except (OSError, ValueError) as exc:
            raise errors.BundleFormatError(f"cannot read bundle {path}: {exc}") from None
        with npz as arrays:
            if "bundle_meta" not in arrays:
                raise errors.BundleFormatError(f"{path} is not a conformal-forest bundle")
            meta = json.loads(str(arrays["bundle_meta"]))
            if meta.get("format") != BUNDLE_FORMAT or meta.get("version") != BUNDLE_VERSION:
                raise errors.BundleFormatError(f"unsupported bundle {meta.get('format')} v{meta.get('version')}")
            est = cls(RunConfig(**meta["config"]))
            est.manifest_ = meta["manifest"]
            est.schema_ = meta["schema"]
            cm = meta["calibration"]
            task = Task(est.schema_["task"])
            n_classes = est.schema_["n_classes"]
            kind = ScoreKind(cm["score_kind"])
            raps = RapsParams(**cm["raps"])
            scores = np.asarray(arrays["scores"])
            if cm["method"] == "split":
                est.model_ = forest_from_arrays(arrays, "model/")
                est.calibration_ = SplitCalibration(scores, kind, raps, task, n_classes)
            elif cm["method"] == "cv":
                models = [forest_from_arrays(arrays, f"fold{k}/") for k in range(cm["K"])]
                est.calibration_ = CvCalibration(models, np.asarray(arrays["fold_of"]), scores, kind, raps,
                                                 task, n_classes, cm["model_seed"])
            else:
                est.calibration_ = JabCalibration(forest_from_arrays(arrays, "model/"), scores,
                                                  np.asarray(arrays["active"]), kind, raps, task,
                                                  n_classes, cm["B_tilde"])
        return est
