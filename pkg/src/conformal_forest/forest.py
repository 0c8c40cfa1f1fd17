"""Bagged CART forests with bootstrap membership bookkeeping.

Trees are stored as flat preorder node arrays (one block per tree, children
indexed relative to the block start).  The forest keeps a boolean ``in_bag``
matrix of shape ``(n_trees, n_train)``; its complement gives, for every
training sample, the set of trees that never saw it (the out-of-bag set).

Fitting and prediction run in numba ``prange`` loops over trees.  Each tree
draws from its own RNG stream keyed by ``(seed, tree_index)``, so the fitted
forest does not depend on the number of threads.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from numba import njit, prange

from . import errors
from ._parallel import thread_limit
from ._rng import rng_for

logger = logging.getLogger(__name__)

FOREST_FORMAT_VERSION = 1

# Trees fitted per numba call; bounds the (batch, 2m - 1, n_out) scratch buffers.
_TREE_BATCH = 64


class Task(str, Enum):
    REGRESSION = "regression"
    CLASSIFICATION = "classification"


@dataclass(eq=False)
class Dataset:
    """Feature matrix plus targets.

    Classification targets are integer class indices in ``[0, n_classes)``;
    ``class_labels`` optionally maps them back to the original labels.
    """

    features: np.ndarray
    targets: np.ndarray
    task: Task
    n_classes: int = 0
    feature_names: list[str] | None = None
    class_labels: list[str] | None = None

    def __post_init__(self):
        self.task = Task(self.task)
        X = np.asarray(self.features, dtype=np.float64)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        if X.ndim != 2:
            raise errors.ValidationError("features must be a 2-d matrix")
        if X.shape[0] == 0:
            raise errors.EmptyDataset("dataset has no samples")
        if np.isnan(X).any():
            raise errors.NonFiniteInput("NaN features are not supported")
        y = np.asarray(self.targets)
        if y.shape != (X.shape[0],):
            raise errors.LengthMismatch(f"{y.shape[0] if y.ndim else 0} targets for {X.shape[0]} rows")
        if self.task is Task.CLASSIFICATION:
            if not np.all(np.isfinite(y.astype(np.float64))) or np.any(y != np.round(y)):
                raise errors.ValidationError("classification targets must be integer class indices")
            y = y.astype(np.int64)
            if self.n_classes <= 0:
                self.n_classes = int(y.max()) + 1
            if y.min() < 0 or y.max() >= self.n_classes:
                raise errors.ClassOutOfRange(f"targets must lie in [0, {self.n_classes})")
        else:
            y = y.astype(np.float64)
            if not np.all(np.isfinite(y)):
                raise errors.NonFiniteInput("targets must be finite")
            self.n_classes = 0
        self.features = np.ascontiguousarray(X)
        self.targets = y

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def subset(self, index) -> Dataset:
        index = np.asarray(index)
        return Dataset(
            self.features[index],
            self.targets[index],
            self.task,
            self.n_classes,
            self.feature_names,
            self.class_labels,
        )


@dataclass
class ForestParams:
    """Forest hyperparameters.

    ``max_features=None`` means ceil(sqrt(d)) for classification and d for
    regression; ``max_depth=None`` grows trees until leaves are pure or hold
    fewer than ``2 * min_samples_leaf`` samples; ``bootstrap_size=None`` draws
    ``n`` samples with replacement per tree.
    """

    n_estimators: int = 100
    max_features: int | None = None
    min_samples_leaf: int = 1
    max_depth: int | None = None
    bootstrap_size: int | None = None

    def resolved_max_features(self, task: Task, n_features: int) -> int:
        if self.max_features is not None:
            return max(1, min(int(self.max_features), n_features))
        if Task(task) is Task.CLASSIFICATION:
            return max(1, math.ceil(math.sqrt(n_features)))
        return n_features

    def resolved_bootstrap_size(self, n_samples: int) -> int:
        return n_samples if self.bootstrap_size is None else int(self.bootstrap_size)


@dataclass
class Tree:
    """One decision tree as preorder node arrays.

    ``feature[node] < 0`` marks a leaf.  An internal node sends ``x`` left iff
    ``x[feature] <= threshold``.  ``value`` has one row per node: the mean target
    (regression, width 1) or the class-frequency vector (classification).
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.feature.shape[0]


@dataclass(eq=False)
class ForestModel:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    offsets: np.ndarray
    in_bag: np.ndarray
    task: Task
    n_classes: int
    n_features: int
    params: ForestParams = field(default_factory=ForestParams)
    seed: int = 0

    @property
    def n_trees(self) -> int:
        return self.offsets.shape[0] - 1

    @property
    def n_train(self) -> int:
        return self.in_bag.shape[1]

    def tree(self, t: int) -> Tree:
        lo, hi = self.offsets[t], self.offsets[t + 1]
        return Tree(
            self.feature[lo:hi],
            self.threshold[lo:hi],
            self.left[lo:hi],
            self.right[lo:hi],
            self.value[lo:hi],
        )

    @property
    def trees(self) -> list[Tree]:
        return [self.tree(t) for t in range(self.n_trees)]

    def __eq__(self, other):
        if not isinstance(other, ForestModel):
            return NotImplemented
        arrays = ("feature", "threshold", "left", "right", "value", "offsets", "in_bag")
        return (
            all(np.array_equal(getattr(self, a), getattr(other, a)) for a in arrays)
            and self.task == other.task
            and self.n_classes == other.n_classes
            and self.n_features == other.n_features
            and self.params == other.params
            and self.seed == other.seed
        )


# ---------------------------------------------------------------------------
# numba internals
# ---------------------------------------------------------------------------


@njit(cache=True)
def _next_u64(state):
    # splitmix64
    state[0] += np.uint64(0x9E3779B97F4A7C15)
    z = state[0]
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@njit(cache=True)
def _randbelow(state, bound):
    return np.int64(_next_u64(state) % np.uint64(bound))


@njit(cache=True)
def _build_tree(X, y, sample, is_clf, n_classes, max_features, min_leaf, max_depth, seed,
                feature, threshold, left, right, value):
    """Grow one tree on ``X[sample]`` into preallocated node arrays; returns the node count."""
    n_total = sample.shape[0]
    d = X.shape[1]
    n_out = value.shape[1]
    cap = feature.shape[0]

    state = np.empty(1, dtype=np.uint64)
    state[0] = np.uint64(seed)

    idx = sample.copy()
    buf = np.empty(n_total, dtype=np.int64)
    vals = np.empty(n_total, dtype=np.float64)
    perm = np.empty(d, dtype=np.int64)
    chosen = np.empty(d, dtype=np.int64)
    left_counts = np.empty(n_classes if is_clf else 1, dtype=np.float64)
    right_counts = np.empty(n_classes if is_clf else 1, dtype=np.float64)

    st_start = np.empty(cap, dtype=np.int64)
    st_end = np.empty(cap, dtype=np.int64)
    st_depth = np.empty(cap, dtype=np.int64)
    st_parent = np.empty(cap, dtype=np.int64)
    st_left = np.empty(cap, dtype=np.bool_)
    top = 0
    st_start[0] = 0
    st_end[0] = n_total
    st_depth[0] = 0
    st_parent[0] = -1
    st_left[0] = True
    top = 1
    n_nodes = 0

    while top > 0:
        top -= 1
        start = st_start[top]
        end = st_end[top]
        depth = st_depth[top]
        parent = st_parent[top]
        node = n_nodes
        n_nodes += 1
        if parent >= 0:
            if st_left[top]:
                left[parent] = node
            else:
                right[parent] = node
        feature[node] = -1
        threshold[node] = 0.0
        left[node] = -1
        right[node] = -1

        n = end - start
        pure = True
        if is_clf:
            for c in range(n_out):
                value[node, c] = 0.0
            for p in range(start, end):
                value[node, np.int64(y[idx[p]])] += 1.0
            for c in range(n_out):
                if value[node, c] > 0.0 and value[node, c] < n:
                    pure = False
                value[node, c] = value[node, c] / n
        else:
            s = 0.0
            first = y[idx[start]]
            for p in range(start, end):
                s += y[idx[p]]
                if y[idx[p]] != first:
                    pure = False
            value[node, 0] = s / n

        if pure or n < 2 * min_leaf or (max_depth >= 0 and depth >= max_depth):
            continue

        # candidate features: a fresh permutation, keeping the first
        # max_features that are non-constant in this node
        for f in range(d):
            perm[f] = f
        for f in range(d - 1, 0, -1):
            r = _randbelow(state, f + 1)
            tmp = perm[f]
            perm[f] = perm[r]
            perm[r] = tmp
        n_chosen = 0
        for q in range(d):
            f = perm[q]
            lo_v = X[idx[start], f]
            hi_v = lo_v
            for p in range(start + 1, end):
                v = X[idx[p], f]
                if v < lo_v:
                    lo_v = v
                elif v > hi_v:
                    hi_v = v
            if hi_v > lo_v:
                chosen[n_chosen] = f
                n_chosen += 1
                if n_chosen == max_features:
                    break
        if n_chosen == 0:
            continue
        cand = np.sort(chosen[:n_chosen])

        best_score = -np.inf
        best_f = -1
        best_thr = 0.0
        for q in range(n_chosen):
            f = cand[q]
            for p in range(n):
                vals[p] = X[idx[start + p], f]
            order = np.argsort(vals[:n], kind="mergesort")
            if is_clf:
                for c in range(n_out):
                    left_counts[c] = 0.0
                    right_counts[c] = 0.0
                for p in range(n):
                    right_counts[np.int64(y[idx[start + p]])] += 1.0
            else:
                left_sum = 0.0
                right_sum = 0.0
                for p in range(n):
                    right_sum += y[idx[start + p]]
            for p in range(1, n):
                prev = start + order[p - 1]
                yp = y[idx[prev]]
                if is_clf:
                    c = np.int64(yp)
                    left_counts[c] += 1.0
                    right_counts[c] -= 1.0
                else:
                    left_sum += yp
                    right_sum -= yp
                a = vals[order[p - 1]]
                b = vals[order[p]]
                if not (a < b):
                    continue
                if p < min_leaf or n - p < min_leaf:
                    continue
                n_left = float(p)
                n_right = float(n - p)
                if is_clf:
                    sl = 0.0
                    sr = 0.0
                    for c in range(n_out):
                        sl += left_counts[c] * left_counts[c]
                        sr += right_counts[c] * right_counts[c]
                    score = sl / n_left + sr / n_right
                else:
                    score = left_sum * left_sum / n_left + right_sum * right_sum / n_right
                if score > best_score:
                    best_score = score
                    best_f = f
                    mid = 0.5 * (a + b)
                    if not (mid >= a and mid < b):
                        mid = a
                    best_thr = mid
        if best_f < 0:
            continue

        # stable partition of idx[start:end]
        n_l = 0
        for p in range(start, end):
            if X[idx[p], best_f] <= best_thr:
                buf[n_l] = idx[p]
                n_l += 1
        k = n_l
        for p in range(start, end):
            if not (X[idx[p], best_f] <= best_thr):
                buf[k] = idx[p]
                k += 1
        for p in range(n):
            idx[start + p] = buf[p]

        feature[node] = best_f
        threshold[node] = best_thr
        mid_idx = start + n_l
        # push right first so the left subtree is emitted next (preorder)
        st_start[top] = mid_idx
        st_end[top] = end
        st_depth[top] = depth + 1
        st_parent[top] = node
        st_left[top] = False
        top += 1
        st_start[top] = start
        st_end[top] = mid_idx
        st_depth[top] = depth + 1
        st_parent[top] = node
        st_left[top] = True
        top += 1
    return n_nodes


@njit(parallel=True, cache=True)
def _fit_tree_batch(X, y, samples, seeds, is_clf, n_classes, max_features, min_leaf, max_depth, n_out):
    n_batch = samples.shape[0]
    cap = max(2 * samples.shape[1] - 1, 1)
    feature = np.full((n_batch, cap), -1, dtype=np.int32)
    threshold = np.zeros((n_batch, cap), dtype=np.float64)
    left = np.full((n_batch, cap), -1, dtype=np.int32)
    right = np.full((n_batch, cap), -1, dtype=np.int32)
    value = np.zeros((n_batch, cap, n_out), dtype=np.float64)
    counts = np.zeros(n_batch, dtype=np.int64)
    for t in prange(n_batch):
        counts[t] = _build_tree(X, y, samples[t], is_clf, n_classes, max_features, min_leaf,
                                max_depth, seeds[t], feature[t], threshold[t], left[t],
                                right[t], value[t])
    return feature, threshold, left, right, value, counts


@njit(parallel=True, cache=True)
def _predict_per_tree(feature, threshold, left, right, value, offsets, X):
    n_trees = offsets.shape[0] - 1
    n = X.shape[0]
    n_out = value.shape[1]
    out = np.empty((n_trees, n, n_out), dtype=np.float64)
    for t in prange(n_trees):
        base = offsets[t]
        for i in range(n):
            node = 0
            while feature[base + node] >= 0:
                if X[i, feature[base + node]] <= threshold[base + node]:
                    node = left[base + node]
                else:
                    node = right[base + node]
            for c in range(n_out):
                out[t, i, c] = value[base + node, c]
    return out


@njit(parallel=True, cache=True)
def _masked_tree_mean(per_tree, include):
    """``out[r] = mean(per_tree[t] for t with include[r, t])``, summed in ascending ``t``."""
    n_rows = include.shape[0]
    n_trees, n, n_out = per_tree.shape
    out = np.empty((n_rows, n, n_out), dtype=np.float64)
    for r in prange(n_rows):
        acc = np.zeros((n, n_out), dtype=np.float64)
        cnt = 0
        for t in range(n_trees):
            if include[r, t]:
                for i in range(n):
                    for c in range(n_out):
                        acc[i, c] += per_tree[t, i, c]
                cnt += 1
        for i in range(n):
            for c in range(n_out):
                out[r, i, c] = acc[i, c] / cnt
    return out


@njit(parallel=True, cache=True)
def _oob_self_mean(per_tree, in_bag, active):
    """Out-of-bag prediction of each active training sample for itself."""
    n_trees = per_tree.shape[0]
    n_out = per_tree.shape[2]
    out = np.empty((active.shape[0], n_out), dtype=np.float64)
    for a in prange(active.shape[0]):
        i = active[a]
        acc = np.zeros(n_out, dtype=np.float64)
        cnt = 0
        for t in range(n_trees):
            if not in_bag[t, i]:
                for c in range(n_out):
                    acc[c] += per_tree[t, i, c]
                cnt += 1
        for c in range(n_out):
            out[a, c] = acc[c] / cnt
    return out


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------


def _tree_streams(seed: int, first: int, count: int, n: int, m: int):
    samples = np.empty((count, m), dtype=np.int64)
    seeds = np.empty(count, dtype=np.uint64)
    for k in range(count):
        rng = rng_for(seed, first + k)
        samples[k] = rng.integers(0, n, size=m)
        seeds[k] = rng.integers(0, 2**63, dtype=np.uint64)
    return samples, seeds


def fit_forest(data: Dataset, params: ForestParams | None = None, seed: int = 0,
               threads: int | None = None) -> ForestModel:
    """Fit ``params.n_estimators`` CART trees, each on its own bootstrap sample.

    Tree ``t`` draws its bootstrap indices and split-feature permutations from
    the stream keyed by ``(seed, t)``.
    """
    params = params or ForestParams()
    n, d = data.n_samples, data.n_features
    if n == 0:
        raise errors.EmptyDataset("dataset has no samples")
    if params.n_estimators < 1:
        raise errors.ValidationError("n_estimators must be >= 1")
    if params.min_samples_leaf < 1:
        raise errors.ValidationError("min_samples_leaf must be >= 1")
    m = params.resolved_bootstrap_size(n)
    if m < 1:
        raise errors.ValidationError("bootstrap_size must be >= 1")
    is_clf = data.task is Task.CLASSIFICATION
    if is_clf and np.unique(data.targets).size == 1:
        logger.warning("classification data contains a single observed class")
    n_out = data.n_classes if is_clf else 1
    max_features = params.resolved_max_features(data.task, d)
    max_depth = -1 if params.max_depth is None else int(params.max_depth)
    y = data.targets.astype(np.float64)

    T = params.n_estimators
    in_bag = np.zeros((T, n), dtype=bool)
    blocks = []
    with thread_limit(threads):
        for first in range(0, T, _TREE_BATCH):
            count = min(_TREE_BATCH, T - first)
            samples, seeds = _tree_streams(seed, first, count, n, m)
            for k in range(count):
                in_bag[first + k, samples[k]] = True
            feat, thr, lft, rgt, val, counts = _fit_tree_batch(
                data.features, y, samples, seeds, is_clf, max(data.n_classes, 1),
                max_features, params.min_samples_leaf, max_depth, n_out)
            for k in range(count):
                c = counts[k]
                blocks.append((feat[k, :c], thr[k, :c], lft[k, :c], rgt[k, :c], val[k, :c]))

    offsets = np.zeros(T + 1, dtype=np.int64)
    offsets[1:] = np.cumsum([b[0].shape[0] for b in blocks])
    return ForestModel(
        feature=np.concatenate([b[0] for b in blocks]),
        threshold=np.concatenate([b[1] for b in blocks]),
        left=np.concatenate([b[2] for b in blocks]),
        right=np.concatenate([b[3] for b in blocks]),
        value=np.ascontiguousarray(np.concatenate([b[4] for b in blocks])),
        offsets=offsets,
        in_bag=in_bag,
        task=data.task,
        n_classes=data.n_classes,
        n_features=d,
        params=params,
        seed=int(seed),
    )


def predict_tree(tree: Tree, x, n_features: int | None = None):
    """Route one sample to a leaf; returns a float (width-1 leaves) or a frequency vector."""
    x = np.asarray(x, dtype=np.float64).ravel()
    if n_features is not None and x.shape[0] != n_features:
        raise errors.FeatureCountMismatch(f"expected {n_features} features, got {x.shape[0]}")
    node = 0
    while tree.feature[node] >= 0:
        f = tree.feature[node]
        if f >= x.shape[0]:
            raise errors.FeatureCountMismatch(f"tree splits on feature {f}, x has {x.shape[0]}")
        node = tree.left[node] if x[f] <= tree.threshold[node] else tree.right[node]
    leaf = tree.value[node]
    if leaf.shape[0] == 1:
        return float(leaf[0])
    return leaf.copy()


def _check_X(model: ForestModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    if X.shape[1] != model.n_features:
        raise errors.FeatureCountMismatch(f"model expects {model.n_features} features, got {X.shape[1]}")
    if np.isnan(X).any():
        raise errors.NonFiniteInput("NaN features are not supported")
    return np.ascontiguousarray(X)


def predict_per_tree(model: ForestModel, X, threads: int | None = None) -> np.ndarray:
    """Raw leaf values, shape ``(n_trees, n_samples, n_out)``."""
    X = _check_X(model, X)
    with thread_limit(threads):
        return _predict_per_tree(model.feature, model.threshold, model.left, model.right,
                                 model.value, model.offsets, X)


def _finish(model: ForestModel, out: np.ndarray) -> np.ndarray:
    return out[..., 0] if model.task is Task.REGRESSION else out


def predict_forest(model: ForestModel, X, tree_subset=None, threads: int | None = None) -> np.ndarray:
    """Mean of per-tree predictions over ``tree_subset`` (default: every tree).

    Returns a vector for regression and an ``(n, n_classes)`` probability matrix
    for classification.
    """
    include = np.ones((1, model.n_trees), dtype=bool)
    if tree_subset is not None:
        subset = np.asarray(sorted(set(int(t) for t in tree_subset)), dtype=np.int64)
        if subset.size == 0:
            raise errors.EmptyTreeSubset("tree subset is empty")
        if subset[0] < 0 or subset[-1] >= model.n_trees:
            raise errors.ValidationError("tree subset index out of range")
        include[:] = False
        include[0, subset] = True
    per_tree = predict_per_tree(model, X, threads)
    with thread_limit(threads):
        out = _masked_tree_mean(per_tree, include)[0]
    return _finish(model, out)


def oob_tree_sets(model: ForestModel) -> tuple[list[np.ndarray], np.ndarray]:
    """Out-of-bag tree indices per training sample and a mask of samples with none."""
    out_of_bag = ~model.in_bag
    sets = [np.flatnonzero(out_of_bag[:, i]) for i in range(model.n_train)]
    empty = ~out_of_bag.any(axis=0)
    return sets, empty


def oob_predict_train(model: ForestModel, X_train, active, threads: int | None = None) -> np.ndarray:
    """Out-of-bag prediction of each active training sample for its own row."""
    per_tree = predict_per_tree(model, X_train, threads)
    with thread_limit(threads):
        out = _oob_self_mean(per_tree, model.in_bag, np.asarray(active, dtype=np.int64))
    return _finish(model, out)


def oob_predict(model: ForestModel, X, active, threads: int | None = None) -> np.ndarray:
    """Prediction on ``X`` from each active sample's out-of-bag trees.

    Shape ``(n_active, n_test)`` for regression, ``(n_active, n_test, C)`` for
    classification.
    """
    per_tree = predict_per_tree(model, X, threads)
    include = np.ascontiguousarray(~model.in_bag.T[np.asarray(active, dtype=np.int64)])
    with thread_limit(threads):
        out = _masked_tree_mean(per_tree, include)
    return _finish(model, out)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def forest_to_arrays(model: ForestModel, prefix: str = "") -> dict[str, np.ndarray]:
    """Flatten a forest into named arrays plus a JSON header (``<prefix>meta``)."""
    meta = {
        "format_version": FOREST_FORMAT_VERSION,
        "task": model.task.value,
        "n_classes": model.n_classes,
        "n_features": model.n_features,
        "n_train": model.n_train,
        "params": asdict(model.params),
        "seed": model.seed,
    }
    return {
        prefix + "meta": np.array(json.dumps(meta, sort_keys=True)),
        prefix + "feature": model.feature,
        prefix + "threshold": model.threshold,
        prefix + "left": model.left,
        prefix + "right": model.right,
        prefix + "value": model.value,
        prefix + "offsets": model.offsets,
        prefix + "in_bag": np.packbits(model.in_bag, axis=1),
    }


def forest_from_arrays(arrays, prefix: str = "") -> ForestModel:
    meta = json.loads(str(arrays[prefix + "meta"]))
    if meta.get("format_version") != FOREST_FORMAT_VERSION:
        raise errors.BundleFormatError(f"unsupported forest format {meta.get('format_version')}")
    n_train = meta["n_train"]
    in_bag = np.unpackbits(arrays[prefix + "in_bag"], axis=1, count=n_train).astype(bool)
    return ForestModel(
        feature=np.asarray(arrays[prefix + "feature"]),
        threshold=np.asarray(arrays[prefix + "threshold"]),
        left=np.asarray(arrays[prefix + "left"]),
        right=np.asarray(arrays[prefix + "right"]),
        value=np.ascontiguousarray(arrays[prefix + "value"]),
        offsets=np.asarray(arrays[prefix + "offsets"]),
        in_bag=in_bag,
        task=Task(meta["task"]),
        n_classes=meta["n_classes"],
        n_features=meta["n_features"],
        params=ForestParams(**meta["params"]),
        seed=meta["seed"],
    )


def save_forest(model: ForestModel, path) -> None:
    """Write a forest to an ``.npz`` archive (see :func:`forest_to_arrays`)."""
    with open(path, "wb") as fh:
        np.savez_compressed(fh, **forest_to_arrays(model))


def load_forest(path) -> ForestModel:
    with np.load(Path(path), allow_pickle=False) as arrays:
        return forest_from_arrays(arrays)
