"""Empirical coverage and size of prediction sets and intervals."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import errors


@dataclass
class EvalReport:
    coverage: float
    mean_size_or_length: float
    n_evaluated: int
    per_instance_covered: np.ndarray | None = None
    per_instance_size: np.ndarray | None = None

    def to_dict(self) -> dict:
        return {
            "coverage": self.coverage,
            "mean_size_or_length": self.mean_size_or_length,
            "n_evaluated": self.n_evaluated,
        }


def _membership(sets) -> list[set[int]] | np.ndarray:
    if hasattr(sets, "sets"):
        sets = sets.sets
    if isinstance(sets, np.ndarray) and sets.dtype == bool and sets.ndim == 2:
        return sets
    return [set(int(c) for c in s) for s in sets]


def _covered_sets(sets, y_true) -> np.ndarray:
    m = _membership(sets)
    y = np.asarray(y_true)
    if len(m) != y.shape[0]:
        raise errors.LengthMismatch(f"{len(m)} sets vs {y.shape[0]} labels")
    if isinstance(m, np.ndarray):
        return m[np.arange(y.shape[0]), y.astype(np.int64)]
    return np.array([int(t) in s for s, t in zip(m, y)], dtype=bool)


def _sizes(sets) -> np.ndarray:
    m = _membership(sets)
    if isinstance(m, np.ndarray):
        return m.sum(axis=1)
    return np.array([len(s) for s in m], dtype=np.int64)


def classification_coverage(sets, y_true) -> float:
    """Fraction of instances whose true class lies in its prediction set."""
    covered = _covered_sets(sets, y_true)
    if covered.size == 0:
        raise errors.EmptyInput("no instances")
    return float(covered.sum() / covered.size)


def average_set_size(sets) -> float:
    sizes = _sizes(sets)
    if sizes.size == 0:
        raise errors.EmptyInput("no instances")
    return float(sizes.mean())


def _bounds(intervals) -> tuple[np.ndarray, np.ndarray]:
    if hasattr(intervals, "lo"):
        return np.asarray(intervals.lo, dtype=np.float64), np.asarray(intervals.hi, dtype=np.float64)
    a = np.asarray(intervals, dtype=np.float64).reshape(-1, 2)
    return a[:, 0], a[:, 1]


def _covered_intervals(intervals, y_true) -> np.ndarray:
    lo, hi = _bounds(intervals)
    y = np.asarray(y_true, dtype=np.float64)
    if lo.shape[0] != y.shape[0]:
        raise errors.LengthMismatch(f"{lo.shape[0]} intervals vs {y.shape[0]} targets")
    # closed interval; +-inf bounds always cover
    return (lo <= y) & (y <= hi)


def regression_coverage(intervals, y_true) -> float:
    covered = _covered_intervals(intervals, y_true)
    if covered.size == 0:
        raise errors.EmptyInput("no instances")
    return float(covered.sum() / covered.size)


def average_interval_length(intervals) -> float:
    """Mean ``hi - lo``; ``inf`` as soon as one interval is unbounded."""
    lo, hi = _bounds(intervals)
    if lo.size == 0:
        raise errors.EmptyInput("no instances")
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        return math.inf
    return float(np.mean(hi - lo))


def evaluate_sets(sets, y_true) -> EvalReport:
    covered = _covered_sets(sets, y_true)
    sizes = _sizes(sets)
    return EvalReport(classification_coverage(sets, y_true), average_set_size(sets),
                      int(covered.size), covered, sizes)


def evaluate_intervals(intervals, y_true) -> EvalReport:
    covered = _covered_intervals(intervals, y_true)
    lo, hi = _bounds(intervals)
    return EvalReport(regression_coverage(intervals, y_true), average_interval_length(intervals),
                      int(covered.size), covered, hi - lo)
