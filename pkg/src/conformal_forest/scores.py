"""Conformity score functions.

Scalar, side-effect free.  The randomization variable ``u`` is always passed in
by the caller so that RNG streams stay under the control of the calibration
code and the kernels.

Every score is assembled in the same floating-point order,
``(cumsum_before_rank + u * prob_at_rank) + penalty``, which the batched
kernels reproduce exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import errors


@dataclass(frozen=True)
class RapsParams:
    """Regularization and set-construction switches.

    ``k_star`` is a 1-based rank: classes ranked at or above it pay no penalty.
    With ``k_star=0`` and ``lambda_star=0`` the score reduces to plain APS.
    """

    k_star: int = 0
    lambda_star: float = 0.0
    randomized: bool = True
    allow_empty_sets: bool = True

    def __post_init__(self):
        if self.k_star < 0:
            raise errors.ValidationError("k_star must be >= 0")
        if not (self.lambda_star >= 0.0) or not math.isfinite(self.lambda_star):
            raise errors.ValidationError("lambda_star must be a finite value >= 0")

    def max_score(self, n_classes: int) -> float:
        return 1.0 + self.lambda_star * max(0, n_classes - self.k_star)


@dataclass(frozen=True)
class SortedProbs:
    sorted: np.ndarray
    perm: np.ndarray
    cumsum: np.ndarray

    @property
    def n_classes(self) -> int:
        return self.sorted.shape[0]

    def rank_of(self, y: int) -> int:
        """1-based rank of class ``y``."""
        if not 0 <= y < self.n_classes:
            raise errors.ClassOutOfRange(f"class {y} outside [0, {self.n_classes})")
        return int(np.flatnonzero(self.perm == y)[0]) + 1


def residual_score(y: float, y_hat: float) -> float:
    if not (math.isfinite(y) and math.isfinite(y_hat)):
        raise errors.NonFiniteInput("residual_score needs finite inputs")
    return abs(y - y_hat)


def sort_probs(pi) -> SortedProbs:
    """Sort a probability vector in descending order, ties to the lower class index."""
    pi = np.asarray(pi, dtype=np.float64)
    if pi.ndim != 1 or pi.size == 0:
        raise errors.NotAProbabilityVector("expected a non-empty 1-d vector")
    if not np.all(np.isfinite(pi)) or np.any(pi < 0) or abs(pi.sum() - 1.0) > 1e-6:
        raise errors.NotAProbabilityVector("entries must be >= 0 and sum to 1")
    perm = np.argsort(-pi, kind="stable")
    ordered = pi[perm]
    return SortedProbs(sorted=ordered, perm=perm, cumsum=np.cumsum(ordered))


def _check_u(u: float) -> None:
    if not 0.0 <= u <= 1.0:
        raise errors.UOutOfRange(f"u={u} outside [0, 1]")


def aps_score(sp: SortedProbs, y: int, u: float) -> float:
    """Randomized generalized inverse quantile: mass ranked above ``y`` plus ``u`` times its own."""
    _check_u(u)
    r = sp.rank_of(y)
    before = float(sp.cumsum[r - 2]) if r >= 2 else 0.0
    return before + u * float(sp.sorted[r - 1])


def raps_penalty(rank: int, params: RapsParams) -> float:
    return params.lambda_star * max(0, rank - params.k_star)


def raps_score(sp: SortedProbs, y: int, u: float, params: RapsParams) -> float:
    return aps_score(sp, y, u) + raps_penalty(sp.rank_of(y), params)


def true_label_ranks(probs: np.ndarray, y: np.ndarray) -> np.ndarray:
    """1-based rank of each row's true label (descending probability, ties to lower index)."""
    probs = np.asarray(probs, dtype=np.float64)
    order = np.argsort(-probs, axis=1, kind="stable")
    return np.argmax(order == np.asarray(y)[:, None], axis=1) + 1


def calibration_scores(probs: np.ndarray, y: np.ndarray, u: np.ndarray | None,
                       params: RapsParams, regularized: bool) -> np.ndarray:
    """Score each row's true class; ``u=None`` means the non-randomized score (u = 1).

    When empty sets are disallowed a top-ranked true class is scored with
    ``u = 1``, mirroring how test classes are scored.
    """
    out = np.empty(probs.shape[0], dtype=np.float64)
    for i in range(probs.shape[0]):
        sp = sort_probs(probs[i])
        ui = 1.0 if u is None else float(u[i])
        if not params.allow_empty_sets and sp.perm[0] == int(y[i]):
            ui = 1.0
        if regularized:
            out[i] = raps_score(sp, int(y[i]), ui, params)
        else:
            out[i] = aps_score(sp, int(y[i]), ui)
    return out
