"""Batched set construction and cross-conformity scoring.

``split_sets_kernel`` turns class-probability rows into prediction sets for a
fixed threshold.  ``cross_giqs_kernel`` scores every class of every test point
under every training point's leave-out model, producing the
``(n_train, n_test, n_classes)`` tensor that CV+ and J+ab compare against the
calibration scores.

Both kernels are parallel over independent rows with no shared mutable state,
so their output is bit-identical for any thread count.  ``reference_*``
functions are slow, loop-literal transcriptions used as test oracles.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange

from . import errors
from ._parallel import thread_limit
from .scores import RapsParams

_PROB_TOL = 1e-6


def _check_prob_rows(probs: np.ndarray, exc: type[errors.ValidationError]) -> None:
    if not np.all(np.isfinite(probs)) or np.any(probs < 0):
        raise exc("probabilities must be finite and non-negative")
    if np.any(np.abs(probs.sum(axis=-1) - 1.0) > _PROB_TOL):
        raise exc("probability rows must sum to 1")


def _check_u(u, n: int, randomized: bool) -> np.ndarray:
    if not randomized:
        return np.ones(n, dtype=np.float64)
    if u is None:
        raise errors.ValidationError("randomized sets need a u vector")
    u = np.ascontiguousarray(u, dtype=np.float64)
    if u.shape != (n,):
        raise errors.DimensionMismatch(f"u has shape {u.shape}, expected ({n},)")
    if np.any(u < 0.0) or np.any(u > 1.0):
        raise errors.UOutOfRange("u values must lie in [0, 1]")
    return u


@njit(cache=True)
def _rank_score(before, u, p, rank, k_star, lam, regularized):
    score = before + u * p
    if regularized:
        score = score + lam * max(0, rank - k_star)
    return score


@njit(parallel=True, cache=True)
def _split_sets(probs, tau, k_star, lam, regularized, randomized, allow_empty, u, out):
    n, C = probs.shape
    for i in prange(n):
        order = np.argsort(-probs[i], kind="mergesort")
        # L: smallest rank whose u=1 score exceeds tau, else C
        L = C
        before = 0.0
        before_L = 0.0
        for r in range(C):
            p = probs[i, order[r]]
            before_L = before
            if _rank_score(before, 1.0, p, r + 1, k_star, lam, regularized) > tau:
                L = r + 1
                break
            before = before + p
        if randomized:
            p = probs[i, order[L - 1]]
            if _rank_score(before_L, u[i], p, L, k_star, lam, regularized) > tau:
                L -= 1
            if L == 0 and not allow_empty:
                L = 1
        for r in range(L):
            out[i, order[r]] = True


@njit(parallel=True, cache=True)
def _cross_giqs(oob, k_star, lam, regularized, randomized, allow_empty, u, out):
    n, m, C = oob.shape
    for i in prange(n):
        for j in range(m):
            order = np.argsort(-oob[i, j], kind="mergesort")
            uj = u[j] if randomized else 1.0
            before = 0.0
            for r in range(C):
                p = oob[i, j, order[r]]
                uu = 1.0 if (r == 0 and not allow_empty) else uj
                out[i, j, order[r]] = _rank_score(before, uu, p, r + 1, k_star, lam, regularized)
                before = before + p


@njit(parallel=True, cache=True)
def _pvalues(calib, giqs, out):
    n, m, C = giqs.shape
    for j in prange(m):
        for y in range(C):
            cnt = 0
            for i in range(n):
                if calib[i] >= giqs[i, j, y]:
                    cnt += 1
            out[j, y] = cnt / n


def split_sets_kernel(probs, tau: float, params: RapsParams, u=None, threads: int | None = None,
                      regularized: bool = True) -> np.ndarray:
    """Prediction sets for a split-conformal threshold ``tau``.

    Parameters
    ----------
    probs : (n_test, C) array
        Class probabilities, one row per test point.
    tau : float
        Calibrated score threshold; ``inf`` gives full sets.
    params : RapsParams
        Penalty and switches.  ``regularized=False`` skips the penalty entirely
        (plain APS).
    u : (n_test,) array, optional
        Randomization draws, required when ``params.randomized``.

    Returns
    -------
    (n_test, C) bool array
        ``True`` where the class is in the set.  A row keeps the ranks up to the
        first one whose cumulative (penalized) score exceeds ``tau``; when
        randomized, that last rank is dropped if its randomized score exceeds
        ``tau``.
    """
    probs = np.ascontiguousarray(probs, dtype=np.float64)
    if probs.ndim != 2:
        raise errors.BadProbabilityRow("probs must be a 2-d matrix")
    _check_prob_rows(probs, errors.BadProbabilityRow)
    uu = _check_u(u, probs.shape[0], params.randomized)
    out = np.zeros(probs.shape, dtype=np.bool_)
    with thread_limit(threads):
        _split_sets(probs, float(tau), params.k_star, float(params.lambda_star), regularized,
                    params.randomized, params.allow_empty_sets, uu, out)
    return out


def cross_giqs_kernel(oob_probs, params: RapsParams, u=None, threads: int | None = None,
                      regularized: bool = True) -> np.ndarray:
    """Score every class of every test point under every leave-out model.

    ``out[i, j, y]`` is the (penalized) randomized score of class ``y`` for test
    point ``j`` under training point ``i``'s leave-out probabilities.  The draw
    ``u[j]`` is shared across all ``i``; non-randomized scoring uses ``u = 1``,
    and so does the top-ranked class when empty sets are disallowed.
    """
    oob = np.ascontiguousarray(oob_probs, dtype=np.float64)
    if oob.ndim != 3:
        raise errors.BadProbabilitySlice("oob_probs must be a rank-3 tensor")
    _check_prob_rows(oob, errors.BadProbabilitySlice)
    uu = _check_u(u, oob.shape[1], params.randomized)
    out = np.empty(oob.shape, dtype=np.float64)
    with thread_limit(threads):
        _cross_giqs(oob, params.k_star, float(params.lambda_star), regularized, params.randomized,
                    params.allow_empty_sets, uu, out)
    return out


def pvalues_from_giqs(calib_scores, giqs, threads: int | None = None) -> np.ndarray:
    """``p[j, y]``: fraction of calibration scores at least ``giqs[i, j, y]``."""
    calib = np.ascontiguousarray(calib_scores, dtype=np.float64)
    giqs = np.ascontiguousarray(giqs, dtype=np.float64)
    if giqs.ndim != 3 or calib.shape != (giqs.shape[0],):
        raise errors.DimensionMismatch(
            f"{calib.shape[0]} calibration scores vs giqs of shape {giqs.shape}")
    if calib.shape[0] == 0:
        raise errors.NoActiveSamples("no calibration scores")
    out = np.empty(giqs.shape[1:], dtype=np.float64)
    with thread_limit(threads):
        _pvalues(calib, giqs, out)
    return out


def sets_from_pvalues(pvalues: np.ndarray, alpha: float, allow_empty_sets: bool) -> np.ndarray:
    """Keep classes with ``p >= alpha``; an empty row falls back to its max-p class."""
    sets = pvalues >= alpha
    if not allow_empty_sets:
        empty = ~sets.any(axis=1)
        if empty.any():
            rows = np.flatnonzero(empty)
            sets[rows, np.argmax(pvalues[rows], axis=1)] = True
    return sets


# ---------------------------------------------------------------------------
# reference oracles
# ---------------------------------------------------------------------------


def _ref_order(row) -> list[int]:
    return sorted(range(len(row)), key=lambda c: (-row[c], c))


def _ref_score(before: float, u: float, p: float, rank: int, params: RapsParams, regularized: bool) -> float:
    score = before + u * p
    if regularized:
        score = score + params.lambda_star * max(0, rank - params.k_star)
    return score


def reference_split_sets(probs, tau: float, params: RapsParams, u=None, regularized: bool = True) -> np.ndarray:
    probs = [[float(v) for v in row] for row in np.asarray(probs, dtype=np.float64)]
    n = len(probs)
    C = len(probs[0]) if n else 0
    out = np.zeros((n, C), dtype=bool)
    for i in range(n):
        row = probs[i]
        order = _ref_order(row)
        cum = []
        total = 0.0
        for r in range(C):
            total = total + row[order[r]]
            cum.append(total)

        def score(rank, uu):
            before = cum[rank - 2] if rank >= 2 else 0.0
            return _ref_score(before, uu, row[order[rank - 1]], rank, params, regularized)

        L = C
        for rank in range(1, C + 1):
            if score(rank, 1.0) > tau:
                L = rank
                break
        if params.randomized:
            if score(L, float(u[i])) > tau:
                L = L - 1
            if L == 0 and not params.allow_empty_sets:
                L = 1
        for rank in range(1, L + 1):
            out[i, order[rank - 1]] = True
    return out


def reference_cross_giqs(oob_probs, params: RapsParams, u=None, regularized: bool = True) -> np.ndarray:
    oob = np.asarray(oob_probs, dtype=np.float64)
    n, m, C = oob.shape
    out = np.empty((n, m, C), dtype=np.float64)
    for i in range(n):
        for j in range(m):
            row = [float(v) for v in oob[i, j]]
            order = _ref_order(row)
            cum = []
            total = 0.0
            for r in range(C):
                total = total + row[order[r]]
                cum.append(total)
            for rank in range(1, C + 1):
                uu = float(u[j]) if params.randomized else 1.0
                if rank == 1 and not params.allow_empty_sets:
                    uu = 1.0
                before = cum[rank - 2] if rank >= 2 else 0.0
                out[i, j, order[rank - 1]] = _ref_score(before, uu, row[order[rank - 1]], rank,
                                                        params, regularized)
    return out
