import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conformal_forest import errors
from conformal_forest.scores import (
    RapsParams,
    aps_score,
    calibration_scores,
    raps_score,
    residual_score,
    sort_probs,
    true_label_ranks,
)


def prob_vectors(max_classes=10):
    return st.lists(st.floats(0.0, 1.0), min_size=1, max_size=max_classes).filter(
        lambda v: sum(v) > 1e-3).map(lambda v: np.asarray(v) / np.sum(v))


class TestResidual:
    def test_identity(self):
        assert residual_score(3.0, 3.0) == 0.0

    def test_value(self):
        assert residual_score(1.0, 4.5) == 3.5

    def test_symmetric(self, rng):
        for a, b in rng.normal(size=(100, 2)) * 10:
            assert residual_score(a, b) == residual_score(b, a)

    def test_non_finite(self):
        with pytest.raises(errors.NonFiniteInput):
            residual_score(np.inf, 0.0)


class TestSortProbs:
    def test_example(self):
        sp = sort_probs([0.2, 0.5, 0.3])
        np.testing.assert_array_equal(sp.sorted, [0.5, 0.3, 0.2])
        np.testing.assert_array_equal(sp.perm, [1, 2, 0])
        np.testing.assert_allclose(sp.cumsum, [0.5, 0.8, 1.0])

    def test_uniform_ties_keep_index_order(self):
        np.testing.assert_array_equal(sort_probs([0.25] * 4).perm, [0, 1, 2, 3])

    def test_matches_reference_sort(self, rng):
        for _ in range(50):
            pi = rng.dirichlet(np.ones(10))
            ref = sorted(range(10), key=lambda c: (-pi[c], c))
            np.testing.assert_array_equal(sort_probs(pi).perm, ref)

    @pytest.mark.parametrize("bad", [[0.5, 0.6], [-0.1, 1.1], [np.nan, 1.0]])
    def test_rejects_non_probability(self, bad):
        with pytest.raises(errors.NotAProbabilityVector):
            sort_probs(bad)


class TestAps:
    def test_top_class_u0(self):
        assert aps_score(sort_probs([0.5, 0.3, 0.2]), 0, 0.0) == 0.0

    def test_top_class_u1(self):
        assert aps_score(sort_probs([0.5, 0.3, 0.2]), 0, 1.0) == 0.5

    def test_second_rank_half_u(self):
        assert aps_score(sort_probs([0.5, 0.3, 0.2]), 1, 0.5) == pytest.approx(0.65, abs=1e-15)

    def test_errors(self):
        sp = sort_probs([0.5, 0.5])
        with pytest.raises(errors.ClassOutOfRange):
            aps_score(sp, 2, 0.5)
        with pytest.raises(errors.UOutOfRange):
            aps_score(sp, 0, 1.5)

    @settings(max_examples=200, deadline=None)
    @given(prob_vectors(), st.floats(0, 1), st.floats(0, 1), st.data())
    def test_monotone_in_u_and_bounded(self, pi, u1, u2, data):
        sp = sort_probs(pi)
        y = data.draw(st.integers(0, pi.size - 1))
        lo, hi = sorted((u1, u2))
        a, b = aps_score(sp, y, lo), aps_score(sp, y, hi)
        assert a <= b
        # strict when the increment survives rounding
        if (hi - lo) * sp.sorted[sp.rank_of(y) - 1] > 1e-12:
            assert a < b
        assert -1e-12 <= a <= 1 + 1e-9

    @settings(max_examples=100, deadline=None)
    @given(prob_vectors(), st.floats(0, 1))
    def test_monotone_in_rank(self, pi, u):
        sp = sort_probs(pi)
        by_rank = [aps_score(sp, int(sp.perm[r]), u) for r in range(pi.size)]
        assert all(a <= b for a, b in zip(by_rank, by_rank[1:]))


class TestRaps:
    def test_zero_params_reduce_to_aps(self, rng):
        params = RapsParams(0, 0.0)
        for _ in range(1000):
            C = int(rng.integers(1, 12))
            sp = sort_probs(rng.dirichlet(np.ones(C)))
            y, u = int(rng.integers(C)), float(rng.random())
            assert raps_score(sp, y, u, params) == aps_score(sp, y, u)

    def test_no_penalty_at_or_above_k(self):
        sp = sort_probs([0.5, 0.3, 0.2])
        assert raps_score(sp, 1, 0.3, RapsParams(2, 5.0)) == aps_score(sp, 1, 0.3)

    def test_hand_value(self):
        sp = sort_probs([0.5, 0.3, 0.2])
        assert raps_score(sp, 2, 0.0, RapsParams(1, 0.1)) == pytest.approx(1.0, abs=1e-15)

    @settings(max_examples=100, deadline=None)
    @given(prob_vectors(), st.floats(0, 1), st.integers(0, 10), st.sampled_from([0.0, 0.1, 1.0]), st.data())
    def test_range(self, pi, u, k, lam, data):
        k = min(k, pi.size)
        params = RapsParams(k, lam)
        y = data.draw(st.integers(0, pi.size - 1))
        s = raps_score(sort_probs(pi), y, u, params)
        assert -1e-12 <= s <= params.max_score(pi.size) + 1e-9

    def test_params_validation(self):
        with pytest.raises(errors.ValidationError):
            RapsParams(-1, 0.0)
        with pytest.raises(errors.ValidationError):
            RapsParams(0, -0.5)


class TestCalibrationScores:
    def test_non_randomized_is_cumulative_through_true_class(self):
        probs = np.array([[0.6, 0.3, 0.1], [0.2, 0.2, 0.6]])
        got = calibration_scores(probs, np.array([1, 1]), None, RapsParams(randomized=False), regularized=False)
        np.testing.assert_allclose(got, [0.9, 1.0])

    def test_top_class_uses_unit_u_when_empty_sets_disallowed(self):
        probs = np.array([[0.6, 0.4]])
        u = np.array([0.25])
        allow = calibration_scores(probs, np.array([0]), u, RapsParams(allow_empty_sets=True), False)
        forbid = calibration_scores(probs, np.array([0]), u, RapsParams(allow_empty_sets=False), False)
        assert allow[0] == 0.25 * 0.6 and forbid[0] == 0.6

    def test_true_label_ranks(self):
        probs = np.array([[0.1, 0.6, 0.3], [0.25, 0.25, 0.5]])
        np.testing.assert_array_equal(true_label_ranks(probs, np.array([0, 1])), [3, 3])
