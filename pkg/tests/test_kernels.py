import numpy as np
import pytest
from fuzz_cases import kernel_case, random_probs

from conformal_forest import errors
from conformal_forest.kernels import (
    cross_giqs_kernel,
    pvalues_from_giqs,
    reference_cross_giqs,
    reference_split_sets,
    sets_from_pvalues,
    split_sets_kernel,
)
from conformal_forest.scores import RapsParams

NON_RANDOM = RapsParams(0, 0.0, randomized=False, allow_empty_sets=True)


class TestSplitSets:
    def test_max_threshold_gives_full_sets(self, rng):
        params = RapsParams(1, 0.5, randomized=False)
        probs = random_probs(rng, (30, 6))
        assert split_sets_kernel(probs, params.max_score(6), params).all()

    def test_hand_trace(self):
        got = split_sets_kernel(np.array([[0.7, 0.2, 0.1]]), 0.75, NON_RANDOM)
        np.testing.assert_array_equal(got, [[True, True, False]])

    def test_non_randomized_keeps_top_class_at_zero_tau(self):
        got = split_sets_kernel(np.array([[0.7, 0.2, 0.1]]), 0.0, NON_RANDOM)
        np.testing.assert_array_equal(got, [[True, False, False]])

    def test_randomized_can_empty_a_set(self):
        params = RapsParams(0, 0.0, randomized=True, allow_empty_sets=True)
        got = split_sets_kernel(np.array([[0.7, 0.2, 0.1]]), 0.0, params, u=np.array([0.5]))
        assert not got.any()

    def test_empty_sets_disallowed_keeps_top_class(self):
        params = RapsParams(0, 0.0, randomized=True, allow_empty_sets=False)
        got = split_sets_kernel(np.array([[0.2, 0.7, 0.1]]), 0.0, params, u=np.array([0.9]))
        np.testing.assert_array_equal(got, [[False, True, False]])

    @pytest.mark.parametrize("randomized", [False, True])
    def test_matches_reference_on_random_rows(self, rng, randomized):
        for _ in range(200):
            C = int(rng.integers(1, 7))
            params = RapsParams(int(rng.integers(0, 3)), float(rng.choice([0.0, 0.1, 1.0])), randomized,
                                bool(rng.integers(2)))
            probs = random_probs(rng, (1, C), ties=bool(rng.integers(2)))
            u = rng.random(1)
            tau = float(rng.uniform(0, params.max_score(C)))
            np.testing.assert_array_equal(split_sets_kernel(probs, tau, params, u),
                                          reference_split_sets(probs, tau, params, u))

    def test_monotone_in_tau(self, rng):
        probs = random_probs(rng, (50, 5))
        params = RapsParams(1, 0.1, randomized=False)
        prev = split_sets_kernel(probs, 0.0, params)
        for tau in np.linspace(0, params.max_score(5), 25)[1:]:
            cur = split_sets_kernel(probs, tau, params)
            assert np.all(prev <= cur)
            prev = cur

    def test_bad_rows(self):
        with pytest.raises(errors.BadProbabilityRow):
            split_sets_kernel(np.array([[0.5, 0.6]]), 0.5, NON_RANDOM)

    def test_u_validation(self):
        params = RapsParams(randomized=True)
        with pytest.raises(errors.UOutOfRange):
            split_sets_kernel(np.array([[1.0]]), 0.5, params, u=np.array([2.0]))
        with pytest.raises(errors.DimensionMismatch):
            split_sets_kernel(np.array([[1.0]]), 0.5, params, u=np.array([0.1, 0.2]))


class TestCrossGiqs:
    def test_non_randomized_is_cumulative_probability(self, rng):
        oob = random_probs(rng, (4, 3, 5))
        got = cross_giqs_kernel(oob, NON_RANDOM)
        for i in range(4):
            for j in range(3):
                row = oob[i, j]
                order = sorted(range(5), key=lambda c: (-row[c], c))
                np.testing.assert_allclose(got[i, j, order], np.cumsum(row[order]), rtol=0, atol=1e-15)

    def test_single_class(self):
        params = RapsParams(0, 0.0, randomized=True, allow_empty_sets=True)
        u = np.array([0.3, 0.9])
        got = cross_giqs_kernel(np.ones((3, 2, 1)), params, u)
        np.testing.assert_array_equal(got[..., 0], np.tile(u, (3, 1)))
        forbid = RapsParams(0, 0.0, randomized=True, allow_empty_sets=False)
        np.testing.assert_array_equal(cross_giqs_kernel(np.ones((3, 2, 1)), forbid, u), 1.0)

    def test_small_case_matches_reference(self, rng):
        params = RapsParams(1, 0.1, randomized=True)
        oob = random_probs(rng, (5, 3, 4))
        u = rng.random(3)
        np.testing.assert_array_equal(cross_giqs_kernel(oob, params, u), reference_cross_giqs(oob, params, u))

    def test_adversarial_ties(self):
        params = RapsParams(1, 0.1, randomized=True, allow_empty_sets=False)
        oob = np.full((3, 2, 4), 0.25)
        u = np.array([0.4, 0.7])
        np.testing.assert_array_equal(cross_giqs_kernel(oob, params, u), reference_cross_giqs(oob, params, u))
        np.testing.assert_array_equal(split_sets_kernel(oob[0], 0.6, params, u),
                                      reference_split_sets(oob[0], 0.6, params, u))

    def test_bounds(self, rng):
        for seed in range(30):
            _, oob, _, params, u = kernel_case(seed)
            g = cross_giqs_kernel(oob, params, u)
            assert np.all(np.isfinite(g))
            assert g.min() >= 0 and g.max() <= params.max_score(oob.shape[2]) + 1e-12

    def test_bad_slice(self):
        with pytest.raises(errors.BadProbabilitySlice):
            cross_giqs_kernel(np.full((1, 1, 2), 0.7), NON_RANDOM)


class TestFuzz:
    @pytest.mark.parametrize("seed", range(100))
    def test_kernels_equal_references(self, seed, thread_counts):
        probs, oob, tau, params, u = kernel_case(seed)
        want_sets = reference_split_sets(probs, tau, params, u)
        want_giqs = reference_cross_giqs(oob, params, u)
        for t in thread_counts:
            np.testing.assert_array_equal(split_sets_kernel(probs, tau, params, u, threads=t), want_sets)
            np.testing.assert_array_equal(cross_giqs_kernel(oob, params, u, threads=t), want_giqs)


class TestPvalues:
    def test_max_scores_give_one(self, rng):
        params = RapsParams(1, 0.2)
        giqs = cross_giqs_kernel(random_probs(rng, (6, 4, 3)), params, rng.random(4))
        np.testing.assert_array_equal(pvalues_from_giqs(np.full(6, params.max_score(3)), giqs), 1.0)

    def test_zero_scores_give_zero(self):
        np.testing.assert_array_equal(pvalues_from_giqs(np.zeros(3), np.full((3, 2, 2), 0.1)), 0.0)

    def test_direct_count(self):
        giqs = np.full((4, 1, 1), 0.5)
        assert pvalues_from_giqs(np.array([0.2, 0.4, 0.6, 0.8]), giqs)[0, 0] == 0.5

    def test_dimension_mismatch(self):
        with pytest.raises(errors.DimensionMismatch):
            pvalues_from_giqs(np.zeros(3), np.zeros((4, 1, 1)))

    def test_sets_from_pvalues(self):
        p = np.array([[0.01, 0.02, 0.5], [0.03, 0.03, 0.01]])
        np.testing.assert_array_equal(sets_from_pvalues(p, 0.05, True), [[False, False, True], [False] * 3])
        # ties in the fallback go to the lower class index
        np.testing.assert_array_equal(sets_from_pvalues(p, 0.05, False)[1], [True, False, False])

    def test_thread_invariance(self, rng, thread_counts):
        giqs = rng.random((50, 20, 5))
        calib = rng.random(50)
        out = [pvalues_from_giqs(calib, giqs, threads=t) for t in thread_counts]
        for o in out[1:]:
            np.testing.assert_array_equal(o, out[0])
