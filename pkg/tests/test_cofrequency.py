import math

import numpy as np
import pytest
from scipy.stats import norm

from builders import two_split_tree, forest_of, hand_tree, planted, recount_from_json
from cofa.cofrequency import (CoFrequencyMatrix, NullDistribution, PairCounts, accumulate_pair_counts,
                              bonferroni_cutoff, cofa_matrix, matrix_from_csv, matrix_to_csv, merge_counts,
                              null_distribution, significance_mask, to_distance)
from cofa.forest import ForestParams, fit_forest


def s_of(tree):
    return CoFrequencyMatrix.from_counts(accumulate_pair_counts(tree), "ABCD").s


class TestPairCounts:
    def test_two_split_tree(self):
        s = s_of(two_split_tree())
        A, B, C, D = range(4)
        assert s[A, B] == 0.5
        assert s[C, D] == 1.0
        assert s[A, C] == 0.0
        assert s[B, D] == 0.0

    def test_two_split_tree_raw_counts(self):
        c = accumulate_pair_counts(two_split_tree())
        assert c.together_total[0, 1] == 2 and c.same[0, 1] == 1
        assert c.together_total[2, 3] == 1 and c.same[2, 3] == 1
        np.testing.assert_array_equal(c.same, c.same.T)
        np.testing.assert_array_equal(np.diag(c.together_total), 0)

    def test_no_target_splits_gives_zeros(self):
        leaf = hand_tree("ABC", [(set(), "ABC", None)])
        c = accumulate_pair_counts(leaf)
        assert not c.same.any() and not c.together_total.any()
        assert np.isnan(CoFrequencyMatrix.from_counts(c, "ABC").s).all()

    def test_absent_levels_contribute_nothing(self):
        t = hand_tree("ABCD", [({"A"}, "AB", (1, 2)), (set(), "A", None), (set(), "B", None)])
        c = accumulate_pair_counts(t)
        assert c.together_total[0, 1] == 1
        assert c.together_total[:, 2:].sum() == 0

    def test_always_together_is_one(self):
        t = hand_tree("ABC", [({"A", "B"}, "ABC", (1, 2)), (set(), "AB", None), (set(), "C", None)])
        f = forest_of(t, t, t)
        s = cofa_matrix(f).s
        assert s[0, 1] == 1.0 and s[0, 2] == 0.0

    def test_merge_order_independent(self):
        rng = np.random.default_rng(0)
        parts = [PairCounts(*(np.triu(rng.integers(0, 5, (4, 4)), 1) for _ in range(2))) for _ in range(6)]
        parts = [PairCounts(p.same + p.same.T, p.together_total + p.together_total.T) for p in parts]
        a = merge_counts(parts)
        b = merge_counts(parts[::-1])
        c = merge_counts(parts[:3]) + merge_counts(parts[3:])
        for other in (b, c):
            np.testing.assert_array_equal(a.same, other.same)
            np.testing.assert_array_equal(a.together_total, other.together_total)

    def test_merge_empty_raises(self):
        with pytest.raises(ValueError):
            merge_counts([])

    @pytest.mark.parametrize("seed", range(10))
    def test_recount_from_serialized_forest(self, seed):
        d = planted(n=800, seed=seed)
        f = fit_forest(d, ForestParams(n_trees=10, complexity=0.0, seed=seed))
        same, together = recount_from_json(f.to_json())
        c = cofa_matrix(f).counts
        np.testing.assert_array_equal(c.same, same)
        np.testing.assert_array_equal(c.together_total, together)


class TestNull:
    def test_requires_two_replicates(self):
        with pytest.raises(ValueError):
            null_distribution(planted(n=200), n_replicates=1)

    def test_deterministic_and_thread_independent(self):
        d = planted(n=600, seed=1)
        p = ForestParams(n_trees=5, seed=3)
        a = null_distribution(d, params=p, n_replicates=6, seed=9)
        b = null_distribution(d, params=p, n_replicates=6, seed=9, n_jobs=3)
        np.testing.assert_array_equal(a.samples, b.samples)
        c = null_distribution(d, params=p, n_replicates=6, seed=10)
        assert not np.array_equal(np.nan_to_num(a.samples), np.nan_to_num(c.samples))

    def test_moments_match_samples(self):
        d = planted(n=600, seed=2)
        null = null_distribution(d, params=ForestParams(n_trees=5, seed=1), n_replicates=8, seed=0)
        x = null.samples[:, 0, 1]
        x = x[~np.isnan(x)]
        assert null.n_defined[0, 1] == len(x)
        assert null.mu[0, 1] == pytest.approx(x.mean(), abs=1e-12)
        assert null.sigma[0, 1] == pytest.approx(x.std(ddof=1), abs=1e-12)

    def test_reuse_forest_seed_changes_only_permutation(self):
        d = planted(n=600, seed=2)
        p = ForestParams(n_trees=5, seed=1)
        a = null_distribution(d, params=p, n_replicates=4, seed=0, reuse_forest_seed=True)
        b = null_distribution(d, params=p, n_replicates=4, seed=0)
        assert not np.array_equal(np.nan_to_num(a.samples), np.nan_to_num(b.samples))

    @pytest.mark.slow
    def test_exchangeable_levels_share_null_mean(self):
        # equal-frequency levels without signal are exchangeable, so every
        # pair has the same null mean (not 0.5: contiguous cuts are not coin flips)
        d = planted(n=1200, n_levels=4, rates=(0.2,), groups=[0, 0, 0, 0], seed=4)
        null = null_distribution(d, params=ForestParams(n_trees=20, complexity=0.0, seed=0),
                                 n_replicates=500, seed=1, keep_samples=False)
        mu = null.mu[np.triu_indices(4, 1)]
        assert np.all(np.abs(mu - mu.mean()) < 0.02)


def fake_null(mu, sigma, names):
    mu, sigma = np.asarray(mu, float), np.asarray(sigma, float)
    return NullDistribution(mu, sigma, np.full(mu.shape, 100), 100, tuple(names))


class TestSignificance:
    def test_bonferroni_34_levels(self):
        n_tests, cutoff = bonferroni_cutoff(34)
        assert n_tests == 561
        assert round(cutoff, 2) == 3.92

    def test_bonferroni_2_levels(self):
        n_tests, cutoff = bonferroni_cutoff(2)
        assert n_tests == 1 and round(cutoff, 2) == 1.96
        assert cutoff == pytest.approx(norm.ppf(0.975), abs=1e-12)

    def test_z_and_flags(self):
        s = np.array([[np.nan, 0.9, 0.5], [0.9, np.nan, np.nan], [0.5, np.nan, np.nan]])
        obs = CoFrequencyMatrix(s, PairCounts.zeros(3), ("a", "b", "c"))
        mu = np.full((3, 3), 0.5)
        sigma = np.full((3, 3), 0.05)
        m = significance_mask(obs, fake_null(mu, sigma, "abc"))
        assert m.z[0, 1] == pytest.approx(8.0)
        assert m.significant[0, 1] and m.significant[1, 0]
        assert m.z[0, 2] == 0 and not m.significant[0, 2]
        assert np.isnan(m.z[1, 2]) and not m.significant[1, 2]
        assert m.n_tests == 3

    def test_zero_sigma_not_significant(self):
        s = np.array([[np.nan, 1.0], [1.0, np.nan]])
        obs = CoFrequencyMatrix(s, PairCounts.zeros(2), ("a", "b"))
        m = significance_mask(obs, fake_null(np.full((2, 2), 0.5), np.zeros((2, 2)), "ab"))
        assert not m.significant.any()

    def test_level_order_mismatch(self):
        obs = CoFrequencyMatrix(np.zeros((2, 2)), PairCounts.zeros(2), ("a", "b"))
        with pytest.raises(ValueError):
            significance_mask(obs, fake_null(np.zeros((2, 2)), np.ones((2, 2)), "ba"))

    def test_distance(self):
        s = np.array([[np.nan, 0.9, 0.2], [0.9, np.nan, 0.4], [0.2, 0.4, np.nan]])
        obs = CoFrequencyMatrix(s, PairCounts.zeros(3), ("a", "b", "c"))
        sig = np.array([[False, True, True], [True, False, False], [True, False, False]])
        m = significance_mask(obs, fake_null(np.full((3, 3), 0.5), np.full((3, 3), 1.0), "abc"))
        m = type(m)(m.z, m.alpha, m.n_tests, m.cutoff, sig)
        d = to_distance(obs, m).d
        assert d[0, 1] == pytest.approx(0.1) and d[0, 2] == pytest.approx(0.8)
        assert d[1, 2] == 0.5
        assert np.all(np.diag(d) == 0) and np.array_equal(d, d.T)
        assert np.all((d >= 0) & (d <= 1))


def test_matrix_csv_round_trip():
    s = np.array([[np.nan, 0.25], [0.25, np.nan]])
    text = matrix_to_csv(s, ("x,1", "y"), comment="stamp")
    back, names = matrix_from_csv(text)
    assert names == ("x,1", "y")
    np.testing.assert_array_equal(np.isnan(back), np.isnan(s))
    assert back[0, 1] == 0.25 and not math.isnan(back[1, 0])
