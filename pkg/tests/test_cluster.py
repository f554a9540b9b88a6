import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.cluster.hierarchy import fcluster, linkage
from scipy.spatial.distance import squareform
from sklearn.metrics import adjusted_rand_score

from cofa.cluster import (ClusterAssignment, Dendrogram, adjusted_rand_index, complete_linkage, cut_tree,
                          export_newick, merge_table_csv, parse_newick)
from cofa.cofrequency import DistanceMatrix


def random_distance(rng, n, grid=None):
    x = rng.random((n, n)) if grid is None else rng.integers(0, grid, (n, n)) / grid
    d = np.triu(x, 1)
    d = d + d.T
    return DistanceMatrix(d, tuple(f"L{i}" for i in range(n)))


def naive_complete(D):
    """O(n^3) complete linkage over explicit member sets."""
    clusters = [frozenset([i]) for i in range(len(D))]
    heights = []
    sets = []
    while len(clusters) > 1:
        best = None
        for a in range(len(clusters)):
            for b in range(a + 1, len(clusters)):
                h = max(D[i, j] for i in clusters[a] for j in clusters[b])
                key = (h, min(clusters[a]), min(clusters[b]))
                if best is None or key < best[0]:
                    best = (key, a, b)
        (h, _, _), a, b = best
        merged = clusters[a] | clusters[b]
        clusters = [c for k, c in enumerate(clusters) if k not in (a, b)] + [merged]
        clusters.sort(key=min)
        heights.append(h)
        sets.append(merged)
    return heights, sets


class TestLinkage:
    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(0)
        for n in range(2, 12):
            for _ in range(10):
                dm = random_distance(rng, n, grid=5)  # coarse grid forces ties
                dg = complete_linkage(dm)
                heights, sets = naive_complete(dm.d)
                assert dg.heights.tolist() == heights
                members = dg.members()
                assert [members[n + k] for k in range(n - 1)] == sets

    def test_heights_match_scipy(self):
        rng = np.random.default_rng(1)
        for n in (3, 8, 20, 34):
            dm = random_distance(rng, n)
            ours = complete_linkage(dm).heights
            ref = linkage(squareform(dm.d), method="complete")[:, 2]
            np.testing.assert_allclose(ours, ref, rtol=0, atol=1e-15)

    def test_heights_non_decreasing(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            h = complete_linkage(random_distance(rng, 15)).heights
            assert np.all(np.diff(h) >= 0)

    def test_all_half_distances_single_height(self):
        d = np.full((5, 5), 0.5)
        np.fill_diagonal(d, 0)
        dg = complete_linkage(DistanceMatrix(d, tuple("abcde")))
        assert np.all(dg.heights == 0.5)

    def test_rejects_asymmetric_and_tiny(self):
        with pytest.raises(ValueError):
            complete_linkage(DistanceMatrix(np.array([[0, 0.1], [0.2, 0]]), ("a", "b")))
        with pytest.raises(ValueError):
            complete_linkage(DistanceMatrix(np.zeros((1, 1)), ("a",)))


class TestCut:
    def test_matches_scipy_fcluster(self):
        rng = np.random.default_rng(3)
        for _ in range(30):
            dm = random_distance(rng, 12)
            dg = complete_linkage(dm)
            Z = linkage(squareform(dm.d), method="complete")
            for k in range(1, 13):
                ours = cut_tree(dg, k).groups
                ref = fcluster(Z, k, criterion="maxclust")
                assert adjusted_rand_score(ours, ref) == pytest.approx(1.0)

    def test_extremes_and_numbering(self):
        dg = complete_linkage(random_distance(np.random.default_rng(4), 6))
        assert set(cut_tree(dg, 1).groups) == {1}
        assert cut_tree(dg, 6).groups == (1, 2, 3, 4, 5, 6)
        a = cut_tree(dg, 3)
        assert a.groups[0] == 1 and len(set(a.groups)) == 3 and a.k == 3
        with pytest.raises(ValueError):
            cut_tree(dg, 0)
        with pytest.raises(ValueError):
            cut_tree(dg, 7)

    def test_assignment_csv_round_trip(self):
        a = ClusterAssignment((1, 2, 1), ("x", "y", "z"), 2)
        b = ClusterAssignment.from_csv(a.to_csv(comment="stamp"))
        assert b == a and a.members(1) == ["x", "z"]


class TestNewick:
    def test_round_trip_random(self):
        rng = np.random.default_rng(5)
        for n in (2, 5, 13):
            dm = random_distance(rng, n)
            dg = complete_linkage(dm)
            text = export_newick(dg)
            back = parse_newick("[cofa config=abc seed=1]\n" + text)
            assert back.clusters() == pytest.approx(dg.clusters())
            assert set(back.level_names) == set(dg.level_names)

    def test_quoted_names(self):
        dg = Dendrogram(((0, 1, 0.25),), ("a b", "it's"))
        text = export_newick(dg)
        assert text == "('a b':0.25,'it''s':0.25);"
        assert parse_newick(text).level_names == ("a b", "it's")

    def test_merge_table(self):
        dg = Dendrogram(((0, 1, 0.1), (2, 3, 0.4)), ("a", "b", "c"))
        rows = merge_table_csv(dg).splitlines()
        assert rows[0] == "step,a,b,height,a_members,b_members"
        assert rows[2] == "1,2,3,0.4,c,a;b"

    def test_non_binary_rejected(self):
        with pytest.raises(ValueError):
            parse_newick("(a:1,b:1,c:1);")


class TestARI:
    @given(st.lists(st.integers(0, 4), min_size=2, max_size=40), st.integers(0, 2**32 - 1))
    @settings(max_examples=200, deadline=None)
    def test_matches_sklearn(self, a, seed):
        b = np.random.default_rng(seed).integers(0, 4, len(a))
        assert adjusted_rand_index(a, b) == pytest.approx(adjusted_rand_score(a, b), abs=1e-12)

    def test_label_names_irrelevant(self):
        assert adjusted_rand_index([1, 1, 2, 2], ["x", "x", "y", "y"]) == 1.0
        assert adjusted_rand_index([1, 1, 1], [1, 1, 1]) == 1.0
