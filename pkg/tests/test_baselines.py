import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from learnedlsh.baselines import (
    brute_knn,
    build_balltree,
    build_kdtree,
    distances,
    query_balltree,
    query_kdtree,
)
from learnedlsh.vecdata import Dataset, DatasetSpec, generate


def python_knn(points, q, k):
    # independent oracle: sort (distance, id) pairs by hand
    q = np.asarray(q, np.float32).astype(np.float64)
    pairs = [(float(np.sqrt(np.sum((p.astype(np.float64) - q) ** 2))), i) for i, p in enumerate(points)]
    return [(i, d) for d, i in sorted(pairs)[:k]]


class TestBrute:
    def test_hand_example(self):
        ds = Dataset.from_points(np.array([[0.0], [1.0], [3.0]]))
        res = brute_knn(ds, [0.9], 2)
        assert [i for i, _ in res] == [1, 0]
        np.testing.assert_allclose([d for _, d in res], [0.1, 0.9], rtol=1e-6)

    def test_self_first(self):
        ds = generate(DatasetSpec("normal", 100, 5, seed=1))
        assert brute_knn(ds, ds.points[42], 3)[0] == (42, 0.0)

    def test_topk_exceeding_n(self):
        ds = generate(DatasetSpec("uniform", 7, 2))
        res = brute_knn(ds, np.zeros(2), 50)
        assert sorted(i for i, _ in res) == list(range(7))
        assert [d for _, d in res] == sorted(d for _, d in res)

    def test_ties_broken_by_id(self):
        ds = Dataset(np.array([[1.0], [-1.0], [1.0]]), [9, 4, 2])
        assert [i for i, _ in brute_knn(ds, [0.0], 3)] == [2, 4, 9]

    def test_matches_python_oracle(self):
        ds = generate(DatasetSpec("lognormal", 300, 6, seed=2))
        q = np.random.default_rng(0).lognormal(size=6)
        assert brute_knn(ds, q, 15) == python_knn(ds.points, q, 15)

    def test_errors(self):
        ds = Dataset.from_points(np.zeros((3, 2)))
        with pytest.raises(ValueError):
            brute_knn(ds, np.zeros(3), 1)
        with pytest.raises(ValueError):
            brute_knn(ds, np.zeros(2), 0)

    def test_distances_do_not_depend_on_batch(self):
        rng = np.random.default_rng(3)
        pts = rng.normal(size=(50, 33)).astype(np.float32)
        q = rng.normal(size=33).astype(np.float32)
        full = distances(pts, q)
        for i in range(50):
            assert distances(pts[i : i + 1], q)[0] == full[i]


@pytest.mark.parametrize("build,search", [(build_kdtree, query_kdtree), (build_balltree, query_balltree)])
class TestTrees:
    def test_matches_brute(self, build, search):
        ds = generate(DatasetSpec("normal", 2000, 10, seed=4))
        tree = build(ds)
        queries = generate(DatasetSpec("normal", 100, 10, seed=5)).points
        for q in queries:
            assert search(tree, q, 10) == brute_knn(ds, q, 10)

    def test_single_point(self, build, search):
        ds = Dataset(np.array([[3.0, 4.0]]), [17])
        tree = build(ds)
        assert search(tree, [0.0, 0.0], 5) == [(17, 5.0)]

    def test_duplicates_come_first(self, build, search):
        rng = np.random.default_rng(6)
        pts = rng.uniform(size=(300, 3))
        pts[[10, 200]] = [0.5, 0.5, 0.5]
        ds = Dataset.from_points(pts)
        res = search(build(ds, leaf_size=4), np.array([0.5, 0.5, 0.5]), 3)
        assert [i for i, _ in res[:2]] == [10, 200]
        assert res[2][1] > 0.0

    def test_all_identical_points(self, build, search):
        ds = Dataset.from_points(np.ones((100, 4)))
        res = search(build(ds, leaf_size=2), np.zeros(4), 5)
        assert res == [(i, 2.0) for i in range(5)]

    def test_leaf_size_n_is_brute(self, build, search):
        ds = generate(DatasetSpec("uniform", 64, 3, seed=7))
        tree = build(ds, leaf_size=64)
        q = np.full(3, 0.3)
        assert search(tree, q, 8) == brute_knn(ds, q, 8)

    def test_grid_ties(self, build, search):
        g = np.stack(np.meshgrid(np.arange(6), np.arange(6)), -1).reshape(-1, 2).astype(np.float32)
        ds = Dataset.from_points(g)
        tree = build(ds, leaf_size=3)
        for q in [[2.5, 2.5], [0.0, 0.0], [3.0, 2.5]]:
            assert search(tree, q, 7) == brute_knn(ds, q, 7)

    def test_errors(self, build, search):
        with pytest.raises(ValueError):
            build(Dataset(np.zeros((0, 2), np.float32), []))
        tree = build(Dataset.from_points(np.zeros((3, 2))))
        with pytest.raises(ValueError):
            search(tree, np.zeros(3), 1)
        with pytest.raises(ValueError):
            search(tree, np.zeros(2), 0)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32), st.integers(1, 400), st.integers(1, 8), st.integers(1, 20), st.integers(1, 12))
    def test_exactness_property(self, build, search, seed, n, d, k, leaf):
        rng = np.random.default_rng(seed)
        # coarse values make ties common
        ds = Dataset.from_points(np.round(rng.normal(size=(n, d)), 1))
        tree = build(ds, leaf_size=leaf)
        for q in np.round(rng.normal(size=(5, d)), 1):
            assert search(tree, q, k) == brute_knn(ds, q, k)


class TestTreeStructure:
    def test_kd_leaves_partition(self):
        ds = generate(DatasetSpec("uniform", 500, 4, seed=8))
        tree = build_kdtree(ds, leaf_size=10)
        rows = []

        def walk(node, lo, hi):
            if node.is_leaf:
                assert node.rows.size <= 10
                pts = ds.points[node.rows]
                assert np.all(pts >= lo) and np.all(pts <= hi)
                rows.extend(node.rows.tolist())
                return
            left_hi, right_lo = hi.copy(), lo.copy()
            left_hi[node.axis] = min(hi[node.axis], node.threshold)
            right_lo[node.axis] = max(lo[node.axis], node.threshold)
            walk(node.left, lo, left_hi)
            walk(node.right, right_lo, hi)

        walk(tree.root, np.full(4, -np.inf), np.full(4, np.inf))
        assert sorted(rows) == list(range(500))

    def test_ball_radius_covers_points(self):
        ds = generate(DatasetSpec("normal", 400, 5, seed=9))
        tree = build_balltree(ds, leaf_size=8)

        def rows_of(node):
            if node.rows is not None:
                return node.rows.tolist()
            return rows_of(node.children[0]) + rows_of(node.children[1])

        def walk(node):
            rows = rows_of(node)
            assert distances(ds.points[rows], node.centroid).max() <= node.radius
            if node.children:
                walk(node.children[0])
                walk(node.children[1])

        walk(tree.root)
        assert sorted(rows_of(tree.root)) == list(range(400))
