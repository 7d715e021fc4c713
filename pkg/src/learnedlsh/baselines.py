"""Exact k-nearest-neighbour search: brute force, KD-tree and ball tree.

All searches here, and the candidate re-ranking in the hashing indexes, go
through :func:`distances` and :func:`rank`, so equal inputs always produce
bit-identical distances and the same (distance, id) ordering.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .vecdata import Dataset

Neighbors = list[tuple[int, float]]

DEFAULT_LEAF_SIZE = 16


def distances(points: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Euclidean distances in float64, one row reduction per point.

    Each row's value depends only on that row and ``q``, not on which other
    rows are passed alongside it.
    """
    diff = np.asarray(points, dtype=np.float64) - np.asarray(q, dtype=np.float64)
    return np.sqrt(np.sum(diff * diff, axis=1))


def rank(ids: np.ndarray, dists: np.ndarray, topk: int) -> Neighbors:
    """Top-k by ascending distance, ties broken by ascending id."""
    order = np.lexsort((ids, dists))[:topk]
    return [(int(ids[i]), float(dists[i])) for i in order]


def _query_vector(q, dim: int) -> np.ndarray:
    q = np.asarray(q, dtype=np.float32)
    if q.shape != (dim,):
        raise ValueError(f"query has shape {q.shape}, expected ({dim},)")
    return q


def _check_topk(topk: int) -> None:
    if topk < 1:
        raise ValueError(f"topk must be positive, got {topk}")


def brute_knn(ds: Dataset, q, topk: int) -> Neighbors:
    _check_topk(topk)
    q = _query_vector(q, ds.dim)
    if ds.n == 0:
        return []
    return rank(ds.ids, distances(ds.points, q), topk)


class _TopK:
    """Running best-k list ordered by (distance, id)."""

    def __init__(self, k: int):
        self.k = k
        self.ids = np.empty(0, dtype=np.int64)
        self.dists = np.empty(0, dtype=np.float64)

    def offer(self, ids: np.ndarray, dists: np.ndarray) -> None:
        ids = np.concatenate([self.ids, ids])
        dists = np.concatenate([self.dists, dists])
        order = np.lexsort((ids, dists))[: self.k]
        self.ids, self.dists = ids[order], dists[order]

    def bound(self) -> float:
        return float(self.dists[-1]) if self.ids.size == self.k else np.inf

    def result(self) -> Neighbors:
        return [(int(i), float(d)) for i, d in zip(self.ids, self.dists)]


@dataclass
class _KdNode:
    rows: np.ndarray | None = None  # leaf only
    axis: int = -1
    threshold: float = 0.0
    left: "_KdNode | None" = None
    right: "_KdNode | None" = None

    @property
    def is_leaf(self) -> bool:
        return self.rows is not None


@dataclass
class KdTree:
    ds: Dataset
    root: _KdNode
    leaf_size: int


def _widest_axis(pts: np.ndarray) -> tuple[int, float]:
    spread = pts.max(axis=0) - pts.min(axis=0)
    axis = int(np.argmax(spread))
    return axis, float(spread[axis])


def build_kdtree(ds: Dataset, leaf_size: int = DEFAULT_LEAF_SIZE) -> KdTree:
    """Split on the widest axis at the median; leaves hold at most ``leaf_size`` rows.

    Rows with a value equal to the threshold may fall on either side; the left
    subtree only holds values <= threshold and the right only values >= it.
    """
    if ds.n < 1:
        raise ValueError("cannot build a tree over an empty dataset")
    if leaf_size < 1:
        raise ValueError("leaf_size must be positive")
    pts = ds.points

    def build(rows: np.ndarray) -> _KdNode:
        if rows.size <= leaf_size:
            return _KdNode(rows=rows)
        axis, spread = _widest_axis(pts[rows])
        if spread == 0.0:
            return _KdNode(rows=rows)  # all points identical
        vals = pts[rows, axis]
        mid = rows.size // 2
        order = np.argpartition(vals, mid)
        return _KdNode(
            axis=axis,
            threshold=float(vals[order[mid]]),
            left=build(rows[order[:mid]]),
            right=build(rows[order[mid:]]),
        )

    return KdTree(ds, build(np.arange(ds.n)), leaf_size)


def query_kdtree(tree: KdTree, q, topk: int) -> Neighbors:
    _check_topk(topk)
    q = _query_vector(q, tree.ds.dim)
    q64 = q.astype(np.float64)
    pts, ids = tree.ds.points, tree.ds.ids
    best = _TopK(topk)

    def visit(node: _KdNode, bound: float) -> None:
        # equal bounds are not pruned: a tie may still win on id
        if bound > best.bound():
            return
        if node.is_leaf:
            best.offer(ids[node.rows], distances(pts[node.rows], q))
            return
        gap = float(q64[node.axis]) - node.threshold
        near, far = (node.left, node.right) if gap <= 0 else (node.right, node.left)
        visit(near, bound)
        visit(far, max(bound, abs(gap)))

    visit(tree.root, 0.0)
    return best.result()


@dataclass
class _BallNode:
    centroid: np.ndarray
    radius: float
    rows: np.ndarray | None = None
    children: tuple["_BallNode", "_BallNode"] | None = None


@dataclass
class BallTree:
    ds: Dataset
    root: _BallNode
    leaf_size: int
    # relative slack on pruning so rounding in the triangle inequality never drops a true neighbour
    slack: float = field(default=1e-9)


def build_balltree(ds: Dataset, leaf_size: int = DEFAULT_LEAF_SIZE) -> BallTree:
    if ds.n < 1:
        raise ValueError("cannot build a tree over an empty dataset")
    if leaf_size < 1:
        raise ValueError("leaf_size must be positive")
    pts = ds.points

    def build(rows: np.ndarray) -> _BallNode:
        sub = pts[rows]
        centroid = sub.astype(np.float64).mean(axis=0)
        radius = float(distances(sub, centroid).max())
        node = _BallNode(centroid, radius)
        if rows.size <= leaf_size:
            node.rows = rows
            return node
        axis, spread = _widest_axis(sub)
        if spread == 0.0:
            node.rows = rows
            return node
        mid = rows.size // 2
        order = np.argpartition(sub[:, axis], mid)
        node.children = (build(rows[order[:mid]]), build(rows[order[mid:]]))
        return node

    return BallTree(ds, build(np.arange(ds.n)), leaf_size)


def query_balltree(tree: BallTree, q, topk: int) -> Neighbors:
    _check_topk(topk)
    q = _query_vector(q, tree.ds.dim)
    pts, ids = tree.ds.points, tree.ds.ids
    best = _TopK(topk)
    slack = tree.slack

    def lower_bound(node: _BallNode) -> float:
        return float(distances(node.centroid[None, :], q)[0]) - node.radius

    def visit(node: _BallNode, bound: float) -> None:
        kth = best.bound()
        if bound > kth + slack * (1.0 + kth):
            return
        if node.rows is not None:
            best.offer(ids[node.rows], distances(pts[node.rows], q))
            return
        a, b = node.children
        la, lb = lower_bound(a), lower_bound(b)
        if lb < la:
            (a, la), (b, lb) = (b, lb), (a, la)
        visit(a, la)
        visit(b, lb)

    visit(tree.root, lower_bound(tree.root))
    return best.result()
