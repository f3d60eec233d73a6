"""Spatial neighbor search and connectivity-graph construction.

The k-d tree is built once per particle configuration (median splits on the
widest axis, leaf capacity 16 by default) and queried for inclusive-radius
neighborhoods. Edge lists are emitted in both directions and sorted by
(receiver, sender) so downstream aggregation order is deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from gns import backend
from gns.errors import DataError, DimensionError

DEFAULT_LEAF_SIZE = 16


@dataclass
class EdgeList:
    """Parallel sender/receiver index lists for directed edges."""

    senders: np.ndarray
    receivers: np.ndarray

    @property
    def n_edges(self) -> int:
        return int(self.senders.shape[0])

    def offset(self, by: int) -> "EdgeList":
        return EdgeList(self.senders + by, self.receivers + by)


def concat_edges(edge_lists, offsets) -> EdgeList:
    """Block-diagonal merge of per-sample edge lists (for batching)."""
    return EdgeList(
        np.concatenate([e.senders + o for e, o in zip(edge_lists, offsets)]),
        np.concatenate([e.receivers + o for e, o in zip(edge_lists, offsets)]),
    )


class KdTree:
    """Flat-array k-d tree over N points in 2 or 3 dimensions.

    Node k splits on split_dim[k] at split_val[k]; leaves (split_dim == -1)
    own the permutation slice perm[start[k]:end[k]]. Bounding boxes are
    tight over the owned points. Immutable after construction.
    """

    def __init__(self, points, leaf_size, split_dim, split_val, left, right,
                 start, end, bb_min, bb_max, perm):
        self.points = points
        self.leaf_size = leaf_size
        self.split_dim = split_dim
        self.split_val = split_val
        self.left = left
        self.right = right
        self.start = start
        self.end = end
        self.bb_min = bb_min
        self.bb_max = bb_max
        self.perm = perm

    @property
    def n_points(self) -> int:
        return int(self.points.shape[0])

    def _arrays(self):
        return (self.split_dim, self.split_val, self.left, self.right,
                self.start, self.end, self.bb_min, self.bb_max, self.perm,
                self.points)

    def query_radius(self, center, r: float) -> np.ndarray:
        """Indices of points within inclusive distance r of center, ascending."""
        center = np.ascontiguousarray(center, dtype=np.float64)
        if self.n_points == 0:
            return np.empty(0, dtype=np.int64)
        hits = backend.tree_radius_query(*self._arrays(), center, float(r))
        return np.sort(hits)


def build_kdtree(points, leaf_size: int = DEFAULT_LEAF_SIZE) -> KdTree:
    """Builds a queryable tree over N x D positions (D in {2, 3})."""
    points = np.ascontiguousarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] not in (2, 3):
        raise DimensionError(f"expected N x D positions with D in {{2,3}}, got {points.shape}")
    bad = np.flatnonzero(~np.isfinite(points).all(axis=1))
    if bad.size:
        raise DataError(f"non-finite coordinate for particle {int(bad[0])}")

    n = points.shape[0]
    perm = np.arange(n, dtype=np.int64)
    split_dim, split_val, left, right, start, end = [], [], [], [], [], []
    bb_min, bb_max = [], []

    def new_node(s, e):
        idx = len(split_dim)
        split_dim.append(-1)
        split_val.append(0.0)
        left.append(-1)
        right.append(-1)
        start.append(s)
        end.append(e)
        chunk = points[perm[s:e]]
        if e > s:
            bb_min.append(chunk.min(axis=0))
            bb_max.append(chunk.max(axis=0))
        else:
            bb_min.append(np.zeros(points.shape[1]))
            bb_max.append(np.zeros(points.shape[1]))
        return idx

    def build(s, e):
        node = new_node(s, e)
        extent = bb_max[node] - bb_min[node]
        if e - s <= leaf_size or extent.max() <= 0.0:
            return node
        dim = int(np.argmax(extent))
        k = (e - s) // 2
        seg = perm[s:e]
        order = np.argpartition(points[seg, dim], k)
        perm[s:e] = seg[order]
        split_dim[node] = dim
        split_val[node] = points[perm[s + k], dim]
        left[node] = build(s, s + k)
        right[node] = build(s + k, e)
        return node

    if n > 0:
        build(0, n)
    else:
        new_node(0, 0)

    return KdTree(
        points=points,
        leaf_size=leaf_size,
        split_dim=np.asarray(split_dim, dtype=np.int32),
        split_val=np.asarray(split_val, dtype=np.float64),
        left=np.asarray(left, dtype=np.int32),
        right=np.asarray(right, dtype=np.int32),
        start=np.asarray(start, dtype=np.int32),
        end=np.asarray(end, dtype=np.int32),
        bb_min=np.ascontiguousarray(bb_min, dtype=np.float64),
        bb_max=np.ascontiguousarray(bb_max, dtype=np.float64),
        perm=perm,
    )


def radius_edges(tree: KdTree, r: float, include_self: bool = False) -> EdgeList:
    """Directed edges between all particle pairs within inclusive distance r.

    Both directions are emitted; output is sorted by (receiver, sender).
    Self-edges are appended only when include_self is set.
    """
    if r <= 0:
        raise DataError(f"connectivity radius must be positive, got {r}")
    n = tree.n_points
    if n == 0:
        empty = np.empty(0, dtype=np.int64)
        return EdgeList(empty, empty.copy())
    i, j = backend.tree_radius_pairs(*tree._arrays(), float(r))
    senders = np.concatenate([i, j])
    receivers = np.concatenate([j, i])
    if include_self:
        loop = np.arange(n, dtype=np.int64)
        senders = np.concatenate([senders, loop])
        receivers = np.concatenate([receivers, loop])
    order = np.lexsort((senders, receivers))
    return EdgeList(senders[order], receivers[order])


def mean_neighbor_count(edges: EdgeList, n: int) -> float:
    """Average in-degree; soft diagnostic for choosing the radius."""
    if n == 0:
        return 0.0
    return edges.n_edges / n
