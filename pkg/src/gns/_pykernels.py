"""Pure numpy implementations of the hot kernels.

Mirrors the interface of the compiled extension (gns._ckernels): same
functions, same semantics, selected by gns.backend when the extension is
unavailable. Tree arrays are produced by gns.graph.build_kdtree and are
identical for both backends; only the traversal/accumulation differs.
"""

import numpy as np

COMPILED = False


def scatter_sum(src, index, out):
    """Accumulates src rows into out rows selected by index (out[i] += src[e])."""
    if src.shape[0] == 0:
        return
    if np.all(index[1:] >= index[:-1]):
        idx = index
        ordered = src
    else:
        order = np.argsort(index, kind="stable")
        idx = index[order]
        ordered = src[order]
    starts = np.concatenate(([0], np.flatnonzero(np.diff(idx)) + 1))
    sums = np.add.reduceat(ordered, starts, axis=0)
    out[idx[starts]] += sums


def _bbox_min_sqdist(bb_min, bb_max, center):
    # squared distance from a point to an axis-aligned box (0 inside)
    d = np.maximum(bb_min - center, 0.0) + np.maximum(center - bb_max, 0.0)
    return float(np.dot(d, d))


def tree_radius_query(split_dim, split_val, left, right, start, end,
                      bb_min, bb_max, perm, points, center, r):
    """Indices of all points within (inclusive) distance r of center."""
    r2 = r * r
    hits = []
    stack = [0]
    while stack:
        node = stack.pop()
        if _bbox_min_sqdist(bb_min[node], bb_max[node], center) > r2:
            continue
        if split_dim[node] < 0:
            cand = perm[start[node]:end[node]]
            diff = points[cand] - center
            keep = np.einsum("ij,ij->i", diff, diff) <= r2
            hits.append(cand[keep])
        else:
            stack.append(left[node])
            stack.append(right[node])
    if not hits:
        return np.empty(0, dtype=np.int64)
    return np.concatenate(hits)


def _bbox_pair_sqdist(amin, amax, bmin, bmax):
    d = np.maximum(bmin - amax, 0.0) + np.maximum(amin - bmax, 0.0)
    return float(np.dot(d, d))


def tree_radius_pairs(split_dim, split_val, left, right, start, end,
                      bb_min, bb_max, perm, points, r):
    """All unordered point pairs (i, j) with i < j and ||p_i - p_j|| <= r.

    Dual descent: for every leaf, candidate points are gathered from all
    leaves whose bounding box comes within r, then filtered by exact
    distance; the i < j condition deduplicates pairs found from both ends.
    """
    r2 = r * r
    leaves = np.flatnonzero(split_dim < 0)
    out_i, out_j = [], []
    for leaf in leaves:
        amin, amax = bb_min[leaf], bb_max[leaf]
        cand = []
        stack = [0]
        while stack:
            node = stack.pop()
            if _bbox_pair_sqdist(amin, amax, bb_min[node], bb_max[node]) > r2:
                continue
            if split_dim[node] < 0:
                cand.append(perm[start[node]:end[node]])
            else:
                stack.append(left[node])
                stack.append(right[node])
        cand = np.concatenate(cand)
        own = perm[start[leaf]:end[leaf]]
        diff = points[own][:, None, :] - points[cand][None, :, :]
        close = np.einsum("abk,abk->ab", diff, diff) <= r2
        ii, jj = np.nonzero(close)
        pi, pj = own[ii], cand[jj]
        keep = pi < pj
        out_i.append(pi[keep])
        out_j.append(pj[keep])
    if not out_i:
        empty = np.empty(0, dtype=np.int64)
        return empty, empty.copy()
    return np.concatenate(out_i), np.concatenate(out_j)
