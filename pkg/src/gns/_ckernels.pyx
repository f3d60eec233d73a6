# Compiled hot kernels: scatter-sum accumulation and k-d tree radius
# traversal. Interface mirrors gns._pykernels; gns.backend picks one at
# import time. Tree arrays come from gns.graph.build_kdtree.

import numpy as np

cimport cython
cimport numpy as cnp

cnp.import_array()

ctypedef cnp.int64_t i64
ctypedef cnp.int32_t i32

ctypedef fused floating:
    float
    double

COMPILED = True

DEF MAX_DEPTH = 96  # median splits keep depth ~log2(N); 96 covers any realistic N


def scatter_sum(floating[:, ::1] src, i64[::1] index, floating[:, ::1] out):
    """Accumulates src rows into out rows selected by index (out[i] += src[e])."""
    cdef Py_ssize_t e, k
    cdef Py_ssize_t n_rows = src.shape[0]
    cdef Py_ssize_t width = src.shape[1]
    cdef i64 i
    for e in range(n_rows):
        i = index[e]
        for k in range(width):
            out[i, k] += src[e, k]


cdef inline double _box_point_sqdist(double[:, ::1] bb_min, double[:, ::1] bb_max,
                                     Py_ssize_t node, double* center,
                                     Py_ssize_t dims) nogil:
    cdef double acc = 0.0, d
    cdef Py_ssize_t k
    for k in range(dims):
        d = 0.0
        if center[k] < bb_min[node, k]:
            d = bb_min[node, k] - center[k]
        elif center[k] > bb_max[node, k]:
            d = center[k] - bb_max[node, k]
        acc += d * d
    return acc


def tree_radius_query(i32[::1] split_dim, double[::1] split_val, i32[::1] left,
                      i32[::1] right, i32[::1] start, i32[::1] end,
                      double[:, ::1] bb_min, double[:, ::1] bb_max,
                      i64[::1] perm, double[:, ::1] points,
                      double[::1] center, double r):
    """Indices of all points within (inclusive) distance r of center."""
    cdef Py_ssize_t dims = points.shape[1]
    cdef double r2 = r * r
    cdef double c[8]
    cdef Py_ssize_t k
    for k in range(dims):
        c[k] = center[k]

    out = np.empty(points.shape[0], dtype=np.int64)
    cdef i64[::1] out_v = out
    cdef Py_ssize_t n_out = 0

    cdef i32 stack[MAX_DEPTH]
    cdef int top = 0
    cdef i32 node
    cdef Py_ssize_t p
    cdef i64 pt
    cdef double acc, d
    stack[0] = 0
    top = 1
    while top > 0:
        top -= 1
        node = stack[top]
        if _box_point_sqdist(bb_min, bb_max, node, c, dims) > r2:
            continue
        if split_dim[node] < 0:
            for p in range(start[node], end[node]):
                pt = perm[p]
                acc = 0.0
                for k in range(dims):
                    d = points[pt, k] - c[k]
                    acc += d * d
                if acc <= r2:
                    out_v[n_out] = pt
                    n_out += 1
        else:
            stack[top] = left[node]
            stack[top + 1] = right[node]
            top += 2
    return out[:n_out]


def tree_radius_pairs(i32[::1] split_dim, double[::1] split_val, i32[::1] left,
                      i32[::1] right, i32[::1] start, i32[::1] end,
                      double[:, ::1] bb_min, double[:, ::1] bb_max,
                      i64[::1] perm, double[:, ::1] points, double r):
    """All unordered point pairs (i, j) with i < j and ||p_i - p_j|| <= r."""
    cdef Py_ssize_t n_points = points.shape[0]
    cdef Py_ssize_t dims = points.shape[1]
    cdef double r2 = r * r
    cdef double c[8]

    cdef Py_ssize_t cap = 4 * n_points + 16
    out_i = np.empty(cap, dtype=np.int64)
    out_j = np.empty(cap, dtype=np.int64)
    cdef i64[::1] iv = out_i
    cdef i64[::1] jv = out_j
    cdef Py_ssize_t n_out = 0

    cdef i32 stack[MAX_DEPTH]
    cdef int top
    cdef i32 node
    cdef Py_ssize_t i, p, k
    cdef i64 pt
    cdef double acc, d

    for i in range(n_points):
        for k in range(dims):
            c[k] = points[i, k]
        stack[0] = 0
        top = 1
        while top > 0:
            top -= 1
            node = stack[top]
            if _box_point_sqdist(bb_min, bb_max, node, c, dims) > r2:
                continue
            if split_dim[node] < 0:
                for p in range(start[node], end[node]):
                    pt = perm[p]
                    if pt <= i:
                        continue
                    acc = 0.0
                    for k in range(dims):
                        d = points[pt, k] - c[k]
                        acc += d * d
                    if acc <= r2:
                        if n_out == cap:
                            cap = cap * 2
                            out_i = np.resize(out_i, cap)
                            out_j = np.resize(out_j, cap)
                            iv = out_i
                            jv = out_j
                        iv[n_out] = i
                        jv[n_out] = pt
                        n_out += 1
            else:
                stack[top] = left[node]
                stack[top + 1] = right[node]
                top += 2
    return out_i[:n_out], out_j[:n_out]
