# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: convolution lowering, fused group norm, 1-D k-means DP."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, INFINITY

cnp.import_array()


def im2col(const double[:, :, :, ::1] xp, int kh, int kw, int stride, int ho, int wo):
    """Lower a padded [N, C, Hp, Wp] array to columns [C*kh*kw, N*ho*wo]."""
    cdef Py_ssize_t n = xp.shape[0], c = xp.shape[1]
    cdef Py_ssize_t L = ho * wo
    cols_arr = np.empty((c * kh * kw, n * L), dtype=np.float64)
    cdef double[:, ::1] cols = cols_arr
    cdef Py_ssize_t b, ch, i, j, oy, ox, row, base, iy
    with nogil:
        for ch in range(c):
            for i in range(kh):
                for j in range(kw):
                    row = (ch * kh + i) * kw + j
                    for b in range(n):
                        base = b * L
                        for oy in range(ho):
                            iy = oy * stride + i
                            for ox in range(wo):
                                cols[row, base + oy * wo + ox] = xp[b, ch, iy, ox * stride + j]
    return cols_arr


def col2im(const double[:, ::1] cols, int n, int c, int hp, int wp,
           int kh, int kw, int stride, int ho, int wo):
    """Scatter-add columns [C*kh*kw, N*ho*wo] back into a padded [N, C, hp, wp] array."""
    out_arr = np.zeros((n, c, hp, wp), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t L = ho * wo
    cdef Py_ssize_t b, ch, i, j, oy, ox, row, base, iy
    with nogil:
        for ch in range(c):
            for i in range(kh):
                for j in range(kw):
                    row = (ch * kh + i) * kw + j
                    for b in range(n):
                        base = b * L
                        for oy in range(ho):
                            iy = oy * stride + i
                            for ox in range(wo):
                                out[b, ch, iy, ox * stride + j] += cols[row, base + oy * wo + ox]
    return out_arr


def group_norm_forward(const double[:, :, :, ::1] x, int groups, double eps):
    """Return (xhat, rstd[N, G]) with xhat normalized per (sample, group)."""
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t cg = c // groups
    cdef Py_ssize_t m = cg * h * w
    out_arr = np.empty((n, c, h, w), dtype=np.float64)
    rstd_arr = np.empty((n, groups), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef double[:, ::1] rstd = rstd_arr
    cdef Py_ssize_t b, g, ch, i, j
    cdef double s, mean, var, d, r
    with nogil:
        for b in range(n):
            for g in range(groups):
                s = 0.0
                for ch in range(g * cg, (g + 1) * cg):
                    for i in range(h):
                        for j in range(w):
                            s = s + x[b, ch, i, j]
                mean = s / m
                var = 0.0
                for ch in range(g * cg, (g + 1) * cg):
                    for i in range(h):
                        for j in range(w):
                            d = x[b, ch, i, j] - mean
                            var = var + d * d
                var = var / m
                r = 1.0 / sqrt(var + eps)
                rstd[b, g] = r
                for ch in range(g * cg, (g + 1) * cg):
                    for i in range(h):
                        for j in range(w):
                            out[b, ch, i, j] = (x[b, ch, i, j] - mean) * r
    return out_arr, rstd_arr


def group_norm_backward(const double[:, :, :, ::1] gy, const double[:, :, :, ::1] xhat,
                        const double[:, ::1] rstd, int groups):
    """Gradient of group norm w.r.t. its input given upstream gradient gy."""
    cdef Py_ssize_t n = gy.shape[0], c = gy.shape[1], h = gy.shape[2], w = gy.shape[3]
    cdef Py_ssize_t cg = c // groups
    cdef Py_ssize_t m = cg * h * w
    gx_arr = np.empty((n, c, h, w), dtype=np.float64)
    cdef double[:, :, :, ::1] gx = gx_arr
    cdef Py_ssize_t b, g, ch, i, j
    cdef double mg, mgx, r
    with nogil:
        for b in range(n):
            for g in range(groups):
                mg = 0.0
                mgx = 0.0
                for ch in range(g * cg, (g + 1) * cg):
                    for i in range(h):
                        for j in range(w):
                            mg = mg + gy[b, ch, i, j]
                            mgx = mgx + gy[b, ch, i, j] * xhat[b, ch, i, j]
                mg = mg / m
                mgx = mgx / m
                r = rstd[b, g]
                for ch in range(g * cg, (g + 1) * cg):
                    for i in range(h):
                        for j in range(w):
                            gx[b, ch, i, j] = r * (gy[b, ch, i, j] - mg - xhat[b, ch, i, j] * mgx)
    return gx_arr


def kmeans_dp_tables(const double[::1] v, int k):
    """Fill the 1-D k-means DP over sorted values.

    Returns (cost[k, n], split[k, n]) where cost[q, i] is the optimal
    within-cluster sum of squares of v[:i+1] in q+1 clusters and split[q, i]
    is the first index of the last cluster.
    """
    cdef Py_ssize_t n = v.shape[0]
    ps_arr = np.zeros(n + 1, dtype=np.float64)
    pq_arr = np.zeros(n + 1, dtype=np.float64)
    cdef double[::1] ps = ps_arr
    cdef double[::1] pq = pq_arr
    cost_arr = np.full((k, n), INFINITY, dtype=np.float64)
    split_arr = np.zeros((k, n), dtype=np.int64)
    cdef double[:, ::1] cost = cost_arr
    cdef cnp.int64_t[:, ::1] split = split_arr
    cdef Py_ssize_t i, j, q
    cdef double s, sq, cnt, c, best
    cdef cnp.int64_t arg
    with nogil:
        for i in range(n):
            ps[i + 1] = ps[i] + v[i]
            pq[i + 1] = pq[i] + v[i] * v[i]
        for i in range(n):
            s = ps[i + 1]
            cost[0, i] = pq[i + 1] - s * s / (i + 1)
            split[0, i] = 0
        for q in range(1, k):
            for i in range(q, n):
                best = INFINITY
                arg = i
                for j in range(q, i + 1):
                    s = ps[i + 1] - ps[j]
                    sq = pq[i + 1] - pq[j]
                    cnt = i - j + 1
                    c = cost[q - 1, j - 1] + sq - s * s / cnt
                    if c < best:
                        best = c
                        arg = j
                cost[q, i] = best
                split[q, i] = arg
    return cost_arr, split_arr
