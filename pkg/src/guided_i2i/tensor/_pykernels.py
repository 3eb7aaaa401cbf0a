"""Pure numpy / Python versions of the compiled kernels.

Same signatures and semantics as ``_ckernels``; used when the extension is not
built or when ``GI2I_PURE_PYTHON=1`` is set.
"""

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(xp, kh, kw, stride, ho, wo):
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # [N, C, ho, wo, kh, kw] -> [C, kh, kw, N, ho, wo]
    return np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(c * kh * kw, n * ho * wo)


def col2im(cols, n, c, hp, wp, kh, kw, stride, ho, wo):
    out = np.zeros((n, c, hp, wp))
    blocks = cols.reshape(c, kh, kw, n, ho, wo).transpose(3, 0, 1, 2, 4, 5)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += blocks[
                :, :, i, j
            ]
    return out


def group_norm_forward(x, groups, eps):
    n, c, h, w = x.shape
    xg = x.reshape(n, groups, -1)
    mean = xg.mean(axis=2, keepdims=True)
    var = ((xg - mean) ** 2).mean(axis=2, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    return ((xg - mean) * rstd).reshape(n, c, h, w), rstd[:, :, 0]


def group_norm_backward(gy, xhat, rstd, groups):
    n, c, h, w = gy.shape
    g = gy.reshape(n, groups, -1)
    xh = xhat.reshape(n, groups, -1)
    mg = g.mean(axis=2, keepdims=True)
    mgx = (g * xh).mean(axis=2, keepdims=True)
    return (rstd[:, :, None] * (g - mg - xh * mgx)).reshape(n, c, h, w)


def kmeans_dp_tables(v, k):
    n = len(v)
    ps = [0.0] * (n + 1)
    pq = [0.0] * (n + 1)
    for i in range(n):
        ps[i + 1] = ps[i] + v[i]
        pq[i + 1] = pq[i] + v[i] * v[i]
    cost = [[math.inf] * n for _ in range(k)]
    split = [[0] * n for _ in range(k)]
    for i in range(n):
        s = ps[i + 1]
        cost[0][i] = pq[i + 1] - s * s / (i + 1)
    for q in range(1, k):
        prev, row, srow = cost[q - 1], cost[q], split[q]
        for i in range(q, n):
            best, arg = math.inf, i
            for j in range(q, i + 1):
                s = ps[i + 1] - ps[j]
                c = prev[j - 1] + (pq[i + 1] - pq[j]) - s * s / (i - j + 1)
                if c < best:
                    best, arg = c, j
            row[i] = best
            srow[i] = arg
    return np.array(cost, dtype=np.float64), np.array(split, dtype=np.int64)
