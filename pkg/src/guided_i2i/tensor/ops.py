"""Differentiable tensor operations.

Every function takes :class:`Tensor` (or array-like constants) and returns a
new Tensor, recording a backward closure on the active tape when needed.
Convolution is cross-correlation (no kernel flip).
"""

import numpy as np
from scipy.special import expit

from ..errors import ConfigError, DimensionError, InputError
from . import kernels
from .core import Tensor, make_output

GN_EPS = 1e-5


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a, b, what):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{what}: cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return make_output(
        a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add"
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return make_output(
        a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub"
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return make_output(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
        "mul",
    )


def scale(a, c):
    c = float(c)
    return make_output(a.data * c, (a,), lambda g: (g * c,), "scale")


def square(a):
    d = a.data
    return make_output(d * d, (a,), lambda g: (2.0 * d * g,), "square")


def absolute(a):
    d = a.data
    return make_output(np.abs(d), (a,), lambda g: (np.sign(d) * g,), "abs")


def silu(a):
    d = a.data
    sig = expit(d)
    out = d * sig
    return make_output(out, (a,), lambda g: (g * (sig * (1.0 + d * (1.0 - sig))),), "silu")


# ---------------------------------------------------------------- reductions / shape


def sum(a):  # noqa: A001
    shape = a.shape
    return make_output(np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean(a):
    shape, n = a.shape, a.size
    return make_output(
        np.array(a.data.mean()), (a,), lambda g: (np.full(shape, float(g) / n),), "mean"
    )


def reshape(a, shape):
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {old} to {shape}") from None
    return make_output(out, (a,), lambda g: (g.reshape(old),), "reshape")


def concat(tensors, axis=1):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise DimensionError(f"concat: {e}") from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g):
        idx = [slice(None)] * g.ndim
        res = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            res.append(g[tuple(idx)])
        return res

    return make_output(out, tuple(tensors), bw, "concat")


def slice_cols(a, start, stop):
    """Columns ``start:stop`` of a 2-D tensor."""
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return make_output(a.data[:, start:stop].copy(), (a,), bw, "slice_cols")


# ---------------------------------------------------------------- layers


def dense(x, weight, bias):
    """Affine map ``x @ weight + bias`` for x of shape [N, D]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(f"dense: input {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise DimensionError(f"dense: bias {bias.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    return make_output(
        xd @ wd + bias.data,
        (x, weight, bias),
        lambda g: (g @ wd.T, xd.T @ g, g.sum(axis=0)),
        "dense",
    )


def conv2d(x, kernel, bias, stride=1, pad=0):
    """2-D cross-correlation of x[N, C, H, W] with kernel[F, C, kh, kw]."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d: expected 4-D input and kernel, got {x.shape}, {kernel.shape}")
    n, c, h, w = x.shape
    f, kc, kh, kw = kernel.shape
    if kc != c:
        raise DimensionError(f"conv2d: input has {c} channels, kernel expects {kc}")
    if bias is not None and bias.shape != (f,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({f},)")
    if stride not in (1, 2):
        raise ConfigError(f"conv2d: stride must be 1 or 2, got {stride}")
    hp, wp = h + 2 * pad, w + 2 * pad
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else np.ascontiguousarray(x.data)
    cols = kernels.im2col(xp, kh, kw, stride, ho, wo)
    wmat = kernel.data.reshape(f, -1)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(f, n, ho, wo).transpose(1, 0, 2, 3))

    def bw(g):
        gm = g.transpose(1, 0, 2, 3).reshape(f, -1)
        gk = (gm @ cols.T).reshape(kernel.shape)
        gcols = np.ascontiguousarray(wmat.T @ gm)
        gxp = kernels.col2im(gcols, n, c, hp, wp, kh, kw, stride, ho, wo)
        gx = gxp[:, :, pad : pad + h, pad : pad + w] if pad else gxp
        gb = gm.sum(axis=1) if bias is not None else None
        return (np.ascontiguousarray(gx), gk, gb)

    inputs = (x, kernel, bias) if bias is not None else (x, kernel, Tensor._wrap(np.zeros(f)))
    return make_output(out, inputs, bw, "conv2d")


def group_norm(x, groups, eps=GN_EPS):
    """Normalize each (sample, channel group) to zero mean and unit variance."""
    if x.ndim != 4:
        raise DimensionError(f"group_norm: expected [N, C, H, W], got {x.shape}")
    if groups < 1 or x.shape[1] % groups:
        raise ConfigError(f"group_norm: {x.shape[1]} channels not divisible by {groups} groups")
    if eps <= 0:
        raise ConfigError("group_norm: eps must be positive")
    xhat, rstd = kernels.group_norm_forward(np.ascontiguousarray(x.data), groups, eps)
    return make_output(
        xhat,
        (x,),
        lambda g: (kernels.group_norm_backward(np.ascontiguousarray(g), xhat, rstd, groups),),
        "group_norm",
    )


def channel_affine(x, scale_, shift):
    """``scale[n, c] * x[n, c, :, :] + shift[n, c]``."""
    n, c = x.shape[:2]
    if scale_.shape != (n, c) or shift.shape != (n, c):
        raise DimensionError(
            f"channel_affine: scale {scale_.shape}/shift {shift.shape} must be ({n}, {c})"
        )
    xd, sd = x.data, scale_.data[:, :, None, None]
    out = xd * sd + shift.data[:, :, None, None]
    return make_output(
        out,
        (x, scale_, shift),
        lambda g: (g * sd, (g * xd).sum(axis=(2, 3)), g.sum(axis=(2, 3))),
        "channel_affine",
    )


def avg_pool2(x):
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"avg_pool2: spatial size {h}x{w} must be even")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def bw(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,)

    return make_output(out, (x,), bw, "avg_pool2")


def upsample2(x):
    """Nearest-neighbour 2x upsampling."""
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    return make_output(
        out, (x,), lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),), "upsample2"
    )


def global_avg_pool(x):
    n, c, h, w = x.shape
    return make_output(
        x.data.mean(axis=(2, 3)),
        (x,),
        lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),),
        "global_avg_pool",
    )


def embedding(table, index, null_mask=None):
    """Gather rows ``table[index]``; rows where ``null_mask`` is True are zero.

    Masked rows never receive gradient, so a reserved null label stays inert.
    """
    index = np.asarray(index, dtype=np.int64)
    rows = table.shape[0]
    if index.ndim != 1:
        raise DimensionError("embedding: index must be 1-D")
    if null_mask is None:
        null_mask = np.zeros(index.shape, dtype=bool)
    live = ~null_mask
    if np.any((index[live] < 0) | (index[live] >= rows)):
        raise InputError(f"embedding: label out of range [0, {rows})")
    safe = np.where(live, index, 0)
    out = table.data[safe] * live[:, None]

    def bw(g):
        gt = np.zeros(table.shape)
        np.add.at(gt, safe[live], g[live])
        return (gt,)

    return make_output(out, (table,), bw, "embedding")


def log_softmax(x):
    """Row-wise log-softmax of a [N, K] tensor."""
    d = x.data
    m = d.max(axis=1, keepdims=True)
    z = d - m
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return make_output(
        out, (x,), lambda g: (g - p * g.sum(axis=1, keepdims=True),), "log_softmax"
    )


def pick(x, index):
    """``x[n, index[n]]`` for a [N, K] tensor, giving shape [N]."""
    index = np.asarray(index, dtype=np.int64)
    n, k = x.shape
    if index.shape != (n,) or np.any((index < 0) | (index >= k)):
        raise InputError(f"pick: labels must be {n} integers in [0, {k})")
    rows = np.arange(n)

    def bw(g):
        full = np.zeros((n, k))
        full[rows, index] = g
        return (full,)

    return make_output(x.data[rows, index].copy(), (x,), bw, "pick")
