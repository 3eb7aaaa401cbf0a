"""Morphological feature extraction and feature-table preprocessing."""

import numpy as np
from scipy import ndimage
from skimage.filters import threshold_otsu

from ..errors import InputError
from .table import FeatureTable

CHANNEL_FEATURES = (
    "mean",
    "std",
    "p10",
    "p50",
    "p90",
    "area_fraction",
    "blob_count",
    "grad_mean",
    "radial_moment",
)


def feature_names(n_channels):
    names = [f"c{c}_{f}" for c in range(n_channels) for f in CHANNEL_FEATURES]
    names += [f"corr_c{i}_c{j}" for i in range(n_channels) for j in range(i + 1, n_channels)]
    return names


def _channel_features(img):
    s = img.shape[0]
    mean, std = float(img.mean()), float(img.std())
    p10, p50, p90 = np.percentile(img, [10, 50, 90])
    if std > 0:
        fg = img > threshold_otsu(img)
        area = float(fg.mean())
        _, blobs = ndimage.label(fg)
    else:
        area, blobs = 0.0, 0
    gy, gx = np.gradient(img)
    grad = float(np.hypot(gx, gy).mean())
    w = img - img.min()
    total = w.sum()
    if total > 0:
        yy, xx = np.mgrid[0:s, 0:s] + 0.5 - s / 2
        radial = float((w * np.hypot(xx, yy)).sum() / total / (s / 2))
    else:
        radial = 0.0
    return [mean, std, p10, p50, p90, area, float(blobs), grad, radial]


def extract_features(stack):
    """Feature vector for a [C, S, S] stack: 9 per channel plus pairwise channel correlations.

    Constant channels yield std 0, zero area and zero blobs; correlations with
    a constant channel are 0.
    """
    stack = np.asarray(getattr(stack, "data", stack), dtype=np.float64)
    if stack.ndim != 3 or stack.shape[1] != stack.shape[2]:
        raise InputError(f"expected a [C, S, S] stack, got {stack.shape}")
    feats = []
    for c in range(stack.shape[0]):
        feats.extend(_channel_features(stack[c]))
    flat = stack.reshape(stack.shape[0], -1)
    for i in range(stack.shape[0]):
        for j in range(i + 1, stack.shape[0]):
            a, b = flat[i] - flat[i].mean(), flat[j] - flat[j].mean()
            den = np.sqrt((a * a).sum() * (b * b).sum())
            feats.append(float((a * b).sum() / den) if den > 0 else 0.0)
    return np.array(feats)


def feature_table(stacks, row_ids):
    stacks = list(stacks)
    if not stacks:
        raise InputError("no images to featurize")
    vals = np.stack([extract_features(s) for s in stacks])
    return FeatureTable(list(row_ids), feature_names(np.asarray(stacks[0]).shape[0]), vals)


def normalize_features(table):
    """Z-score every column over all rows; constant columns become zeros and are flagged."""
    if table.values.shape[0] < 2:
        raise InputError("normalization needs at least 2 rows")
    v = table.values
    mean = v.mean(axis=0)
    std = v.std(axis=0)
    const = ~(std > 1e-12 * np.maximum(1.0, np.abs(mean)))
    out = np.where(const, 0.0, (v - mean) / np.where(const, 1.0, std))
    flags = dict(table.flags)
    flags["zero_variance"] = [c for c, f in zip(table.columns, const) if f]
    return type(table)(list(table.rows), list(table.columns), out, flags)


def select_features(table, var_tol=1e-4, corr_tol=0.9):
    """Drop NaN columns, low-variance columns, then the later-named column of every highly correlated pair.

    Columns are visited in name order; a column survives if its |corr| with
    every already-kept column is at most ``corr_tol``.
    """
    if not (0 < var_tol < 1 and 0 < corr_tol < 1):
        raise InputError("tolerances must lie in (0, 1)")
    v = table.values
    keep = [i for i in range(v.shape[1]) if not np.isnan(v[:, i]).any()]
    keep = [i for i in keep if v[:, i].var() >= var_tol]
    kept = []
    for i in sorted(keep, key=lambda i: table.columns[i]):
        ok = True
        for j in kept:
            if abs(np.corrcoef(v[:, i], v[:, j])[0, 1]) > corr_tol:
                ok = False
                break
        if ok:
            kept.append(i)
    if not kept:
        raise InputError("feature selection dropped every column")
    kept.sort()
    return table.select_columns([table.columns[i] for i in kept])
