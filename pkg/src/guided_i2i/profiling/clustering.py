"""PCA projection, optimal 1-D k-means, and active-subset selection."""

import numpy as np

from ..errors import ConfigError, InputError
from ..tensor import kernels
from .metrics import cosine_distance_matrix
from .table import FeatureTable


def pca_project(table, d):
    """Project mean-centred rows onto the top-``d`` covariance eigenvectors.

    Each component's sign is fixed so its largest-magnitude loading is
    positive. Returns (projected table, explained variance per component).
    """
    n, m = table.values.shape
    if not 1 <= d <= min(n - 1, m):
        raise ConfigError(f"d={d} must lie in [1, min(rows-1, columns)] = [1, {min(n - 1, m)}]")
    x = table.values - table.values.mean(axis=0)
    cov = x.T @ x / (n - 1)
    w, v = np.linalg.eigh(cov)
    order = np.argsort(w)[::-1][:d]
    w, v = w[order], v[:, order]
    flip = np.sign(v[np.abs(v).argmax(axis=0), np.arange(d)])
    v = v * np.where(flip == 0, 1.0, flip)
    proj = FeatureTable(list(table.rows), [f"pc{i + 1}" for i in range(d)], x @ v)
    return proj, np.clip(w, 0, None)


def kmeans_1d_dp(values, k):
    """Globally optimal 1-D k-means by dynamic programming over sorted values.

    Returns (labels aligned with ``values``, cluster means ascending). Clusters
    are contiguous in sorted order and numbered from the smallest mean.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    if k < 1:
        raise InputError("k must be >= 1")
    if k > len(np.unique(v)):
        raise InputError(f"k={k} exceeds the {len(np.unique(v))} distinct values")
    order = np.argsort(v, kind="stable")
    sv = np.ascontiguousarray(v[order])
    _, split = kernels.kmeans_dp_tables(sv, k)
    bounds = []
    end = len(sv) - 1
    for q in range(k - 1, -1, -1):
        start = int(split[q, end])
        bounds.append((start, end))
        end = start - 1
    bounds.reverse()
    labels_sorted = np.empty(len(sv), dtype=np.int64)
    means = np.empty(k)
    for c, (lo, hi) in enumerate(bounds):
        labels_sorted[lo : hi + 1] = c
        means[c] = sv[lo : hi + 1].mean()
    labels = np.empty_like(labels_sorted)
    labels[order] = labels_sorted
    return labels, means


def within_ss(values, labels):
    v = np.asarray(values, dtype=np.float64)
    return float(sum(((v[labels == c] - v[labels == c].mean()) ** 2).sum() for c in np.unique(labels)))


ACTIVE, PARTIAL, INACTIVE = "active", "partial", "inactive"


def dmso_scores(projected, dmso_wells):
    """Mean cosine distance of every row to the DMSO rows (a DMSO row skips itself)."""
    idx = projected.row_index()
    missing = [w for w in dmso_wells if w not in idx]
    if missing or not dmso_wells:
        raise InputError(f"DMSO wells missing from table: {missing[:5]}")
    dist = cosine_distance_matrix(projected.values)
    cols = np.array([idx[w] for w in dmso_wells])
    scores = {}
    for r, i in idx.items():
        others = cols[cols != i]
        scores[r] = float(dist[i, others].mean()) if len(others) else 0.0
    return scores


def select_active_subset(features, perturbation_of, dmso_wells, d=20, k=3, guard_z=3.0):
    """Label each perturbation active / partial / inactive from ground-truth well features.

    Wells are projected to the top-``d`` principal components, scored by mean
    cosine distance to the DMSO wells, averaged over replicates, and split into
    ``k`` clusters by optimal 1-D k-means (highest mean = active, lowest =
    inactive). A perturbation keeps a non-inactive label only if its score
    clears the DMSO score distribution by ``guard_z`` standard deviations, so a
    null plate selects (almost) nothing.

    Returns (labels dict, scores dict).
    """
    rank = np.linalg.matrix_rank(features.values - features.values.mean(axis=0))
    d = max(1, min(d, rank, features.values.shape[0] - 1, features.values.shape[1]))
    proj, _ = pca_project(features, d)
    well_score = dmso_scores(proj, list(dmso_wells))
    per = {}
    for w, p in perturbation_of.items():
        if w in well_score and w not in set(dmso_wells):
            per.setdefault(p, []).append(well_score[w])
    perts = list(per)
    scores = np.array([np.mean(per[p]) for p in perts])
    if len(np.unique(scores)) < k:
        raise InputError(f"fewer than k={k} distinct scores; cannot cluster")
    labels, means = kmeans_1d_dp(scores, k)
    names = {0: INACTIVE, k - 1: ACTIVE}
    ctrl = np.array([well_score[w] for w in dmso_wells])
    threshold = ctrl.mean() + guard_z * ctrl.std(ddof=1 if len(ctrl) > 1 else 0)
    out = {}
    for p, lab, s in zip(perts, labels, scores):
        name = names.get(int(lab), PARTIAL)
        out[p] = name if s > threshold else INACTIVE
    return out, dict(zip(perts, scores.tolist()))
