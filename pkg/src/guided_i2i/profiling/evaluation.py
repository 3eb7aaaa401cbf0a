"""Plate-level evaluation: image metrics plus the feature-based profiling metrics."""

import numpy as np

from ..errors import InputError
from .clustering import select_active_subset
from .features import feature_table, normalize_features, select_features
from .metrics import MetricReport, cpcor, frechet_distance, image_metrics, mtdist, nn_match, ssim


def minmax_unit(stacks_a, stacks_b):
    """Map two [W, C, S, S] stacks to [0, 1] with shared per-channel min/max."""
    both = np.concatenate([stacks_a, stacks_b])
    lo = both.min(axis=(0, 2, 3), keepdims=True)
    span = both.max(axis=(0, 2, 3), keepdims=True) - lo
    span = np.where(span > 0, span, 1.0)
    return (stacks_a - lo) / span, (stacks_b - lo) / span


def paired_groups(wells, perturbation_of, target_of):
    """Map well -> perturbation for perturbations whose target pair is complete."""
    present = {perturbation_of[w] for w in wells}
    members = {}
    for k in present:
        t = target_of.get(k, -1)
        if t is not None and t >= 0:
            members.setdefault(t, []).append(k)
    keep = {k for ks in members.values() if len(ks) == 2 for k in ks}
    return {w: perturbation_of[w] for w in wells if perturbation_of[w] in keep}


def evaluate_wells(pred, truth, perturbation_of, target_of, var_tol=1e-4, corr_tol=0.9, cpcor_axis="column"):
    """Compare predicted and true stacks for a set of wells.

    ``pred`` and ``truth`` map well id -> [C, S, S] arrays over the same wells.
    Features are z-scored within each plate (truth and prediction separately),
    columns are selected on the truth features, and wells are aggregated to
    perturbations by median. Perturbations without a complete target pair are
    left out of nn / mtdist / cpcor. The Frechet distance compares well-level
    feature sets, with predictions standardized by the truth statistics.

    Returns (MetricReport, details dict).
    """
    wells = [w for w in truth if w in pred]
    if len(wells) != len(truth) or len(wells) != len(pred):
        raise InputError("predicted and true wells differ")
    if len(wells) < 2:
        raise InputError("evaluation needs at least two wells")
    p = np.stack([np.asarray(pred[w], dtype=np.float64) for w in wells])
    t = np.stack([np.asarray(truth[w], dtype=np.float64) for w in wells])
    if p.shape != t.shape:
        raise InputError(f"prediction shape {p.shape[1:]} != truth shape {t.shape[1:]}")

    pccs, mses, maes, skipped = [], [], [], 0
    for a, b in zip(p, t):
        try:
            pcc, mse, mae = image_metrics(a, b)
        except InputError:
            skipped += 1
            d = a - b
            mse, mae, pcc = float((d * d).mean()), float(np.abs(d).mean()), None
        if pcc is not None:
            pccs.append(pcc)
        mses.append(mse)
        maes.append(mae)
    pu, tu = minmax_unit(p, t)
    ssims = [ssim(a, b, 1.0) for a, b in zip(pu, tu)]

    raw_t = feature_table(list(t), wells)
    raw_p = feature_table(list(p), wells)
    norm_t = normalize_features(raw_t)
    cols = select_features(norm_t, var_tol, corr_tol).columns
    norm_p = normalize_features(raw_p)

    mu = raw_t.values.mean(axis=0)
    sd = raw_t.values.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    idx = [raw_t.columns.index(c) for c in cols]
    fd = frechet_distance(((raw_t.values - mu) / sd)[:, idx], ((raw_p.values - mu) / sd)[:, idx])

    report = MetricReport(
        pcc=float(np.mean(pccs)) if pccs else None,
        frechet=fd,
        ssim=float(np.mean(ssims)),
        mse=float(np.mean(mses)),
        mae=float(np.mean(maes)),
    )
    groups = paired_groups(wells, perturbation_of, target_of)
    details = {"wells": len(wells), "pcc_skipped": skipped, "features": len(cols), "perturbations": len(set(groups.values()))}
    if groups:
        agg_t = norm_t.select_columns(cols).aggregate(groups)
        agg_p = norm_p.select_columns(cols).aggregate(groups)
        report.nn_matches = nn_match(agg_p, target_of, 1)
        report.nn_top5 = nn_match(agg_p, target_of, 5)
        report.mtdist = mtdist(agg_p, target_of)
        report.cpcor = cpcor(agg_p, agg_t, cpcor_axis)
    return report, details


def active_wells(truth, perturbation_of, labels):
    """Wells whose perturbation is labelled active or partial."""
    keep = {k for k, lab in labels.items() if lab != "inactive"}
    return [w for w in truth if perturbation_of[w] in keep]



def plate_activity(samples, var_tol=1e-4, corr_tol=0.9, d=20, k=3, guard_z=3.0):
    """Active / partial / inactive label per perturbation from a plate's true target images.

    ``samples`` need ``y``, ``well_id``, ``k`` and ``is_control``. Returns the
    (labels, scores) pair of :func:`select_active_subset`.
    """
    wells = [s.well_id for s in samples]
    ft = normalize_features(feature_table([s.y for s in samples], wells))
    ft = select_features(ft, var_tol, corr_tol)
    perturbation_of = {s.well_id: s.k for s in samples}
    dmso = [s.well_id for s in samples if s.is_control]
    return select_active_subset(ft, perturbation_of, dmso, d, k, guard_z)
