"""Image-level and feature-level evaluation metrics."""

from dataclasses import asdict, dataclass, fields

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import InputError

SSIM_K1, SSIM_K2 = 0.01, 0.03
SSIM_WINDOW, SSIM_SIGMA = 11, 1.5

CSV_COLUMNS = ("pcc", "fd", "ssim", "mse", "mae", "nn1", "nn5", "mtdist", "cpcor")


@dataclass
class MetricReport:
    pcc: float = None
    frechet: float = None
    ssim: float = None
    mse: float = None
    mae: float = None
    nn_matches: int = None
    nn_top5: int = None
    mtdist: float = None
    cpcor: float = None

    def csv_row(self):
        vals = (self.pcc, self.frechet, self.ssim, self.mse, self.mae, self.nn_matches, self.nn_top5, self.mtdist, self.cpcor)
        return ["" if v is None else repr(v) for v in vals]

    def as_text(self, prefix=""):
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{prefix}{f.name}={'' if v is None else v}")
        return "\n".join(lines)

    def as_dict(self):
        return asdict(self)


def _arr(a):
    return np.asarray(getattr(a, "data", a), dtype=np.float64)


def pearson(a, b):
    a, b = _arr(a).ravel(), _arr(b).ravel()
    a, b = a - a.mean(), b - b.mean()
    den = np.sqrt((a * a).sum() * (b * b).sum())
    if den == 0:
        raise InputError("correlation undefined for zero-variance input")
    return float((a * b).sum() / den)


def image_metrics(pred, truth):
    """(pcc, mse, mae) between two same-shaped images; pcc uses all channels flattened."""
    p, t = _arr(pred), _arr(truth)
    if p.shape != t.shape:
        raise InputError(f"shape mismatch {p.shape} vs {t.shape}")
    d = p - t
    return pearson(p, t), float((d * d).mean()), float(np.abs(d).mean())


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-(ax**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img, g):
    # separable weighted sums over every fully-contained window
    rows = sliding_window_view(img, len(g), axis=0) @ g
    return sliding_window_view(rows, len(g), axis=1) @ g


def ssim(pred, truth, dynamic_range=1.0):
    """Mean single-scale SSIM over valid window positions; [C, S, S] inputs average over channels."""
    p, t = _arr(pred), _arr(truth)
    if p.shape != t.shape:
        raise InputError(f"shape mismatch {p.shape} vs {t.shape}")
    if dynamic_range <= 0:
        raise InputError("dynamic_range must be positive")
    if p.ndim == 3:
        return float(np.mean([ssim(p[c], t[c], dynamic_range) for c in range(p.shape[0])]))
    if min(p.shape) < SSIM_WINDOW:
        raise InputError(f"image {p.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    g = gaussian_window()
    c1, c2 = (SSIM_K1 * dynamic_range) ** 2, (SSIM_K2 * dynamic_range) ** 2
    mu_p, mu_t = _filter_valid(p, g), _filter_valid(t, g)
    spp = _filter_valid(p * p, g) - mu_p**2
    stt = _filter_valid(t * t, g) - mu_t**2
    spt = _filter_valid(p * t, g) - mu_p * mu_t
    num = (2 * mu_p * mu_t + c1) * (2 * spt + c2)
    den = (mu_p**2 + mu_t**2 + c1) * (spp + stt + c2)
    return float((num / den).mean())


def _sqrt_psd(m):
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def frechet_distance(set_a, set_b, ridge=1e-6):
    """Frechet distance between Gaussians fitted to two sets of feature vectors.

    Uses Tr((S_a S_b)^1/2) = Tr((S_a^1/2 S_b S_a^1/2)^1/2) so every square root is
    of a symmetric PSD matrix. Covariances get ``ridge`` on the diagonal when a
    set has no more vectors than dimensions.
    """
    a, b = np.atleast_2d(_arr(set_a)), np.atleast_2d(_arr(set_b))
    if a.size == 0 or b.size == 0:
        raise InputError("frechet_distance needs non-empty sets")
    if a.shape[1] != b.shape[1]:
        raise InputError("feature dimensions differ")
    d = a.shape[1]

    def stats(x):
        mu = x.mean(axis=0)
        cov = np.atleast_2d(np.cov(x, rowvar=False, bias=False)) if len(x) > 1 else np.zeros((d, d))
        if len(x) <= d:
            cov = cov + ridge * np.eye(d)
        return mu, cov

    mu_a, ca = stats(a)
    mu_b, cb = stats(b)
    sa = _sqrt_psd(ca)
    w = np.linalg.eigvalsh(sa @ cb @ sa)
    tr_cross = np.sqrt(np.clip(w, 0, None)).sum()
    diff = mu_a - mu_b
    return float(max(diff @ diff + np.trace(ca) + np.trace(cb) - 2 * tr_cross, 0.0))


def _unit_rows(table):
    v = table.values
    norms = np.linalg.norm(v, axis=1)
    if np.any(norms == 0):
        raise InputError("cosine distance undefined for an all-zero row")
    return v / norms[:, None]


def cosine_distance_matrix(values):
    u = values / np.linalg.norm(values, axis=1, keepdims=True)
    return 1.0 - u @ u.T


def _targets(table, target_of):
    try:
        return [target_of[r] for r in table.rows]
    except KeyError as e:
        raise InputError(f"row {e.args[0]!r} has no target") from None


def nn_match(table, target_of, K=1):
    """Count rows whose K nearest other rows (cosine) include one sharing their target.

    Ties are broken by row order.
    """
    if K < 1:
        raise InputError("K must be >= 1")
    u = _unit_rows(table)
    tg = _targets(table, target_of)
    dist = 1.0 - u @ u.T
    n = len(tg)
    count = 0
    for i in range(n):
        d = dist[i].copy()
        d[i] = np.inf
        order = np.lexsort((np.arange(n), d))[: min(K, n - 1)]
        if any(tg[j] == tg[i] for j in order):
            count += 1
    return count


def mtdist(table, target_of):
    """Mean cosine distance between the two rows of each target pair."""
    u = _unit_rows(table)
    groups = {}
    for i, t in enumerate(_targets(table, target_of)):
        groups.setdefault(t, []).append(i)
    bad = [t for t, idx in groups.items() if len(idx) != 2]
    if bad:
        raise InputError(f"targets without exactly two perturbations: {bad[:5]}")
    dists = [1.0 - float(u[i] @ u[j]) for i, j in groups.values()]
    return float(np.mean(dists))


def cpcor(pred_table, truth_table, axis="column"):
    """Mean Pearson correlation between predicted and true features.

    ``axis="column"`` correlates each feature across rows (perturbations);
    ``axis="row"`` correlates each row across features.
    """
    return cpcor_detail(pred_table, truth_table, axis)[0]


def cpcor_detail(pred_table, truth_table, axis="column"):
    """Like :func:`cpcor` but returns (mean, number of zero-variance vectors skipped)."""
    cols = [c for c in truth_table.columns if c in set(pred_table.columns)]
    if not cols:
        raise InputError("no overlapping feature columns")
    rows = [r for r in truth_table.rows if r in set(pred_table.rows)]
    p = pred_table.select_columns(cols).select_rows(rows).values
    t = truth_table.select_columns(cols).select_rows(rows).values
    if axis == "row":
        p, t = p.T, t.T
    elif axis != "column":
        raise InputError(f"unknown axis {axis!r}")
    cors, skipped = [], 0
    for i in range(p.shape[1]):
        try:
            cors.append(pearson(p[:, i], t[:, i]))
        except InputError:
            skipped += 1
    if not cors:
        raise InputError("every feature had zero variance")
    return float(np.mean(cors)), skipped
