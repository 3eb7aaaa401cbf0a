"""Synthetic paired-image plates with perturbation labels and known actives.

Each perturbation has a phenotype (cell density, blob radius, texture
frequency, channel-intensity ratios). Perturbations come in pairs sharing a
target; active targets move the phenotype away from the DMSO control along a
target-specific direction, with a small per-perturbation jitter. Texture and
intensity ratios of the secondary stain channels barely leak into the
brightfield-like input, so labels carry information the input lacks.
"""

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, InputError
from .tensor.io import load_tensor, save_tensor

PIXEL_CUTOFF = 15.0

# phenotype layout: density, radius, texture, then one intensity ratio per extra output channel
DMSO_DENSITY = 4.0  # cells per 16x16 field
DMSO_RADIUS = 1.3
DMSO_TEXTURE = 0.22  # cycles / pixel
DMSO_RATIO = 1.0
# log-scale deviation shared by every active perturbation (the "activity" axis)
ACTIVITY = (0.35, 0.2, 0.0, 0.0)
# log-scale amplitude of the target-specific deviation per phenotype dimension;
# zero on density/radius so target identity is hidden from the input
DIRECTION_SCALE = (0.0, 0.0, 0.5, 0.9)
PAIR_JITTER = 0.12
# fraction of the secondary stains visible in the brightfield composite
LEAK = 0.02


@dataclass(frozen=True)
class PlateConfig:
    image_size: int = 16
    n_perturbations: int = 24
    replicates_per_perturbation: int = 4
    n_controls: int = 8
    active_fraction: float = 0.5
    channels_in: int = 2
    channels_out: int = 2
    seed: int = 0
    phenotype_strength: float = 1.0

    def __post_init__(self):
        if self.n_perturbations < 2 or self.n_perturbations % 2:
            raise ConfigError("n_perturbations must be a positive even number")
        if self.replicates_per_perturbation < 1:
            raise ConfigError("replicates_per_perturbation must be >= 1")
        if self.n_controls < 0:
            raise ConfigError("n_controls must be >= 0")
        if not 0 < self.active_fraction <= 1:
            raise ConfigError("active_fraction must lie in (0, 1]")
        n_active = self.active_fraction * self.n_perturbations
        if abs(n_active - round(n_active)) > 1e-9 or round(n_active) % 2:
            raise ConfigError("active_fraction * n_perturbations must be an even integer (actives come in target pairs)")
        if self.image_size < 4 or self.channels_in < 1 or self.channels_out < 1:
            raise ConfigError("image_size >= 4 and at least one input and output channel required")
        if self.phenotype_strength < 0:
            raise ConfigError("phenotype_strength must be >= 0")

    @property
    def n_targets(self):
        return self.n_perturbations // 2

    @property
    def dmso_label(self):
        return self.n_perturbations

    @property
    def n_active(self):
        return int(round(self.active_fraction * self.n_perturbations))


@dataclass
class LabeledSample:
    x: np.ndarray
    y: np.ndarray
    k: int
    target_id: int
    active: bool
    well_id: str

    @property
    def is_control(self):
        return self.target_id < 0


@dataclass
class Plate:
    plate_id: int
    samples: list
    ground_truth: list = field(default_factory=list)

    def __len__(self):
        return len(self.samples)


def phenotype_dims(channels_out):
    return 3 + max(channels_out - 1, 0)


def dmso_phenotype(channels_out):
    return np.array([DMSO_DENSITY, DMSO_RADIUS, DMSO_TEXTURE] + [DMSO_RATIO] * (channels_out - 1))


def perturbation_library(cfg):
    """Ground-truth table shared by every plate generated from ``cfg.seed``.

    Returns a list of dicts (k, target_id, active, phenotype).
    """
    rng = np.random.default_rng([cfg.seed, 0xC0FFEE])
    d = phenotype_dims(cfg.channels_out)
    scale = np.array((DIRECTION_SCALE + (DIRECTION_SCALE[-1],) * d)[:d])
    common = np.array((ACTIVITY + (0.0,) * d)[:d])
    base = dmso_phenotype(cfg.channels_out)
    order = rng.permutation(cfg.n_targets)
    active_targets = set(order[: cfg.n_active // 2].tolist())
    rows = []
    for target in range(cfg.n_targets):
        direction = rng.standard_normal(d)
        direction /= np.linalg.norm(direction)
        jitters = rng.standard_normal((2, d))
        active = target in active_targets
        for member in range(2):
            if active:
                specific = scale * math.sqrt(d) * (direction + PAIR_JITTER * jitters[member])
                delta = cfg.phenotype_strength * (common + specific)
            else:
                delta = np.zeros(d)
            rows.append(
                {
                    "k": 2 * target + member,
                    "target_id": target,
                    "active": active,
                    "phenotype": base * np.exp(delta),
                }
            )
    return rows


def _poisson_disk(rng, n, size, min_dist, attempts=200):
    pts = []
    for _ in range(n):
        for _ in range(attempts):
            p = rng.uniform(0.5, size - 0.5, 2)
            if all((p[0] - q[0]) ** 2 + (p[1] - q[1]) ** 2 >= min_dist**2 for q in pts):
                pts.append(p)
                break
    return np.array(pts).reshape(-1, 2)


def render_sample(phenotype, rng, image_size=16, channels_in=2, channels_out=2):
    """Render raw (unnormalized) input and target stacks for one well.

    Output channel 0 holds compact nuclei; channel c >= 1 holds a wider,
    textured stain whose brightness is the c-th intensity ratio. The inputs are
    blurred, low-contrast, noisy views of a composite dominated by cell bodies.
    """
    density, radius, texture = phenotype[0], phenotype[1], phenotype[2]
    ratios = list(phenotype[3:]) + [DMSO_RATIO] * max(0, channels_out - 1 - len(phenotype[3:]))
    area_scale = (image_size / 16.0) ** 2
    expected = density * area_scale
    n_cells = int(expected) + int(rng.random() < expected - int(expected)) if expected > 0 else 0
    pos = _poisson_disk(rng, n_cells, image_size, 2.2 * radius)
    yy, xx = np.mgrid[0:image_size, 0:image_size] + 0.5

    y = np.zeros((channels_out, image_size, image_size))
    body = np.zeros((image_size, image_size))
    for cy, cx in pos:
        amp = rng.uniform(0.8, 1.2)
        r = radius * rng.uniform(0.9, 1.1)
        d2 = (yy - cy) ** 2 + (xx - cx) ** 2
        y[0] += amp * np.exp(-d2 / (2 * r**2))
        theta, phase = rng.uniform(0, np.pi), rng.uniform(0, 2 * np.pi)
        wave = 1.0 + 0.6 * np.cos(2 * np.pi * texture * ((xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)) + phase)
        for c in range(1, channels_out):
            spread = r * (1.0 + 0.6 * c)
            prof = np.exp(-d2 / (2 * spread**2))
            y[c] += ratios[c - 1] * amp * prof * wave
        body += np.exp(-d2 / (2 * (1.5 * r) ** 2))

    composite = body + LEAK * y[1:].sum(axis=0) if channels_out > 1 else body
    x = np.empty((channels_in, image_size, image_size))
    for c in range(channels_in):
        blurred = gaussian_filter(composite, sigma=0.8 + 0.6 * c, mode="constant")
        x[c] = 0.5 + 0.4 * blurred + rng.normal(0.0, 0.02, (image_size, image_size))
    return x, y


def normalize_stack(stacks):
    """Per-channel plate-level z-score of [W, C, S, S] followed by the pixel cutoff."""
    mean = stacks.mean(axis=(0, 2, 3), keepdims=True)
    std = stacks.std(axis=(0, 2, 3), keepdims=True)
    std = np.where(std > 0, std, 1.0)
    return np.clip((stacks - mean) / std, -PIXEL_CUTOFF, PIXEL_CUTOFF)


def generate_plate(cfg, plate_id=0):
    """Build one plate: every perturbation replicated, plus DMSO control wells.

    Phenotypes depend only on ``cfg.seed``; well renderings additionally on
    ``plate_id``. The result is a pure function of (cfg, plate_id).
    """
    library = perturbation_library(cfg)
    base = dmso_phenotype(cfg.channels_out)
    wells = []
    for row in library:
        for _ in range(cfg.replicates_per_perturbation):
            wells.append((row["phenotype"], row["k"], row["target_id"], row["active"]))
    for _ in range(cfg.n_controls):
        wells.append((base, cfg.dmso_label, -1, False))
    xs, ys = [], []
    for idx, (pheno, *_rest) in enumerate(wells):
        rng = np.random.default_rng([cfg.seed, plate_id, idx])
        x, y = render_sample(pheno, rng, cfg.image_size, cfg.channels_in, cfg.channels_out)
        xs.append(x)
        ys.append(y)
    xs = normalize_stack(np.stack(xs))
    ys = normalize_stack(np.stack(ys))
    samples = [
        LabeledSample(xs[i], ys[i], k, target, active, f"p{plate_id:02d}_w{i:03d}")
        for i, (_, k, target, active) in enumerate(wells)
    ]
    return Plate(plate_id, samples, library)


def generate_plates(cfg, n_plates):
    return [generate_plate(cfg, i) for i in range(n_plates)]


def split_plates(plates, held_out):
    """Split into (train samples, test samples) by plate id."""
    ids = {p.plate_id for p in plates}
    held = set(np.atleast_1d(held_out).tolist())
    missing = held - ids
    if missing:
        raise InputError(f"unknown plate id(s): {sorted(missing)}")
    train = [s for p in plates if p.plate_id not in held for s in p.samples]
    test = [s for p in plates if p.plate_id in held for s in p.samples]
    return train, test


# ---------------------------------------------------------------- on-disk plates

MANIFEST_FIELDS = ["well_id", "k", "target_id", "active", "x_file", "y_file"]
GROUND_TRUTH_FIELDS = ["k", "target_id", "active"]


def write_plate(plate, directory):
    os.makedirs(os.path.join(directory, "wells"), exist_ok=True)
    with open(os.path.join(directory, "manifest.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_FIELDS)
        for s in plate.samples:
            xf, yf = f"wells/{s.well_id}_x.gi2i", f"wells/{s.well_id}_y.gi2i"
            save_tensor(os.path.join(directory, xf), s.x)
            save_tensor(os.path.join(directory, yf), s.y)
            w.writerow([s.well_id, s.k, s.target_id, int(s.active), xf, yf])


def read_plate(directory, plate_id=None):
    path = os.path.join(directory, "manifest.csv")
    if not os.path.exists(path):
        raise InputError(f"no manifest.csv in {directory}")
    samples = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            x = load_tensor(os.path.join(directory, row["x_file"]))
            y = load_tensor(os.path.join(directory, row["y_file"]))
            samples.append(
                LabeledSample(x, y, int(row["k"]), int(row["target_id"]), row["active"] == "1", row["well_id"])
            )
    if plate_id is None:
        name = os.path.basename(os.path.normpath(directory))
        plate_id = int(name.split("_")[-1]) if name.split("_")[-1].isdigit() else 0
    return Plate(plate_id, samples)


def write_ground_truth(library, path):
    d = len(library[0]["phenotype"])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(GROUND_TRUTH_FIELDS + [f"phenotype_{i}" for i in range(d)])
        for r in library:
            w.writerow([r["k"], r["target_id"], int(r["active"])] + [repr(float(v)) for v in r["phenotype"]])


def read_ground_truth(path):
    rows = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            pheno = [float(v) for key, v in r.items() if key.startswith("phenotype_")]
            rows.append({"k": int(r["k"]), "target_id": int(r["target_id"]), "active": r["active"] == "1", "phenotype": np.array(pheno)})
    return rows
