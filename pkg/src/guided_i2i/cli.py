"""``gi2i`` command line: gen-data, train, train-classifier, sample, evaluate.

Exit codes: 0 success, 2 usage / contract / IO error, 3 numeric failure.

Run-directory layout::

    data/plate_00 .. plate_NN/   manifest.csv + wells/*.gi2i   (gen-data)
    data/ground_truth.csv                                      (gen-data)
    run/denoiser.ckpt, loss.csv                                (train)
    run/classifier.ckpt, classifier_loss.csv, accuracy_vs_t.csv (train-classifier)
    pred/manifest.csv, wells/*.gi2i, previews/*.ppm            (sample)
    eval/metrics_whole_plate.csv, metrics_active_subset.csv,
         active_subset.csv, report.txt                         (evaluate)

Every output directory also receives ``resolved_config.ini``.
"""

import argparse
import csv
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import __version__
from .config import dump_config, load_config
from .diffusion import (
    SampleConfig,
    TrainConfig,
    classifier_accuracy,
    label_fn,
    sample_guided,
    sample_unguided,
    train_classifier,
    train_denoiser,
    vocab_size,
    write_log,
)
from .errors import GI2IError, InputError, NumericError
from .network import ClassifierModel, DenoiserModel, NetworkConfig, load_checkpoint, save_checkpoint
from .profiling import CSV_COLUMNS, evaluate_wells, plate_activity
from .schedule import make_linear_schedule
from .synthdata import (
    PlateConfig,
    generate_plate,
    read_ground_truth,
    read_plate,
    write_ground_truth,
    write_plate,
)
from .tensor.io import load_tensor, save_tensor

logger = logging.getLogger("guided_i2i")

PREVIEW_RANGE = (-4.0, 4.0)
PREVIEW_ZOOM = 4


# ---------------------------------------------------------------- helpers


def _prepare_out(path, cfg):
    parent = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(parent):
        raise InputError(f"parent directory of {path} does not exist")
    os.makedirs(path, exist_ok=True)
    with open(os.path.join(path, "resolved_config.ini"), "w", encoding="utf-8") as fh:
        fh.write(dump_config(cfg, header=f"guided_i2i {__version__}"))


def _plate_config(cfg):
    d = cfg.data
    return PlateConfig(
        image_size=d.image_size,
        n_perturbations=d.n_perturbations,
        replicates_per_perturbation=d.replicates_per_perturbation,
        n_controls=d.n_controls,
        active_fraction=d.active_fraction,
        channels_in=d.channels_in,
        channels_out=d.channels_out,
        seed=d.seed,
        phenotype_strength=d.phenotype_strength,
    )


def _schedule(cfg):
    s = cfg.schedule
    return make_linear_schedule(s.beta_start, s.beta_end, s.steps)


def _network_config(cfg, num_classes):
    n = cfg.network
    return NetworkConfig(
        in_channels_x=cfg.data.channels_in,
        out_channels_y=cfg.data.channels_out,
        base_width=n.base_width,
        depth=n.depth,
        groups=n.groups,
        embed_dim=n.embed_dim,
        num_classes=num_classes,
        image_size=cfg.data.image_size,
        steps=cfg.schedule.steps,
    )


def _train_config(cfg, classifier=False):
    t = cfg.train
    return TrainConfig(
        iterations=t.classifier_iterations if classifier else t.iterations,
        batch_size=t.classifier_batch_size if classifier else t.batch_size,
        learning_rate=t.learning_rate,
        adam_beta1=t.adam_beta1,
        adam_beta2=t.adam_beta2,
        adam_eps=t.adam_eps,
        norm_p=t.norm_p,
        augment_prob=t.augment_prob,
        seed=t.seed,
    )


def _plate_dirs(data_dir):
    if not os.path.isdir(data_dir):
        raise InputError(f"data directory {data_dir} not found")
    names = sorted(n for n in os.listdir(data_dir) if n.startswith("plate_") and os.path.isdir(os.path.join(data_dir, n)))
    if not names:
        raise InputError(f"no plate_* directories in {data_dir}")
    return {int(n.split("_")[1]): os.path.join(data_dir, n) for n in names}


def _train_samples(cfg, data_dir):
    dirs = _plate_dirs(data_dir)
    held = cfg.data.test_plate
    samples = [s for pid, d in dirs.items() if pid != held for s in read_plate(d, pid).samples]
    if not samples:
        raise InputError("no training plates left after holding out the test plate")
    return samples


def _threads():
    raw = os.environ.get("GI2I_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise InputError(f"GI2I_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def _truth_active_labels(cfg, plate):
    e = cfg.eval
    return plate_activity(plate.samples, e.var_tol, e.corr_tol, e.pca_dims, e.clusters, e.guard_z)


def write_ppm(path, image):
    """Write an 8-bit grayscale image as a binary PPM (P6)."""
    img = np.asarray(image)
    rgb = np.repeat(img[:, :, None], 3, axis=2).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6 {img.shape[1]} {img.shape[0]} 255\n".encode("ascii"))
        fh.write(rgb.tobytes())


def preview(x, y, zoom=PREVIEW_ZOOM, value_range=PREVIEW_RANGE):
    """Side-by-side montage of input and output channels with a fixed intensity mapping."""
    lo, hi = value_range
    tiles = [np.clip((c - lo) / (hi - lo), 0, 1) for c in list(x) + list(y)]
    gap = np.ones((tiles[0].shape[0], 1))
    row = np.concatenate([t if i == 0 else np.concatenate([gap, t], axis=1) for i, t in enumerate(tiles)], axis=1)
    return np.kron(np.round(row * 255), np.ones((zoom, zoom)))


# ---------------------------------------------------------------- commands


def cmd_gen_data(args, cfg):
    pc = _plate_config(cfg)
    _prepare_out(args.out, cfg)
    plate = None
    for pid in range(cfg.data.n_plates):
        plate = generate_plate(pc, pid)
        write_plate(plate, os.path.join(args.out, f"plate_{pid:02d}"))
    if plate is not None:
        write_ground_truth(plate.ground_truth, os.path.join(args.out, "ground_truth.csv"))
    print(f"wrote {cfg.data.n_plates} plates to {args.out}")
    return 0


def cmd_train(args, cfg):
    samples = _train_samples(cfg, args.data)
    vocab = vocab_size(args.label_mode, cfg.data.n_perturbations)
    model = DenoiserModel(_network_config(cfg, vocab + 1), seed=cfg.train.seed)
    label_of = label_fn(args.label_mode, cfg.data.n_perturbations) if args.label_mode != "none" else None
    _prepare_out(args.out, cfg)
    log = train_denoiser(samples, model, _schedule(cfg), _train_config(cfg), label_of, cfg.train.log_every)
    meta = {"label_mode": args.label_mode, "n_perturbations": cfg.data.n_perturbations, "iterations": cfg.train.iterations}
    save_checkpoint(os.path.join(args.out, "denoiser.ckpt"), model, meta)
    write_log(log, os.path.join(args.out, "loss.csv"))
    print(f"trained denoiser ({args.label_mode}) for {len(log)} iterations; final loss {log[-1][1]:.4f}" if log else "no iterations run")
    return 0


def cmd_train_classifier(args, cfg):
    if args.label_mode == "none":
        raise InputError("the classifier needs labels: use --label-mode pert or target")
    samples = _train_samples(cfg, args.data)
    vocab = vocab_size(args.label_mode, cfg.data.n_perturbations)
    label_of = label_fn(args.label_mode, cfg.data.n_perturbations)
    model = ClassifierModel(_network_config(cfg, vocab), seed=cfg.train.seed)
    schedule = _schedule(cfg)
    _prepare_out(args.out, cfg)
    log = train_classifier(samples, model, schedule, _train_config(cfg, classifier=True), label_of, cfg.train.log_every)
    meta = {"label_mode": args.label_mode, "n_perturbations": cfg.data.n_perturbations}
    save_checkpoint(os.path.join(args.out, "classifier.ckpt"), model, meta)
    write_log(log, os.path.join(args.out, "classifier_loss.csv"))

    dirs = _plate_dirs(args.data)
    held = read_plate(dirs[cfg.data.test_plate], cfg.data.test_plate).samples if cfg.data.test_plate in dirs else samples
    ys = np.stack([s.y for s in held])
    labels = [label_of(s) for s in held]
    rng = np.random.default_rng([cfg.train.seed, 0xACC])
    steps = np.unique(np.linspace(0, schedule.T, cfg.train.accuracy_bins + 1).round().astype(int))
    with open(os.path.join(args.out, "accuracy_vs_t.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "accuracy"])
        for t in steps:
            w.writerow([int(t), repr(classifier_accuracy(model, ys, labels, int(t), schedule, rng))])
    print(f"trained classifier ({args.label_mode}, {vocab} classes) for {len(log)} iterations")
    return 0


def cmd_sample(args, cfg):
    if args.scale > 0 and not args.classifier:
        raise InputError("--scale > 0 needs --classifier")
    if args.scale < 0:
        raise InputError("--scale must be >= 0")
    model, meta = load_checkpoint(args.denoiser)
    if not isinstance(model, DenoiserModel):
        raise InputError(f"{args.denoiser} is not a denoiser checkpoint")
    schedule = _schedule(cfg)
    if model.config.steps != schedule.T:
        raise InputError(f"checkpoint was trained with T={model.config.steps}, config has T={schedule.T}")
    classifier, cmeta = None, {}
    if args.classifier:
        classifier, cmeta = load_checkpoint(args.classifier)
        if not isinstance(classifier, ClassifierModel):
            raise InputError(f"{args.classifier} is not a classifier checkpoint")

    plate_id = cfg.data.test_plate if args.plate is None else args.plate
    dirs = _plate_dirs(args.data)
    if plate_id not in dirs:
        raise InputError(f"plate {plate_id} not found in {args.data}")
    plate = read_plate(dirs[plate_id], plate_id)
    wells = plate.samples
    if args.subset == "active":
        labels, _ = _truth_active_labels(cfg, plate)
        keep = {k for k, lab in labels.items() if lab != "inactive"}
        wells = [s for s in wells if s.k in keep]
        if not wells:
            raise InputError("active subset is empty")

    n_perts = meta.get("n_perturbations", cfg.data.n_perturbations)
    mode = meta.get("label_mode", "none")
    use_labels = args.label_in_adagn == "on" and mode != "none"
    k = [label_fn(mode, n_perts)(s) for s in wells] if use_labels else None
    class_labels = None
    if classifier is not None:
        cmode = cmeta.get("label_mode", mode)
        class_labels = [label_fn(cmode, cmeta.get("n_perturbations", n_perts))(s) for s in wells]

    s = cfg.sample
    sc = SampleConfig(
        guidance_scale=args.scale,
        use_label_in_adagn=use_labels,
        steps=schedule.T,
        seed=s.seed,
        clip=s.clip,
        grad_at_mean=s.grad_at_mean,
        batch_size=s.batch_size,
    )
    x = np.stack([w.x for w in wells])
    stream_ids = [int(w.well_id.rsplit("_w", 1)[-1]) if "_w" in w.well_id else i for i, w in enumerate(wells)]

    def run(lo, hi):
        kk = None if k is None else k[lo:hi]
        ids = stream_ids[lo:hi]
        if classifier is not None and args.scale > 0:
            return sample_guided(model, classifier, x[lo:hi], kk, args.scale, schedule, sc, class_labels[lo:hi], ids)
        return sample_unguided(model, x[lo:hi], kk, schedule, sc, ids)

    threads = _threads()
    chunk = max(1, -(-len(wells) // threads))
    bounds = [(lo, min(lo + chunk, len(wells))) for lo in range(0, len(wells), chunk)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = list(pool.map(lambda b: run(*b), bounds))
    ys = np.concatenate(parts)

    _prepare_out(args.out, cfg)
    os.makedirs(os.path.join(args.out, "wells"), exist_ok=True)
    os.makedirs(os.path.join(args.out, "previews"), exist_ok=True)
    with open(os.path.join(args.out, "manifest.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["well_id", "label", "file"])
        for sample, y in zip(wells, ys):
            rel = f"wells/{sample.well_id}.gi2i"
            save_tensor(os.path.join(args.out, rel), y)
            write_ppm(os.path.join(args.out, "previews", f"{sample.well_id}.ppm"), preview(sample.x, y))
            w.writerow([sample.well_id, sample.k, rel])
    print(f"sampled {len(wells)} wells of plate {plate_id} (scale {args.scale}, labels in AdaGN {'on' if use_labels else 'off'})")
    return 0


def read_predictions(directory):
    path = os.path.join(directory, "manifest.csv")
    if not os.path.exists(path):
        raise InputError(f"no manifest.csv in {directory}")
    out = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out[row["well_id"]] = (int(row["label"]), load_tensor(os.path.join(directory, row["file"])))
    return out


def _write_metrics(path, report):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        w.writerow(report.csv_row())


def cmd_evaluate(args, cfg):
    truth_plate = read_plate(args.truth)
    library = read_ground_truth(args.ground_truth)
    target_of = {r["k"]: r["target_id"] for r in library}
    preds = read_predictions(args.pred)
    truth = {s.well_id: s for s in truth_plate.samples}
    unknown = [w for w in preds if w not in truth]
    if unknown:
        raise InputError(f"predicted wells missing from the truth plate: {unknown[:5]}")
    wrong = [w for w, (lab, _) in preds.items() if lab != truth[w].k]
    if wrong:
        raise InputError(f"label mismatch between prediction and truth manifests: {wrong[:5]}")
    perturbation_of = {s.well_id: s.k for s in truth_plate.samples}
    e = cfg.eval

    labels, scores = _truth_active_labels(cfg, truth_plate)
    designed = {r["k"]: r["active"] for r in library}
    keep = {k for k, lab in labels.items() if lab != "inactive"}

    _prepare_out(args.out, cfg)
    sections = {}
    if len(preds) == len(truth):
        sections["whole_plate"] = list(truth)
    active = [w for w in truth if perturbation_of[w] in keep and w in preds]
    if len(active) >= 2:
        sections["active_subset"] = active
    if not sections:
        raise InputError("predictions cover neither the whole plate nor the active subset")

    lines = [f"tool_version={__version__}", f"active_perturbations={len(keep)}"]
    for name, wells in sections.items():
        report, details = evaluate_wells(
            {w: preds[w][1] for w in wells},
            {w: truth[w].y for w in wells},
            perturbation_of,
            target_of,
            e.var_tol,
            e.corr_tol,
            e.cpcor_axis,
        )
        _write_metrics(os.path.join(args.out, f"metrics_{name}.csv"), report)
        lines.append(report.as_text(prefix=f"{name}."))
        lines.extend(f"{name}.{key}={value}" for key, value in details.items())
    with open(os.path.join(args.out, "active_subset.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "label", "score", "designed_active"])
        for k in sorted(labels):
            w.writerow([k, labels[k], repr(scores[k]), int(designed.get(k, False))])
    with open(os.path.join(args.out, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0


# ---------------------------------------------------------------- entry point


def build_parser():
    p = argparse.ArgumentParser(prog="gi2i", description="Class-guided image-to-image diffusion at desk scale.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="INI run config (defaults used when omitted)")
        return sp

    g = with_config(sub.add_parser("gen-data", help="generate synthetic plates"))
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    for name, func, help_text in (
        ("train", cmd_train, "train the denoiser"),
        ("train-classifier", cmd_train_classifier, "train the noisy-image classifier"),
    ):
        t = with_config(sub.add_parser(name, help=help_text))
        t.add_argument("--data", required=True)
        t.add_argument("--out", required=True)
        t.add_argument("--label-mode", choices=["none", "pert", "target"], default="none")
        t.set_defaults(func=func)

    s = with_config(sub.add_parser("sample", help="sample predicted target images for a plate"))
    s.add_argument("--denoiser", required=True)
    s.add_argument("--classifier")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--scale", type=float, default=0.0)
    s.add_argument("--label-in-adagn", choices=["on", "off"], default="on")
    s.add_argument("--plate", type=int, help="plate id to sample (default: the config's test plate)")
    s.add_argument("--subset", choices=["all", "active"], default="all")
    s.set_defaults(func=cmd_sample)

    e = with_config(sub.add_parser("evaluate", help="score predicted images against the truth plate"))
    e.add_argument("--pred", required=True)
    e.add_argument("--truth", required=True)
    e.add_argument("--ground-truth", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except NumericError as err:
        print(f"gi2i: numeric failure: {err}", file=sys.stderr)
        return 3
    except (GI2IError, OSError) as err:
        print(f"gi2i: error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
