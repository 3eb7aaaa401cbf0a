"""Denoiser / classifier training and unguided / classifier-guided sampling.

Guided reverse step (with sigma_t^2 = 1 - alpha_t)::

    mu      = (y_t - (1 - alpha_t) / sqrt(1 - gamma_t) * eps_hat) / sqrt(alpha_t)
    y_{t-1} = mu + s * sigma_t^2 * grad log p(k | y_t) + sigma_t * z,   z = 0 at t = 1

which reduces exactly to the unguided update at s = 0. The alternative
reading that draws z around the shifted mean and then rescales it by
sigma_t would double-scale the mean and not reduce to the unguided update,
so it is not used.
"""

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InputError, NumericError
from .network import classifier_grad
from .schedule import sample_noise_level
from .tensor import Tape, Tensor, backward, ops

logger = logging.getLogger(__name__)


# published optimizer settings; desk-scale runs override these (see config.py)
REFERENCE_LEARNING_RATE = 8e-5
REFERENCE_BATCH_SIZE = 2


@dataclass
class TrainConfig:
    iterations: int = 2000
    batch_size: int = REFERENCE_BATCH_SIZE
    learning_rate: float = REFERENCE_LEARNING_RATE
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    norm_p: int = 2
    augment_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if not 0 <= self.augment_prob <= 1:
            raise ConfigError("augment_prob must lie in [0, 1]")
        if self.norm_p not in (1, 2):
            raise ConfigError("norm_p must be 1 or 2")
        if self.iterations < 0 or self.batch_size < 1:
            raise ConfigError("iterations >= 0 and batch_size >= 1 required")


@dataclass
class SampleConfig:
    guidance_scale: float = 0.0
    use_label_in_adagn: bool = True
    steps: int = 200
    seed: int = 0
    clip: float = 4.0
    grad_at_mean: bool = False
    batch_size: int = 64

    def __post_init__(self):
        if self.guidance_scale < 0:
            raise ConfigError("guidance_scale must be >= 0")
        if self.clip is not None and self.clip <= 0:
            raise ConfigError("clip must be positive (or None to disable)")


class Adam:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr, self.betas, self.eps = lr, betas, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self):
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= b1
            m += (1 - b1) * p.grad
            v *= b2
            v += (1 - b2) * p.grad**2
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def optimizer_for(model, cfg):
    return Adam(model.parameters(), cfg.learning_rate, (cfg.adam_beta1, cfg.adam_beta2), cfg.adam_eps)


# ---------------------------------------------------------------- labels / augmentation


def label_fn(mode, n_perturbations, null_label=None):
    """Map a sample to a class index for label mode ``none`` / ``pert`` / ``target``.

    DMSO maps to the last vocabulary entry (``n_perturbations`` or ``n_targets``).
    ``none`` yields ``None`` (the null class).
    """
    if mode == "none":
        return lambda s: None
    if mode == "pert":
        return lambda s: int(s.k)
    if mode == "target":
        n_targets = n_perturbations // 2
        return lambda s: n_targets if s.target_id < 0 else int(s.target_id)
    raise ConfigError(f"unknown label mode {mode!r}")


def vocab_size(mode, n_perturbations):
    return {"none": 0, "pert": n_perturbations + 1, "target": n_perturbations // 2 + 1}[mode]


def augment_pair(x, y, rng, p):
    """Apply the same random flips / 90-degree rotation to x and y (each with probability p)."""
    if rng.random() < p:
        x, y = x[:, :, ::-1], y[:, :, ::-1]
    if rng.random() < p:
        x, y = x[:, ::-1, :], y[:, ::-1, :]
    if rng.random() < p:
        x, y = np.rot90(x, axes=(1, 2)), np.rot90(y, axes=(1, 2))
    return np.ascontiguousarray(x), np.ascontiguousarray(y)


def _batch(samples, idx, rng, augment_prob):
    xs, ys = [], []
    for i in idx:
        s = samples[i]
        x, y = (s.x, s.y) if augment_prob == 0 else augment_pair(s.x, s.y, rng, augment_prob)
        xs.append(x)
        ys.append(y)
    return np.stack(xs), np.stack(ys)


# ---------------------------------------------------------------- training


def denoising_loss(eps_hat, eps, norm_p=2):
    diff = ops.sub(eps_hat, eps)
    return ops.mean(ops.square(diff) if norm_p == 2 else ops.absolute(diff))


def train_step(model, batch, schedule, rng, optimizer, label_of=None, norm_p=2):
    """One Adam step on the image-conditional noise-prediction loss; returns the pre-update loss.

    ``batch`` is either a list of samples or an ``(x, y, labels)`` tuple of arrays.
    """
    if isinstance(batch, tuple):
        x, y, labels = batch
    else:
        if not batch:
            raise InputError("empty batch")
        x = np.stack([s.x for s in batch])
        y = np.stack([s.y for s in batch])
        labels = [label_of(s) for s in batch] if label_of else None
    n = y.shape[0]
    t, gamma = sample_noise_level(schedule, rng, size=n)
    eps = rng.standard_normal(y.shape)
    g = gamma.reshape(n, 1, 1, 1)
    y_noisy = np.sqrt(g) * y + np.sqrt(1.0 - g) * eps
    optimizer.zero_grad()
    with Tape() as tape:
        loss = denoising_loss(model(x, Tensor(y_noisy), t, labels), eps, norm_p)
    value = loss.item()
    if not np.isfinite(value):
        raise NumericError("non-finite training loss")
    backward(tape, loss)
    optimizer.step()
    return value


def train_denoiser(dataset, model, schedule, cfg, label_of=None, log_every=0):
    """Run ``cfg.iterations`` training steps; returns a list of (iteration, loss)."""
    if not dataset:
        raise InputError("empty dataset")
    rng = np.random.default_rng(cfg.seed)
    opt = optimizer_for(model, cfg)
    log = []
    for it in range(1, cfg.iterations + 1):
        idx = rng.integers(0, len(dataset), size=cfg.batch_size)
        x, y = _batch(dataset, idx, rng, cfg.augment_prob)
        labels = [label_of(dataset[i]) for i in idx] if label_of else None
        loss = train_step(model, (x, y, labels), schedule, rng, opt, norm_p=cfg.norm_p)
        log.append((it, loss))
        if log_every and it % log_every == 0:
            logger.info("denoiser iter %d loss %.4f", it, np.mean([v for _, v in log[-log_every:]]))
    return log


def classifier_loss(model, y_noisy, t, labels):
    return ops.scale(ops.mean(ops.pick(model(y_noisy, t), labels)), -1.0)


def train_classifier(dataset, model, schedule, cfg, label_of, log_every=0):
    """Cross-entropy training on noised targets with t uniform on 1..T."""
    if not dataset:
        raise InputError("empty dataset")
    labels_all = np.array([label_of(s) for s in dataset])
    if np.any(labels_all < 0) or np.any(labels_all >= model.config.num_classes):
        raise InputError("dataset contains labels outside the classifier vocabulary")
    rng = np.random.default_rng(cfg.seed)
    opt = optimizer_for(model, cfg)
    log = []
    for it in range(1, cfg.iterations + 1):
        idx = rng.integers(0, len(dataset), size=cfg.batch_size)
        _, y = _batch(dataset, idx, rng, cfg.augment_prob)
        t, gamma = sample_noise_level(schedule, rng, size=len(idx))
        g = gamma.reshape(-1, 1, 1, 1)
        y_noisy = np.sqrt(g) * y + np.sqrt(1 - g) * rng.standard_normal(y.shape)
        opt.zero_grad()
        with Tape() as tape:
            loss = classifier_loss(model, Tensor(y_noisy), t, labels_all[idx])
        value = loss.item()
        backward(tape, loss)
        opt.step()
        log.append((it, value))
        if log_every and it % log_every == 0:
            logger.info("classifier iter %d loss %.4f", it, np.mean([v for _, v in log[-log_every:]]))
    return log


def classifier_accuracy(model, ys, labels, t, schedule, rng, batch_size=64):
    """Accuracy of ``model`` on targets noised to step t (t = 0 means clean)."""
    ys = np.asarray(ys)
    labels = np.asarray(labels)
    correct = 0
    for lo in range(0, len(ys), batch_size):
        y = ys[lo : lo + batch_size]
        if t > 0:
            g = schedule.gamma[t]
            y = np.sqrt(g) * y + np.sqrt(1 - g) * rng.standard_normal(y.shape)
        step = max(t, 1)
        pred = model.logits(y, step).data.argmax(axis=1)
        correct += int((pred == labels[lo : lo + batch_size]).sum())
    return correct / len(ys)


def write_log(log, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "loss"])
        for it, loss in log:
            w.writerow([it, repr(float(loss))])


# ---------------------------------------------------------------- sampling


@dataclass
class StepTrace:
    t: int
    mean: np.ndarray
    shift: np.ndarray = field(default=None)


def reverse_step(model, x, y_t, t, k, schedule, noise, classifier=None, class_labels=None,
                 scale=0.0, grad_at_mean=False, clip=4.0):
    """One reverse update from y_t to y_{t-1}; returns (y_{t-1}, StepTrace).

    ``noise`` is the standard-normal draw for this step (ignored at t = 1).
    """
    a = schedule.alpha[t - 1]
    g_t = schedule.gamma[t]
    try:
        eps_hat = model(x, y_t, t, k).data
    except NumericError as err:
        raise NumericError(f"{err} (sampler step {t})", step=t) from err
    mean = (y_t - (1.0 - a) / np.sqrt(1.0 - g_t) * eps_hat) / np.sqrt(a)
    out = mean
    shift = None
    if scale != 0 and classifier is not None:
        at = mean if grad_at_mean else y_t
        shift = scale * (1.0 - a) * classifier_grad(classifier, at, t, class_labels)
        out = out + shift
    if t > 1:
        out = out + np.sqrt(1.0 - a) * noise
    if clip is not None:
        out = np.clip(out, -clip, clip)
    if not np.isfinite(out).all():
        raise NumericError(f"non-finite sampler state at step {t}", step=t)
    return out, StepTrace(t, mean, shift)


def _sample(model, x, k, schedule, cfg, classifier=None, class_labels=None, stream_ids=None, trace=None):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    n = x.shape[0]
    if cfg.steps != schedule.T:
        raise ConfigError(f"sample steps {cfg.steps} != schedule T {schedule.T}")
    if stream_ids is None:
        stream_ids = range(n)
    streams = [np.random.default_rng([cfg.seed, int(i)]) for i in stream_ids]
    c, s = model.config.out_channels_y, model.config.image_size
    y = np.stack([r.standard_normal((c, s, s)) for r in streams])
    if k is None or not cfg.use_label_in_adagn:
        k_model = None
    else:
        k_model = np.broadcast_to(np.asarray(k, dtype=object), (n,)).tolist()
    scale = cfg.guidance_scale if classifier is not None else 0.0
    if scale and class_labels is None:
        raise InputError("guided sampling needs class labels for the classifier")
    cl = None if class_labels is None else np.broadcast_to(np.asarray(class_labels), (n,))
    for t in range(schedule.T, 0, -1):
        noise = np.stack([r.standard_normal((c, s, s)) for r in streams]) if t > 1 else None
        y, tr = reverse_step(model, x, y, t, k_model, schedule, noise, classifier, cl, scale, cfg.grad_at_mean, cfg.clip)
        if trace is not None:
            trace.append(tr)
    return y


def _chunked(fn, x, k, class_labels, cfg, stream_ids):
    n = len(x)
    ids = np.arange(n) if stream_ids is None else np.asarray(stream_ids)
    out = []
    for lo in range(0, n, cfg.batch_size):
        sl = slice(lo, lo + cfg.batch_size)
        kk = k if k is None or np.ndim(k) == 0 else list(k)[sl]
        cc = class_labels if class_labels is None or np.ndim(class_labels) == 0 else np.asarray(class_labels)[sl]
        out.append(fn(x[sl], kk, cc, ids[sl]))
    return np.concatenate(out)


def sample_unguided(model, x, k, schedule, cfg, stream_ids=None, trace=None):
    """Ancestral sampling from y_T ~ N(0, I) down to y_0 conditioned on x (and label k)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return _sample(model, x, k, schedule, cfg, stream_ids=stream_ids, trace=trace)[0]
    if trace is not None:
        return _sample(model, x, k, schedule, cfg, stream_ids=stream_ids, trace=trace)
    return _chunked(lambda xs, kk, _, ids: _sample(model, xs, kk, schedule, cfg, stream_ids=ids), x, k, None, cfg, stream_ids)


def sample_guided(model, classifier, x, k, s, schedule, cfg, class_labels=None, stream_ids=None, trace=None):
    """Classifier-guided sampling with gradient scale ``s``.

    ``k`` conditions the denoiser's AdaGN (when ``cfg.use_label_in_adagn``);
    ``class_labels`` (default: ``k``) are the classifier targets.
    """
    cfg = SampleConfig(**{**cfg.__dict__, "guidance_scale": float(s)})
    class_labels = k if class_labels is None else class_labels
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return _sample(model, x, k, schedule, cfg, classifier, class_labels, stream_ids, trace)[0]
    if trace is not None:
        return _sample(model, x, k, schedule, cfg, classifier, class_labels, stream_ids, trace)
    return _chunked(
        lambda xs, kk, cc, ids: _sample(model, xs, kk, schedule, cfg, classifier, cc, ids),
        x, k, class_labels, cfg, stream_ids,
    )
