"""AdaGN-conditioned U-Net denoiser and noisy-image classifier."""

import json
import math
import struct
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, DimensionError, InputError
from .tensor import Tape, Tensor, backward, ops
from .tensor.io import tensor_from_bytes, tensor_to_bytes

CKPT_MAGIC = b"GI2C"
CKPT_VERSION = 1


@dataclass(frozen=True)
class NetworkConfig:
    in_channels_x: int = 2
    out_channels_y: int = 2
    base_width: int = 16
    depth: int = 2
    groups: int = 4
    embed_dim: int = 32
    num_classes: int = 1
    image_size: int = 16
    steps: int = 200

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if self.image_size % (2**self.depth):
            raise ConfigError(f"image_size {self.image_size} not divisible by 2^{self.depth}")
        if self.base_width % self.groups:
            raise ConfigError(f"base_width {self.base_width} not divisible by groups {self.groups}")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if self.embed_dim % 2:
            raise ConfigError("embed_dim must be even")

    def widths(self):
        return [self.base_width * 2**level for level in range(self.depth)]


# ---------------------------------------------------------------- embeddings


def timestep_embedding(t, embed_dim, T):
    """Sinusoidal embedding(s) of integer step(s) t in 1..T.

    Returns shape [embed_dim] for scalar t, else [len(t), embed_dim]; the first
    half holds sines and the second half cosines of ``t * freq_j``.
    """
    if embed_dim % 2:
        raise ConfigError(f"embed_dim must be even, got {embed_dim}")
    ts = np.atleast_1d(np.asarray(t))
    if np.any(ts < 1) or np.any(ts > T):
        raise InputError(f"timestep outside 1..{T}")
    half = embed_dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = ts.astype(np.float64)[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    return emb[0] if np.ndim(t) == 0 else emb


def class_embedding(k, table):
    """Row lookup in the class table; ``None`` entries give zero rows."""
    seq = [k] if k is None or np.ndim(k) == 0 else list(k)
    null = np.array([v is None for v in seq])
    labels = np.array([0 if v is None else int(v) for v in seq], dtype=np.int64)
    out = ops.embedding(table, labels, null)
    return ops.reshape(out, (table.shape[1],)) if len(seq) == 1 and (k is None or np.ndim(k) == 0) else out


def _labels(k, num_classes, n):
    """Normalize labels to (index array, null mask); the last table row is the null class."""
    null_label = num_classes - 1
    if k is None:
        arr = np.full(n, null_label, dtype=np.int64)
    else:
        seq = [k] if np.ndim(k) == 0 else list(k)
        arr = np.array([null_label if v is None else int(v) for v in seq], dtype=np.int64)
    if arr.shape[0] == 1 and n > 1:
        arr = np.repeat(arr, n)
    if arr.shape != (n,):
        raise DimensionError(f"expected {n} labels, got {arr.shape[0]}")
    if np.any((arr < 0) | (arr >= num_classes)):
        raise InputError(f"class label outside 0..{num_classes - 1}")
    return arr, arr == null_label


def adagn(h, cond, proj, groups):
    """``k_s * GroupNorm(h) + k_b`` with (k_s, k_b) = split(proj(cond)).

    ``cond`` is [N, E] (or [E], broadcast over the batch); ``proj`` maps a
    [N, E] tensor to [N, 2C].
    """
    n, c = h.shape[:2]
    if cond.ndim == 1:
        cond = ops.reshape(cond, (1, cond.shape[0]))
    ks_kb = proj(cond)
    if ks_kb.shape[1] != 2 * c:
        raise ConfigError(f"AdaGN projection yields {ks_kb.shape[1]} values, need {2 * c}")
    if ks_kb.shape[0] != n:
        ks_kb = ops.mul(ks_kb, np.ones((n, 1)))
    k_s = ops.slice_cols(ks_kb, 0, c)
    k_b = ops.slice_cols(ks_kb, c, 2 * c)
    return ops.channel_affine(ops.group_norm(h, groups), k_s, k_b)


# ---------------------------------------------------------------- parameters


class _Init:
    def __init__(self, rng):
        self.rng = rng
        self.params = {}

    def uniform(self, name, shape, fan_in):
        bound = 1.0 / math.sqrt(fan_in)
        self.params[name] = Tensor(self.rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)

    def conv(self, name, cin, cout, k):
        self.uniform(f"{name}.w", (cout, cin, k, k), cin * k * k)
        self.uniform(f"{name}.b", (cout,), cin * k * k)

    def dense(self, name, din, dout):
        self.uniform(f"{name}.w", (din, dout), din)
        self.uniform(f"{name}.b", (dout,), din)

    def resblock(self, name, cin, cout, embed_dim):
        self.conv(f"{name}.conv1", cin, cout, 3)
        self.dense(f"{name}.emb1", embed_dim, embed_dim)
        self.dense(f"{name}.emb2", embed_dim, 2 * cout)
        # start near identity modulation: k_s ~ 1, k_b ~ 0
        self.params[f"{name}.emb2.b"].data[:cout] += 1.0
        self.conv(f"{name}.conv2", cout, cout, 3)
        if cin != cout:
            self.conv(f"{name}.skip", cin, cout, 1)


def _resblock(p, name, h, cond, groups):
    x = h
    h = ops.conv2d(ops.silu(ops.group_norm(h, groups)), p[f"{name}.conv1.w"], p[f"{name}.conv1.b"], 1, 1)

    def proj(c):
        e = ops.silu(ops.dense(c, p[f"{name}.emb1.w"], p[f"{name}.emb1.b"]))
        return ops.dense(e, p[f"{name}.emb2.w"], p[f"{name}.emb2.b"])

    h = ops.silu(adagn(h, cond, proj, groups))
    h = ops.conv2d(h, p[f"{name}.conv2.w"], p[f"{name}.conv2.b"], 1, 1)
    if f"{name}.skip.w" in p:
        x = ops.conv2d(x, p[f"{name}.skip.w"], p[f"{name}.skip.b"], 1, 0)
    return ops.add(x, h)


def _as_batch(a, what):
    t = a if isinstance(a, Tensor) else Tensor(a)
    if t.ndim == 3:
        t = ops.reshape(t, (1,) + t.shape)
    if t.ndim != 4:
        raise DimensionError(f"{what} must be [N, C, S, S] or [C, S, S], got {t.shape}")
    return t


def _steps(t, n, T):
    ts = np.atleast_1d(np.asarray(t, dtype=np.int64))
    if ts.shape[0] == 1 and n > 1:
        ts = np.repeat(ts, n)
    if ts.shape != (n,):
        raise DimensionError(f"expected {n} timesteps, got {ts.shape[0]}")
    if np.any(ts < 1) or np.any(ts > T):
        raise InputError(f"timestep outside 1..{T}")
    return ts


class _Model:
    kind = ""

    def __init__(self, config, seed=0, params=None):
        self.config = config
        if params is None:
            params = self._build(np.random.default_rng(seed))
        self.params = params

    def parameters(self):
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def n_parameters(self):
        return int(np.sum([p.size for p in self.params.values()]))


class DenoiserModel(_Model):
    """Noise predictor f(x, y_t, k, t) over channel-concatenated [x | y_t]."""

    kind = "denoiser"

    def _build(self, rng):
        cfg = self.config
        init = _Init(rng)
        widths = cfg.widths()
        init.conv("in", cfg.in_channels_x + cfg.out_channels_y, cfg.base_width, 3)
        ch = cfg.base_width
        for lvl, w in enumerate(widths):
            init.resblock(f"down{lvl}", ch, w, cfg.embed_dim)
            ch = w
        init.resblock("mid", ch, ch, cfg.embed_dim)
        for lvl in reversed(range(cfg.depth)):
            init.resblock(f"up{lvl}", ch + widths[lvl], widths[lvl], cfg.embed_dim)
            ch = widths[lvl]
        init.conv("out", ch, cfg.out_channels_y, 3)
        init.params["class_table"] = Tensor(
            np.zeros((cfg.num_classes, cfg.embed_dim)), requires_grad=True, name="class_table"
        )
        return init.params

    @property
    def null_label(self):
        return self.config.num_classes - 1

    def conditioning(self, t, k, n):
        cfg = self.config
        temb = Tensor(timestep_embedding(_steps(t, n, cfg.steps), cfg.embed_dim, cfg.steps))
        labels, null = _labels(k, cfg.num_classes, n)
        if null.all():
            return temb
        return ops.add(temb, ops.embedding(self.params["class_table"], labels, null))

    def __call__(self, x, y_t, t, k=None):
        cfg, p = self.config, self.params
        x = _as_batch(x, "x")
        y_t = _as_batch(y_t, "y_t")
        n = y_t.shape[0]
        s = cfg.image_size
        if x.shape != (n, cfg.in_channels_x, s, s):
            raise DimensionError(f"x shape {x.shape} != {(n, cfg.in_channels_x, s, s)}")
        if y_t.shape != (n, cfg.out_channels_y, s, s):
            raise DimensionError(f"y_t shape {y_t.shape} != {(n, cfg.out_channels_y, s, s)}")
        cond = self.conditioning(t, k, n)
        g = cfg.groups
        h = ops.conv2d(ops.concat([x, y_t], axis=1), p["in.w"], p["in.b"], 1, 1)
        skips = []
        for lvl in range(cfg.depth):
            h = _resblock(p, f"down{lvl}", h, cond, g)
            skips.append(h)
            h = ops.avg_pool2(h)
        h = _resblock(p, "mid", h, cond, g)
        for lvl in reversed(range(cfg.depth)):
            h = ops.concat([ops.upsample2(h), skips[lvl]], axis=1)
            h = _resblock(p, f"up{lvl}", h, cond, g)
        h = ops.silu(ops.group_norm(h, g))
        return ops.conv2d(h, p["out.w"], p["out.b"], 1, 1)


denoiser_forward = DenoiserModel.__call__


class ClassifierModel(_Model):
    """Downsampling branch with a pooled dense head; timestep-conditioned only."""

    kind = "classifier"

    def _build(self, rng):
        cfg = self.config
        init = _Init(rng)
        init.conv("in", cfg.out_channels_y, cfg.base_width, 3)
        ch = cfg.base_width
        for lvl, w in enumerate(cfg.widths()):
            init.resblock(f"down{lvl}", ch, w, cfg.embed_dim)
            ch = w
        init.resblock("mid", ch, ch, cfg.embed_dim)
        init.dense("head", ch, cfg.num_classes)
        return init.params

    def logits(self, y_t, t):
        cfg, p = self.config, self.params
        y_t = _as_batch(y_t, "y_t")
        n = y_t.shape[0]
        s = cfg.image_size
        if y_t.shape != (n, cfg.out_channels_y, s, s):
            raise DimensionError(f"y_t shape {y_t.shape} != {(n, cfg.out_channels_y, s, s)}")
        cond = Tensor(timestep_embedding(_steps(t, n, cfg.steps), cfg.embed_dim, cfg.steps))
        g = cfg.groups
        h = ops.conv2d(y_t, p["in.w"], p["in.b"], 1, 1)
        for lvl in range(cfg.depth):
            h = ops.avg_pool2(_resblock(p, f"down{lvl}", h, cond, g))
        h = _resblock(p, "mid", h, cond, g)
        h = ops.global_avg_pool(ops.silu(ops.group_norm(h, g)))
        return ops.dense(h, p["head.w"], p["head.b"])

    def __call__(self, y_t, t):
        """Log-probabilities log p(k | y_t), shape [N, num_classes]."""
        return ops.log_softmax(self.logits(y_t, t))


def classifier_forward(model, y_t, t):
    return model(y_t, t)


def classifier_grad(model, y_t, t, k):
    """Gradient of sum_n log p(k_n | y_t[n]) w.r.t. y_t (per-sample independent)."""
    arr = np.asarray(getattr(y_t, "data", y_t), dtype=np.float64)
    squeeze = arr.ndim == 3
    y = Tensor(arr[None] if squeeze else arr, requires_grad=True)
    n = y.shape[0]
    labels = np.atleast_1d(np.asarray(k, dtype=np.int64))
    if labels.shape[0] == 1 and n > 1:
        labels = np.repeat(labels, n)
    with Tape() as tape:
        lp = ops.sum(ops.pick(model(y, t), labels))
    backward(tape, lp, inputs=[y])
    g = y.grad
    return g[0] if squeeze else g


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, model, meta=None):
    """Write a checkpoint: magic, version u8, u32 header length, JSON header, GI2I blobs."""
    blobs, entries, offset = [], [], 0
    for name, p in model.params.items():
        b = tensor_to_bytes(p.data)
        entries.append({"name": name, "offset": offset, "shape": list(p.shape)})
        blobs.append(b)
        offset += len(b)
    header = {
        "kind": model.kind,
        "config": asdict(model.config),
        "meta": meta or {},
        "tensors": entries,
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<BI", CKPT_VERSION, len(hb)) + hb)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path):
    """Return (model, meta) from a checkpoint written by :func:`save_checkpoint`."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != CKPT_MAGIC:
        raise InputError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<BI", buf, 4)
    if version != CKPT_VERSION:
        raise InputError(f"{path}: unsupported checkpoint version {version}")
    start = 9 + hlen
    header = json.loads(buf[9:start].decode("utf-8"))
    cfg = NetworkConfig(**header["config"])
    params = {}
    for e in header["tensors"]:
        arr, _ = tensor_from_bytes(buf, start + e["offset"])
        if list(arr.shape) != e["shape"]:
            raise InputError(f"{path}: tensor {e['name']} shape mismatch")
        params[e["name"]] = Tensor(arr, requires_grad=True, name=e["name"])
    cls = {"denoiser": DenoiserModel, "classifier": ClassifierModel}.get(header["kind"])
    if cls is None:
        raise InputError(f"{path}: unknown model kind {header['kind']!r}")
    expected = cls(cfg, seed=0)
    if {k: v.shape for k, v in expected.params.items()} != {k: v.shape for k, v in params.items()}:
        raise InputError(f"{path}: parameters do not match config")
    return cls(cfg, params=params), header["meta"]
