"""Encoder-decoder segmentation network with hand-written reverse mode.

Layout is NHWC throughout. ``forward`` records what each layer needs for
its backward pass; ``Loss.backward`` walks the network in reverse and
returns one gradient array per parameter.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

NUM_CLASSES = 4
PROB_FLOOR = 1e-12


class ModelConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    depth: int = 3
    base_channels: int = 16
    num_classes: int = NUM_CLASSES
    attention: bool = False
    attention_heads: int = 1
    input_size: tuple[int, int] = (32, 32)

    def __post_init__(self):
        self.input_size = tuple(int(s) for s in self.input_size)

    def validate(self):
        if self.depth < 1:
            raise ModelConfigError("depth must be >= 1")
        if self.base_channels < 1:
            raise ModelConfigError("base_channels must be >= 1")
        if self.num_classes != NUM_CLASSES:
            raise ModelConfigError(f"num_classes must be {NUM_CLASSES}")
        f = 2**self.depth
        h, w = self.input_size
        if h % f or w % f:
            raise ModelConfigError(f"input size {self.input_size} not divisible by 2**depth = {f}")
        if self.attention and self.bottleneck_channels % self.attention_heads:
            raise ModelConfigError(
                f"{self.attention_heads} heads do not divide {self.bottleneck_channels} bottleneck channels"
            )
        return self

    @property
    def bottleneck_channels(self):
        return self.base_channels * 2**self.depth

    def to_dict(self):
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        return d


# ------------------------------------------------------------------ layer math


def _conv3x3(x, w, b):
    n, h, wd, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.concatenate([xp[:, i : i + h, j : j + wd, :] for i in range(3) for j in range(3)], axis=-1)
    out = cols.reshape(-1, 9 * c) @ w.reshape(9 * c, -1) + b
    return out.reshape(n, h, wd, -1), cols


def _conv3x3_backward(dout, cols, w):
    n, h, wd, cout = dout.shape
    c = w.shape[2]
    d2 = dout.reshape(-1, cout)
    dw = (cols.reshape(-1, 9 * c).T @ d2).reshape(w.shape)
    db = d2.sum(axis=0)
    dcols = (d2 @ w.reshape(9 * c, cout).T).reshape(n, h, wd, 9, c)
    dxp = np.zeros((n, h + 2, wd + 2, c), dtype=dout.dtype)
    k = 0
    for i in range(3):
        for j in range(3):
            dxp[:, i : i + h, j : j + wd, :] += dcols[:, :, :, k, :]
            k += 1
    return dxp[:, 1:-1, 1:-1, :], dw, db


def _maxpool2(x):
    n, h, w, c = x.shape
    blocks = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, idx


def _maxpool2_backward(dout, idx):
    n, h2, w2, c = dout.shape
    dblocks = np.zeros((n, h2, w2, c, 4), dtype=dout.dtype)
    np.put_along_axis(dblocks, idx[..., None], dout[..., None], axis=-1)
    return dblocks.reshape(n, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, 2 * h2, 2 * w2, c)


def _upsample2(x):
    return x.repeat(2, axis=1).repeat(2, axis=2)


def _upsample2_backward(dout):
    n, h, w, c = dout.shape
    return dout.reshape(n, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))


def _softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _attention(x, wq, wk, wv, wo, heads):
    n, h, w, c = x.shape
    t = h * w
    d = c // heads
    xs = x.reshape(n, t, c)

    def split(a):
        return a.reshape(n, t, heads, d).transpose(0, 2, 1, 3)

    q, k, v = split(xs @ wq), split(xs @ wk), split(xs @ wv)
    scale = 1.0 / math.sqrt(d)
    a = _softmax(q @ k.transpose(0, 1, 3, 2) * scale)
    o = (a @ v).transpose(0, 2, 1, 3).reshape(n, t, c)
    out = xs + o @ wo
    cache = (xs, q, k, v, a, o, scale)
    return out.reshape(n, h, w, c), cache


def _attention_backward(dout, cache, wq, wk, wv, wo, heads):
    xs, q, k, v, a, o, scale = cache
    n, t, c = xs.shape
    d = c // heads
    dy = dout.reshape(n, t, c)
    dwo = o.reshape(-1, c).T @ dy.reshape(-1, c)
    do = (dy @ wo.T).reshape(n, t, heads, d).transpose(0, 2, 1, 3)
    da = do @ v.transpose(0, 1, 3, 2)
    dv = a.transpose(0, 1, 3, 2) @ do
    ds = a * (da - (da * a).sum(axis=-1, keepdims=True)) * scale
    dq = ds @ k
    dk = ds.transpose(0, 1, 3, 2) @ q

    def merge(g):
        return g.transpose(0, 2, 1, 3).reshape(n, t, c)

    dq, dk, dv = merge(dq), merge(dk), merge(dv)
    flat = xs.reshape(-1, c)
    dwq = flat.T @ dq.reshape(-1, c)
    dwk = flat.T @ dk.reshape(-1, c)
    dwv = flat.T @ dv.reshape(-1, c)
    dx = dy + dq @ wq.T + dk @ wk.T + dv @ wv.T
    return dx.reshape(dout.shape), dwq, dwk, dwv, dwo


# ---------------------------------------------------------------------- model


class SegmentationNet:
    """UNet-style segmenter; ``attention=True`` adds a self-attention bottleneck."""

    def __init__(self, config, params):
        self.config = config
        self.params = params

    @property
    def input_size(self):
        return self.config.input_size

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def n_parameters(self):
        return int(sum(p.size for p in self.params.values()))

    def astype(self, dtype):
        return SegmentationNet(self.config, {k: v.astype(dtype) for k, v in self.params.items()})

    def copy(self):
        return self.astype(self.dtype)

    def predict_proba(self, images, batch_size=64):
        images = np.asarray(images)
        out = [forward(self, images[i : i + batch_size]).probs for i in range(0, len(images), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, *self.input_size, NUM_CLASSES))

    def predict(self, images, batch_size=64):
        return self.predict_proba(images, batch_size).argmax(axis=-1).astype(np.uint8)


def _param_shapes(cfg):
    shapes = {}
    c_in = 1
    for lvl in range(cfg.depth):
        c = cfg.base_channels * 2**lvl
        shapes[f"enc{lvl}.conv1.w"] = (3, 3, c_in, c)
        shapes[f"enc{lvl}.conv1.b"] = (c,)
        shapes[f"enc{lvl}.conv2.w"] = (3, 3, c, c)
        shapes[f"enc{lvl}.conv2.b"] = (c,)
        c_in = c
    cb = cfg.bottleneck_channels
    shapes["mid.conv1.w"] = (3, 3, c_in, cb)
    shapes["mid.conv1.b"] = (cb,)
    shapes["mid.conv2.w"] = (3, 3, cb, cb)
    shapes["mid.conv2.b"] = (cb,)
    if cfg.attention:
        for name in ("q", "k", "v", "o"):
            shapes[f"mid.attn.w{name}"] = (cb, cb)
    c_prev = cb
    for lvl in reversed(range(cfg.depth)):
        c = cfg.base_channels * 2**lvl
        shapes[f"dec{lvl}.conv1.w"] = (3, 3, c_prev + c, c)
        shapes[f"dec{lvl}.conv1.b"] = (c,)
        shapes[f"dec{lvl}.conv2.w"] = (3, 3, c, c)
        shapes[f"dec{lvl}.conv2.b"] = (c,)
        c_prev = c
    shapes["head.w"] = (cfg.base_channels, cfg.num_classes)
    shapes["head.b"] = (cfg.num_classes,)
    return shapes


def init_model(config, seed=0, dtype=np.float32):
    """He-normal weights (fan-in scaled), zero biases; deterministic in ``seed``."""
    config.validate()
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in _param_shapes(config).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=dtype)
            continue
        fan_in = int(np.prod(shape[:-1]))
        gain = 1.0 if ".attn." in name or name == "head.w" else 2.0
        params[name] = (rng.standard_normal(shape) * math.sqrt(gain / fan_in)).astype(dtype)
    return SegmentationNet(config, params)


@dataclass
class PredictionMap:
    probs: np.ndarray  # (batch, H, W, classes)
    model: SegmentationNet = field(repr=False, default=None)
    tape: list = field(repr=False, default_factory=list)

    @property
    def labels(self):
        return self.probs.argmax(axis=-1)


def forward(model, images):
    """Run the network on (batch, H, W) images and return per-pixel class probabilities."""
    cfg = model.config
    p = model.params
    x = np.asarray(images)
    if x.ndim != 3 or tuple(x.shape[1:]) != tuple(cfg.input_size):
        raise ValueError(f"expected images of shape (batch, {cfg.input_size[0]}, {cfg.input_size[1]}), got {x.shape}")
    h = x.astype(model.dtype, copy=False)[..., None]
    tape = []

    def conv_relu(h, name):
        z, cols = _conv3x3(h, p[name + ".w"], p[name + ".b"])
        tape.append(("conv", name, cols))
        tape.append(("relu", z > 0))
        return np.maximum(z, 0)

    skips = []
    for lvl in range(cfg.depth):
        h = conv_relu(h, f"enc{lvl}.conv1")
        h = conv_relu(h, f"enc{lvl}.conv2")
        skips.append(h)
        h, idx = _maxpool2(h)
        tape.append(("pool", idx))
    h = conv_relu(h, "mid.conv1")
    h = conv_relu(h, "mid.conv2")
    if cfg.attention:
        h, cache = _attention(
            h, p["mid.attn.wq"], p["mid.attn.wk"], p["mid.attn.wv"], p["mid.attn.wo"], cfg.attention_heads
        )
        tape.append(("attn", cache))
    for lvl in reversed(range(cfg.depth)):
        c_up = h.shape[-1]
        h = np.concatenate([_upsample2(h), skips[lvl]], axis=-1)
        tape.append(("upcat", lvl, c_up))
        h = conv_relu(h, f"dec{lvl}.conv1")
        h = conv_relu(h, f"dec{lvl}.conv2")
    logits = h @ p["head.w"] + p["head.b"]
    tape.append(("head", h))
    probs = _softmax(logits)
    return PredictionMap(probs=probs, model=model, tape=tape)


def _backward(pred, dlogits):
    model = pred.model
    cfg = model.config
    p = model.params
    grads = {}
    tape = list(pred.tape)
    kind, h_head = tape.pop()
    c = h_head.shape[-1]
    grads["head.w"] = h_head.reshape(-1, c).T @ dlogits.reshape(-1, cfg.num_classes)
    grads["head.b"] = dlogits.reshape(-1, cfg.num_classes).sum(axis=0)
    dh = dlogits @ p["head.w"].T
    skip_grads = {}
    while tape:
        entry = tape.pop()
        kind = entry[0]
        if kind == "relu":
            dh = dh * entry[1]
        elif kind == "conv":
            _, name, cols = entry
            dh, grads[name + ".w"], grads[name + ".b"] = _conv3x3_backward(dh, cols, p[name + ".w"])
        elif kind == "upcat":
            _, lvl, c_up = entry
            skip_grads[lvl] = dh[..., c_up:]
            dh = _upsample2_backward(dh[..., :c_up])
        elif kind == "attn":
            dh, *dws = _attention_backward(
                dh, entry[1], p["mid.attn.wq"], p["mid.attn.wk"], p["mid.attn.wv"], p["mid.attn.wo"],
                cfg.attention_heads,
            )
            for name, g in zip(("wq", "wk", "wv", "wo"), dws):
                grads[f"mid.attn.{name}"] = g
        elif kind == "pool":
            dh = _maxpool2_backward(dh, entry[1])
            # the skip tensor leaving this level also feeds the decoder
            lvl = sum(1 for e in tape if e[0] == "pool")
            dh = dh + skip_grads.pop(lvl)
    return {name: grads[name].astype(p[name].dtype, copy=False) for name in p}


class Loss:
    """Scalar cross-entropy that remembers how to differentiate itself."""

    def __init__(self, value, pred, dlogits, per_sample=None):
        self.value = value
        self.pred = pred
        self._dlogits = dlogits
        self.per_sample = per_sample

    def __float__(self):
        return float(self.value)

    def __repr__(self):
        return f"Loss({self.value:.6g})"

    def backward(self):
        return _backward(self.pred, self._dlogits)


def cross_entropy_loss(pred, labels, sample_weights=None):
    """Mean over batch and pixels of -log p(true class), with a 1e-12 probability floor.

    ``sample_weights`` (one per image) replaces the 1/batch averaging, e.g.
    1/b per image of each disease sub-batch gives a sum of sub-batch means.
    """
    probs = pred.probs
    labels = np.asarray(labels)
    if labels.shape != probs.shape[:-1]:
        raise ValueError(f"labels shape {labels.shape} does not match predictions {probs.shape[:-1]}")
    if labels.size and (labels.min() < 0 or labels.max() >= probs.shape[-1]):
        raise ValueError(f"labels must lie in [0, {probs.shape[-1]})")
    n = probs.shape[0]
    n_pix = int(np.prod(probs.shape[1:-1]))
    if sample_weights is None:
        sample_weights = np.full(n, 1.0 / n)
    sample_weights = np.asarray(sample_weights, dtype=np.float64)
    lab = labels.astype(np.int64)
    p_true = np.take_along_axis(probs, lab[..., None], axis=-1)[..., 0]
    nll = -np.log(np.maximum(p_true.astype(np.float64), PROB_FLOOR))
    per_sample = nll.reshape(n, -1).mean(axis=1)
    value = float(per_sample @ sample_weights)
    onehot = np.zeros_like(probs)
    np.put_along_axis(onehot, lab[..., None], 1.0, axis=-1)
    active = (p_true >= PROB_FLOOR)[..., None]
    scale = (sample_weights / n_pix).astype(probs.dtype).reshape(n, *([1] * (probs.ndim - 1)))
    dlogits = (probs - onehot) * active * scale
    return Loss(value, pred, dlogits, per_sample)


class Adam:
    def __init__(self, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params, grads):
        self.t += 1
        b1, b2 = self.betas
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        for name, g in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            params[name] -= update.astype(params[name].dtype, copy=False)


def check_finite(grads):
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise FloatingPointError(f"non-finite gradient in parameter {name!r} ({bad} of {g.size} entries)")


def backward_and_step(model, loss, optimizer):
    """Differentiate ``loss`` w.r.t. every parameter and apply one Adam update."""
    grads = loss.backward()
    check_finite(grads)
    optimizer.step(model.params, grads)
    return model, optimizer


def l1_norm(model):
    params = model.params if hasattr(model, "params") else model
    return float(sum(np.abs(p.astype(np.float64)).sum() for p in params.values()))


# ----------------------------------------------------------------- checkpoint

_MAGIC = b"CSEGCKPT"


def save_checkpoint(model, path, metadata=None):
    """Header JSON plus one little-endian float32 payload, in a single file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest, offset = [], 0
    for name, arr in model.params.items():
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 4
    header = {"format_version": 1, "config": model.config.to_dict(), "params": manifest, "metadata": metadata or {}}
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in model.params.values())
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(_MAGIC + struct.pack("<Q", len(blob)) + blob + payload)
    tmp.replace(path)
    return path


def load_checkpoint(path):
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + n].decode("utf-8"))
    if header.get("format_version") != 1:
        raise ValueError(f"{path}: unknown checkpoint version {header.get('format_version')!r}")
    payload = raw[16 + n :]
    cfg = ModelConfig(**header["config"]).validate()
    params = {}
    for entry in header["params"]:
        size = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = entry["offset"]
        if start + 4 * size > len(payload):
            raise ValueError(f"{path}: payload too short for {entry['name']}")
        params[entry["name"]] = (
            np.frombuffer(payload, dtype="<f4", count=size, offset=start).reshape(entry["shape"]).astype(np.float32)
        )
    expected = _param_shapes(cfg)
    if list(params) != list(expected) or any(params[k].shape != tuple(v) for k, v in expected.items()):
        raise ValueError(f"{path}: parameter manifest does not match the model config")
    model = SegmentationNet(cfg, params)
    model.metadata = header.get("metadata", {})
    return model


def file_sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
