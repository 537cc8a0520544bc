"""Linear probes on frozen encoder taps, 10-crop scoring and frozen-prefix finetuning."""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import augment as A
from . import nn
from .encoder import Network, freeze_prefix
from .errors import ConfigError, DimensionError, StructureError, ValidationError
from .kernels import adaptive_maxpool
from .pretext import derive_seed, random_flip, random_translate

# flattened probe sizes for the five AlexNetBN taps at 224 input
ALEXNET_PROBE_DIMS = {"conv1": 9600, "conv2": 9216, "conv3": 9600, "conv4": 9600, "conv5": 9216}


# --------------------------------------------------------------------------
# batch-norm absorption
# --------------------------------------------------------------------------


def absorb_batchnorm(net: Network) -> Network:
    """Copy of ``net`` with every eval-mode BN folded into its convolution.

    For BN(conv(x)) with scale a, shift b, running mean mu and variance v:
    w' = w * a / sqrt(v + eps), bias' = (bias - mu) * a / sqrt(v + eps) + b.
    """
    if all(blk.bn is None for blk in net.blocks):
        raise StructureError("network has no batch-norm layers left to absorb")
    out = net.clone()
    for i, blk in enumerate(out.blocks):
        if blk.bn is None:
            raise StructureError(f"block {i + 1} has a convolution without a following batch norm")
        bn, conv = blk.bn, blk.conv
        w64 = conv.weight.data.astype(np.float64)
        scale = bn.weight.data.astype(np.float64) / np.sqrt(bn.running_var.astype(np.float64) + bn.eps)
        conv.weight.data = (w64 * scale[:, None, None, None]).astype(conv.weight.dtype)
        bias = (conv.bias.data - bn.running_mean) * scale + bn.bias.data
        conv.bias.data = bias.astype(conv.bias.dtype)
        blk.bn = None
    out.config = replace(out.config, batchnorm=False)
    return out


# --------------------------------------------------------------------------
# pooled tap features
# --------------------------------------------------------------------------


def pool_grid(channels, target_dim):
    """Integer g with channels * g * g == target_dim."""
    if target_dim % channels:
        raise ConfigError(f"target dim {target_dim} is not a multiple of {channels} channels")
    g = math.isqrt(target_dim // channels)
    if g * g * channels != target_dim:
        raise ConfigError(f"target dim {target_dim} / {channels} channels is not a square grid")
    return g


def pooled_features(activation, target_dim=None):
    """Adaptive max pool a (C, H, W) or (N, C, H, W) activation to a flat
    vector of ``target_dim`` entries; ``None`` keeps the raw activation."""
    a = np.asarray(activation)
    single = a.ndim == 3
    if single:
        a = a[None]
    if a.ndim != 4:
        raise DimensionError(f"expected (C, H, W) or (N, C, H, W), got shape {a.shape}")
    if target_dim is not None:
        g = pool_grid(a.shape[1], int(target_dim))
        if g > min(a.shape[2], a.shape[3]):
            raise ConfigError(f"grid {g}x{g} exceeds the {a.shape[2]}x{a.shape[3]} activation")
        a = adaptive_maxpool(a, g)
    flat = a.reshape(len(a), -1)
    return flat[0] if single else flat


def tap_features(net: Network, x, tap, target_dim=None, batch_size=256):
    """Pooled activations of ``tap`` for every row of ``x`` (eval mode)."""
    if tap not in net.taps:
        raise ConfigError(f"unknown tap {tap!r}; network has {list(net.taps)}")
    was_training = net.training
    net.eval()
    out = []
    try:
        with nn.no_grad():
            for lo in range(0, len(x), batch_size):
                taps, _ = net.forward_with_taps(x[lo : lo + batch_size], upto=tap)
                out.append(pooled_features(taps[tap].data, target_dim))
    finally:
        net.training = was_training
    return np.concatenate(out) if out else np.zeros((0, 0), np.float32)


# --------------------------------------------------------------------------
# learning-rate schedule
# --------------------------------------------------------------------------


def probe_lr(epoch, start=0.01, milestones=(5, 15, 25), factor=5.0):
    """Step schedule: ``start`` divided by ``factor`` at each milestone epoch."""
    return start / factor ** sum(epoch >= m for m in milestones)


# --------------------------------------------------------------------------
# spec / classifier / report
# --------------------------------------------------------------------------


@dataclass
class ProbeSpec:
    tap: str = "conv1"
    target_dim: int | None = None
    epochs: int = 36
    learning_rate: float = 0.01
    milestones: tuple = (5, 15, 25)
    lr_factor: float = 5.0
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 128
    standardize: bool = True
    # large-format inputs: resize the shorter side, random crop, flip
    large_format: bool = False
    resize: int = 256
    crop: int = 224
    flip: bool = True
    seed: int = 0

    def __post_init__(self):
        bad = []
        if self.epochs < 1:
            bad.append("epochs")
        if self.batch_size < 1:
            bad.append("batch_size")
        if not self.learning_rate > 0:
            bad.append("learning_rate")
        if not 0 <= self.momentum < 1:
            bad.append("momentum")
        if self.target_dim is not None and self.target_dim < 1:
            bad.append("target_dim")
        if self.large_format and self.crop > self.resize:
            bad.append("crop")
        if bad:
            raise ValidationError(f"invalid probe spec: {', '.join(bad)}")
        self.milestones = tuple(int(m) for m in self.milestones)

    def lr(self, epoch):
        return probe_lr(epoch, self.learning_rate, self.milestones, self.lr_factor)

    def to_dict(self):
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class LinearProbe:
    tap: str
    target_dim: int | None
    weight: np.ndarray  # (classes, features)
    bias: np.ndarray
    mean: np.ndarray
    scale: np.ndarray
    history: list = field(default_factory=list)

    def prepare(self, feats):
        return ((np.asarray(feats, dtype=np.float32) - self.mean) * self.scale).astype(np.float32)

    def scores(self, feats):
        """Softmax class scores for raw pooled features."""
        z = self.prepare(feats) @ self.weight.T + self.bias
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, feats):
        return self.scores(feats).argmax(axis=1)


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


@dataclass
class ProbeReport:
    method: str
    n_sources: int | str
    accuracies: dict  # tap -> top-1 percent
    protocol: str = "single-crop"
    seeds: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    wall_clock: float = 0.0
    config_hash: str = ""

    def __post_init__(self):
        for tap, acc in self.accuracies.items():
            if not 0.0 <= acc <= 100.0:
                raise ValidationError(f"accuracy for {tap} outside [0, 100]: {acc}")
        if not self.config_hash:
            self.config_hash = config_hash({"config": self.config, "seeds": self.seeds})

    def to_dict(self):
        return asdict(self)

    def save_json(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)

    @classmethod
    def load_json(cls, path):
        with open(path) as f:
            return cls(**json.load(f))

    def csv_row(self, taps):
        return [self.method, self.n_sources] + [
            f"{self.accuracies[t]:.1f}" if t in self.accuracies else "" for t in taps
        ]

    def save_csv(self, path):
        taps = list(self.accuracies)
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["method", "N"] + taps)
            w.writerow(self.csv_row(taps))


# --------------------------------------------------------------------------
# large-format preprocessing
# --------------------------------------------------------------------------


def resize_shorter(img_hwc, side):
    h, w = img_hwc.shape[:2]
    if h <= w:
        nh, nw = side, max(1, round(w * side / h))
    else:
        nw, nh = side, max(1, round(h * side / w))
    return A.bilinear_resize(img_hwc, nw, nh)


def center_crop(img_hwc, size):
    h, w = img_hwc.shape[:2]
    y, x = (h - size) // 2, (w - size) // 2
    return img_hwc[y : y + size, x : x + size]


def _large_format_batch(images, spec: ProbeSpec, rng=None):
    """List of HWC images in [-1, 1] -> NCHW float32 crops. With ``rng`` the
    crop position and flip are random, otherwise centred and unflipped."""
    out = []
    for img in images:
        r = resize_shorter(np.asarray(img, dtype=np.float64), spec.resize)
        h, w = r.shape[:2]
        if rng is None:
            c = center_crop(r, spec.crop)
        else:
            y = int(rng.integers(0, h - spec.crop + 1))
            x = int(rng.integers(0, w - spec.crop + 1))
            c = r[y : y + spec.crop, x : x + spec.crop]
            if spec.flip and rng.random() < 0.5:
                c = c[:, ::-1]
        out.append(c.transpose(2, 0, 1))
    return np.ascontiguousarray(np.stack(out), dtype=np.float32)


# --------------------------------------------------------------------------
# probe training
# --------------------------------------------------------------------------


def _feature_stats(feats, standardize):
    if not standardize:
        return np.zeros(feats.shape[1], np.float32), np.ones(feats.shape[1], np.float32)
    mean = feats.mean(axis=0, dtype=np.float64)
    std = feats.std(axis=0, dtype=np.float64)
    scale = np.where(std > 1e-8, 1.0 / np.maximum(std, 1e-8), 1.0)
    return mean.astype(np.float32), scale.astype(np.float32)


def fit_linear(feats, labels, num_classes, spec: ProbeSpec, mean=None, scale=None, feature_fn=None):
    """Softmax regression by SGD with the probe schedule.

    ``feats`` are pooled tap features; ``feature_fn(epoch, idx)`` optionally
    recomputes them per mini-batch (train-time augmentation).
    """
    labels = np.asarray(labels, dtype=np.int64)
    n, dim = len(labels), feats.shape[1] if feats is not None else len(mean)
    if mean is None:
        mean, scale = _feature_stats(feats, spec.standardize)
    head = nn.Linear(
        nn.Tensor(np.zeros((num_classes, dim), np.float32), requires_grad=True),
        nn.Tensor(np.zeros(num_classes, np.float32), requires_grad=True),
    )
    params = {"weight": head.weight, "bias": head.bias}
    state = nn.SgdState(spec.learning_rate, spec.momentum, spec.weight_decay)
    history = []
    for epoch in range(spec.epochs):
        state.learning_rate = spec.lr(epoch)
        order = np.random.default_rng(derive_seed(spec.seed, epoch)).permutation(n)
        loss_sum = correct = 0.0
        for lo in range(0, n, spec.batch_size):
            idx = order[lo : lo + spec.batch_size]
            f = feats[idx] if feature_fn is None else feature_fn(epoch, idx)
            x = nn.Tensor((f - mean) * scale)
            nn.zero_grads(params)
            logits = nn.linear(x, head)
            loss = nn.softmax_cross_entropy(logits, labels[idx])
            loss.backward()
            nn.sgd_step(params, state)
            loss_sum += float(loss.data) * len(idx)
            correct += int((logits.data.argmax(axis=1) == labels[idx]).sum())
        history.append({"epoch": epoch, "lr": state.learning_rate, "loss": loss_sum / n, "accuracy": correct / n})
    return head.weight.data.copy(), head.bias.data.copy(), mean, scale, history


def train_probe(net: Network, tap, images, labels, spec: ProbeSpec, num_classes=None) -> LinearProbe:
    """Train a linear classifier on the frozen ``tap`` features of ``images``.

    Small inputs (NCHW arrays at the encoder's size) are used as is; with
    ``spec.large_format`` the inputs are HWC images that get resized, randomly
    cropped and flipped every epoch. The encoder is never modified.
    """
    if tap not in net.taps:
        raise ConfigError(f"unknown tap {tap!r}; network has {list(net.taps)}")
    labels = np.asarray(labels, dtype=np.int64)
    num_classes = int(num_classes or labels.max() + 1)
    if not spec.large_format:
        feats = tap_features(net, np.asarray(images, dtype=np.float32), tap, spec.target_dim)
        w, b, mean, scale, hist = fit_linear(feats, labels, num_classes, spec)
        return LinearProbe(tap, spec.target_dim, w, b, mean, scale, hist)

    centred = tap_features(net, _large_format_batch(images, spec), tap, spec.target_dim)
    mean, scale = _feature_stats(centred, spec.standardize)

    def feature_fn(epoch, idx):
        rng = np.random.default_rng(derive_seed(spec.seed, epoch, int(idx[0]), len(idx)))
        batch = _large_format_batch([images[i] for i in idx], spec, rng)
        return tap_features(net, batch, tap, spec.target_dim)

    w, b, mean, scale, hist = fit_linear(None, labels, num_classes, spec, mean, scale, feature_fn)
    return LinearProbe(tap, spec.target_dim, w, b, mean, scale, hist)


def evaluate_probe(probe: LinearProbe, net: Network, images, labels) -> float:
    """Single-crop top-1 accuracy in percent."""
    feats = tap_features(net, np.asarray(images, dtype=np.float32), probe.tap, probe.target_dim)
    return 100.0 * float((probe.predict(feats) == np.asarray(labels)).mean())


# --------------------------------------------------------------------------
# 10-crop evaluation
# --------------------------------------------------------------------------

CROP_POSITIONS = ("top_left", "top_right", "bottom_left", "bottom_right", "center")


def ten_crops(images, size):
    """(10, N, C, size, size): four corners and the centre, then the same five
    crops mirrored horizontally."""
    x = np.asarray(images)
    _, _, h, w = x.shape
    if size > min(h, w):
        raise DimensionError(f"crop {size} larger than the {h}x{w} image")
    origins = [(0, 0), (0, w - size), (h - size, 0), (h - size, w - size), ((h - size) // 2, (w - size) // 2)]
    crops = [x[:, :, y : y + size, x0 : x0 + size] for y, x0 in origins]
    crops += [c[..., ::-1] for c in crops]
    return np.ascontiguousarray(np.stack(crops))


def ten_crop_scores(probe: LinearProbe, net: Network, images, crop_size, order=None):
    """Mean softmax score over the ten crops of each image."""
    crops = ten_crops(images, crop_size)
    order = range(10) if order is None else order
    total = None
    for j in order:
        s = probe.scores(tap_features(net, crops[j], probe.tap, probe.target_dim)).astype(np.float64)
        total = s if total is None else total + s
    return total / 10.0


def ten_crop_eval(probe: LinearProbe, net: Network, images, labels, crop_size=None) -> float:
    """Top-1 accuracy (percent) of the averaged ten-crop scores."""
    crop_size = crop_size or net.config.input_size
    scores = ten_crop_scores(probe, net, images, crop_size)
    return 100.0 * float((scores.argmax(axis=1) == np.asarray(labels)).mean())


def single_crop_eval(probe: LinearProbe, net: Network, images, labels, crop_size=None) -> float:
    crop_size = crop_size or net.config.input_size
    return evaluate_probe(probe, net, ten_crops(images, crop_size)[4], labels)


# --------------------------------------------------------------------------
# frozen-prefix finetuning
# --------------------------------------------------------------------------


@dataclass
class FinetuneHyper:
    epochs: int = 10
    batch_size: int = 128
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    milestones: tuple = ()
    lr_factor: float = 5.0
    augment: bool = True
    seed: int = 0
    head_seed: int = 0

    def lr(self, epoch):
        return probe_lr(epoch, self.learning_rate, self.milestones, self.lr_factor)


def finetune_frozen(net: Network, k_frozen, train_x, train_y, val_x, val_y, hyper: FinetuneHyper, num_classes=None):
    """Train every block after the first ``k_frozen`` plus a fresh classifier
    head; returns (top-1 percent on the validation set, trained copy)."""
    train_y = np.asarray(train_y, dtype=np.int64)
    num_classes = int(num_classes or train_y.max() + 1)
    model = net.clone()
    model.replace_head(num_classes, np.random.default_rng(hyper.head_seed))
    freeze_prefix(model, k_frozen)
    state = nn.SgdState(hyper.learning_rate, hyper.momentum, hyper.weight_decay)
    n = len(train_y)
    history = []
    for epoch in range(hyper.epochs):
        state.learning_rate = hyper.lr(epoch)
        rng = np.random.default_rng(derive_seed(hyper.seed, epoch, 1))
        order = np.random.default_rng(derive_seed(hyper.seed, epoch)).permutation(n)
        model.train()
        loss_sum = 0.0
        for lo in range(0, n, hyper.batch_size):
            idx = order[lo : lo + hyper.batch_size]
            if len(idx) < 2:
                continue  # batch statistics need two samples
            xb = train_x[idx]
            if hyper.augment:
                xb = random_flip(random_translate(xb, 4, rng), rng)
            params = model.trainable_parameters()
            nn.zero_grads(params)
            loss = nn.softmax_cross_entropy(model(xb), train_y[idx])
            loss.backward()
            nn.sgd_step(params, state)
            loss_sum += float(loss.data) * len(idx)
        history.append({"epoch": epoch, "loss": loss_sum / n})
    model.eval()
    model.meta["finetune_history"] = history
    return classify_accuracy(model, val_x, val_y), model


def classify_accuracy(net: Network, images, labels, batch_size=500) -> float:
    net.eval()
    correct = 0
    with nn.no_grad():
        for lo in range(0, len(images), batch_size):
            pred = net(images[lo : lo + batch_size]).data.argmax(axis=1)
            correct += int((pred == np.asarray(labels[lo : lo + batch_size])).sum())
    return 100.0 * correct / max(len(images), 1)

