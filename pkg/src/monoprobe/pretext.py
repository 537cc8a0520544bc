"""Self-supervised pretext trainers: rotation prediction and deep clustering."""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import augment as A
from . import dataset as D
from . import nn
from .encoder import Network
from .errors import DimensionError, TrainingDivergedError, ValidationError
from .kernels import assign_nearest


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from a tuple of ints."""
    return int(np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts]).generate_state(2, np.uint64)[0] >> 1)


# --------------------------------------------------------------------------
# rotation batches
# --------------------------------------------------------------------------


@dataclass
class RotBatch:
    images: np.ndarray
    labels: np.ndarray


def make_rot_batch(patches) -> RotBatch:
    """All four counter-clockwise quarter turns of every NCHW patch, patch-major:
    rows 4i..4i+3 hold patch i turned by 0, 90, 180 and 270 degrees."""
    x = np.asarray(patches)
    if x.ndim != 4:
        raise DimensionError(f"expected NCHW patches, got shape {x.shape}")
    if x.shape[2] != x.shape[3]:
        raise DimensionError(f"rotation batches need square patches, got {x.shape[2]}x{x.shape[3]}")
    turns = np.stack([np.rot90(x, k, axes=(2, 3)) for k in range(4)], axis=1)
    images = np.ascontiguousarray(turns.reshape((-1,) + x.shape[1:]))
    labels = np.tile(np.arange(4, dtype=np.int64), len(x))
    return RotBatch(images, labels)


# --------------------------------------------------------------------------
# hyperparameters and data plumbing
# --------------------------------------------------------------------------


@dataclass
class PretextHyper:
    epochs: int = 5
    batch_size: int = 64
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_milestones: tuple = ()
    lr_gamma: float = 0.2
    native_aug: bool = True
    crop_pad: int = 4
    epoch_seed: int = 0
    threads: int = 1
    # deep clustering
    clusters: int = 64
    pca_dim: int = 32
    kmeans_iters: int = 50
    cluster_seed: int = 0
    dc_beta: float = 0.08
    dc_gamma: float = 0.75
    max_steps: int | None = None

    def __post_init__(self):
        bad = []
        if self.epochs < 0:
            bad.append("epochs")
        if self.batch_size < 1:
            bad.append("batch_size")
        if not self.learning_rate >= 0:
            bad.append("learning_rate")
        if not 0 <= self.momentum < 1:
            bad.append("momentum")
        if self.clusters < 1:
            bad.append("clusters")
        if self.pca_dim < 1:
            bad.append("pca_dim")
        if not 0 < self.dc_beta <= 1:
            bad.append("dc_beta")
        if not 0 < self.dc_gamma <= 1:
            bad.append("dc_gamma")
        if bad:
            raise ValidationError(f"invalid pretext hyperparameters: {', '.join(bad)}")
        self.lr_milestones = tuple(int(m) for m in self.lr_milestones)

    def lr_at(self, epoch):
        drops = sum(epoch >= m for m in self.lr_milestones)
        return self.learning_rate * self.lr_gamma**drops

    def to_dict(self):
        d = asdict(self)
        d["lr_milestones"] = list(self.lr_milestones)
        return d


def as_array_data(data, threads=1) -> np.ndarray:
    """NCHW float32 array for a SynthDataset or anything array-like. The
    dataset is materialised once; every later epoch reads the same bytes."""
    if isinstance(data, D.SynthDataset):
        return D.materialize(data, range(len(data)), threads)
    x = np.asarray(data, dtype=np.float32)
    if x.ndim != 4:
        raise DimensionError(f"expected NCHW data, got shape {x.shape}")
    return x


def random_translate(x, pad, rng):
    """Zero-pad by ``pad`` and take a random same-size crop per image."""
    if pad <= 0:
        return x
    n, c, h, w = x.shape
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ox = rng.integers(0, 2 * pad + 1, n)
    oy = rng.integers(0, 2 * pad + 1, n)
    out = np.empty_like(x)
    for i in range(n):
        out[i] = padded[i, :, oy[i] : oy[i] + h, ox[i] : ox[i] + w]
    return out


def random_flip(x, rng):
    flip = rng.random(len(x)) < 0.5
    out = x.copy()
    out[flip] = out[flip][..., ::-1]
    return out


def resized_crops(x, seed, positions, beta, gamma):
    """Random resized crop of every NCHW image back to its own size."""
    cfg = A.AugmentConfig(beta=beta, gamma=gamma, max_rot_deg=0.0)
    n, _, h, w = x.shape
    out = np.empty_like(x)
    for i in range(n):
        c = A.sample_crop(A.SampleRng(seed, int(positions[i])), w, h, cfg)
        patch = x[i, :, c.y : c.y + c.h, c.x : c.x + c.w].transpose(1, 2, 0)
        out[i] = A.bilinear_resize(patch, w, h).transpose(2, 0, 1)
    return out


def _check_loss(loss, epoch, step):
    if not np.isfinite(loss):
        raise TrainingDivergedError(f"loss became {loss} at epoch {epoch}, step {step}", epoch=epoch, step=step)


def _sgd(net: Network, state: nn.SgdState, epoch, step):
    try:
        nn.sgd_step(net.trainable_parameters(), state)
    except TrainingDivergedError as exc:
        raise TrainingDivergedError(str(exc) + f" (epoch {epoch}, step {step})", exc.param, epoch, step) from exc


# --------------------------------------------------------------------------
# rotation prediction
# --------------------------------------------------------------------------


def rotation_accuracy(net: Network, patches, batch_size=128):
    """Fraction of correctly predicted quarter turns over all four rotations
    of every patch (eval mode)."""
    x = as_array_data(patches)
    net.eval()
    correct = total = 0
    with nn.no_grad():
        for lo in range(0, len(x), batch_size):
            rb = make_rot_batch(x[lo : lo + batch_size])
            pred = net(rb.images).data.argmax(axis=1)
            correct += int((pred == rb.labels).sum())
            total += len(rb.labels)
    return correct / max(total, 1)


def train_rotnet(data, net: Network, hyper: PretextHyper, on_epoch=None):
    """Train ``net`` to predict quarter-turn rotations of ``data``.

    ``data`` is a SynthDataset or an NCHW array of square patches. Returns
    (net, per-epoch stats). ``on_epoch(net, stats_row)`` runs after every
    completed epoch, e.g. to keep the last good checkpoint.
    """
    if net.config.num_classes != 4:
        raise ValidationError(f"rotation prediction needs a 4-way head, got {net.config.num_classes}")
    x = as_array_data(data, hyper.threads)
    state = nn.SgdState(hyper.learning_rate, hyper.momentum, hyper.weight_decay)
    stats = []
    step = 0
    for epoch in range(hyper.epochs):
        state.learning_rate = hyper.lr_at(epoch)
        rng = np.random.default_rng(derive_seed(hyper.epoch_seed, epoch, 1))
        order = D.epoch_order(len(x), derive_seed(hyper.epoch_seed, epoch))
        net.train()
        loss_sum = correct = seen = 0.0
        for lo in range(0, len(x), hyper.batch_size):
            patches = x[order[lo : lo + hyper.batch_size]]
            if hyper.native_aug:
                patches = random_flip(random_translate(patches, hyper.crop_pad, rng), rng)
            rb = make_rot_batch(patches)
            params = net.trainable_parameters()
            nn.zero_grads(params)
            logits = net(rb.images)
            loss = nn.softmax_cross_entropy(logits, rb.labels)
            _check_loss(float(loss.data), epoch, step)
            loss.backward()
            _sgd(net, state, epoch, step)
            n = len(rb.labels)
            loss_sum += float(loss.data) * n
            correct += int((logits.data.argmax(axis=1) == rb.labels).sum())
            seen += n
            step += 1
            if hyper.max_steps is not None and step >= hyper.max_steps:
                break
        row = {"epoch": epoch, "loss": loss_sum / max(seen, 1), "accuracy": correct / max(seen, 1)}
        stats.append(row)
        if on_epoch is not None:
            on_epoch(net, row)
        if hyper.max_steps is not None and step >= hyper.max_steps:
            break
    net.eval()
    return net, stats


# --------------------------------------------------------------------------
# PCA and k-means
# --------------------------------------------------------------------------


@dataclass
class PCA:
    mean: np.ndarray
    basis: np.ndarray  # D x p, orthonormal columns
    explained: np.ndarray  # descending


def pca_fit(features, p) -> PCA:
    """Top-``p`` principal axes of the rows of ``features``.

    Uses the D x D covariance when D <= M and the M x M Gram matrix otherwise.
    If fewer than ``p`` directions carry variance, ``p`` is reduced with a
    warning. Each axis is signed so its largest-magnitude entry is positive.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError(f"features must be 2-D, got shape {x.shape}")
    m, dim = x.shape
    if not 1 <= p < m:
        raise ValidationError(f"need M > p >= 1, got M={m}, p={p}")
    p = min(p, dim)
    mean = x.mean(axis=0)
    xc = x - mean
    if dim <= m:
        vals, vecs = np.linalg.eigh(xc.T @ xc / (m - 1))
        vals, vecs = vals[::-1], vecs[:, ::-1]
    else:
        vals, u = np.linalg.eigh(xc @ xc.T / (m - 1))
        vals, u = vals[::-1], u[:, ::-1]
        keep = vals > 0
        vecs = np.zeros((dim, len(vals)))
        vecs[:, keep] = xc.T @ u[:, keep] / np.sqrt(vals[keep] * (m - 1))
    tol = max(vals[0], 0.0) * max(m, dim) * np.finfo(np.float64).eps
    rank = int((vals > tol).sum())
    if rank < p:
        warnings.warn(f"features have rank {rank} < p={p}; keeping {max(rank, 1)} components", stacklevel=2)
        p = max(rank, 1)
    basis = vecs[:, :p]
    signs = np.sign(basis[np.abs(basis).argmax(axis=0), np.arange(p)])
    basis = basis * np.where(signs == 0, 1.0, signs)
    return PCA(mean, np.ascontiguousarray(basis), np.maximum(vals[:p], 0.0))


def pca_apply(pca: PCA, features):
    return (np.asarray(features, dtype=np.float64) - pca.mean) @ pca.basis


@dataclass
class ClusterState:
    centroids: np.ndarray
    assignments: np.ndarray
    k: int
    objective: float
    history: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    reseeded: int = 0
    pca_mean: np.ndarray | None = None
    pca_basis: np.ndarray | None = None

    @property
    def sizes(self):
        return np.bincount(self.assignments, minlength=self.k)


def _kmeanspp(x, k, rng):
    m = len(x)
    centers = [int(rng.integers(m))]
    d2 = ((x - x[centers[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(m, p=d2 / total))
        else:
            nxt = int(rng.integers(m))
        centers.append(nxt)
        d2 = np.minimum(d2, ((x - x[nxt]) ** 2).sum(axis=1))
    return x[centers].copy()


def _means(x, labels, k, old):
    sums = np.zeros((k, x.shape[1]))
    np.add.at(sums, labels, x)
    counts = np.bincount(labels, minlength=k)
    out = old.copy()
    nz = counts > 0
    out[nz] = sums[nz] / counts[nz, None]
    return out


def _reseed_empty(x, labels, centroids, k, rng):
    """Give every empty cluster a random member of the current largest cluster."""
    moved = 0
    counts = np.bincount(labels, minlength=k)
    for j in np.flatnonzero(counts == 0):
        big = int(counts.argmax())
        members = np.flatnonzero(labels == big)
        pick = int(members[rng.integers(len(members))])
        labels[pick] = j
        centroids[j] = x[pick]
        counts[big] -= 1
        counts[j] = 1
        moved += 1
    return moved


def _objective(x, centroids, labels):
    return float(((x - centroids[labels]) ** 2).sum())


def kmeans(points, k, max_iters=50, seed=0) -> ClusterState:
    """k-means++ seeding followed by Lloyd iterations until the assignment is a
    fixpoint or ``max_iters`` updates have run. ``history`` holds the
    objective after every assignment and never increases."""
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError(f"points must be 2-D, got shape {x.shape}")
    m = len(x)
    if not 1 <= k <= m:
        raise ValidationError(f"k-means needs 1 <= k <= M, got k={k}, M={m}")
    rng = np.random.default_rng(seed)
    centroids = _kmeanspp(x, k, rng)
    labels, _ = assign_nearest(x, centroids)
    reseeded = _reseed_empty(x, labels, centroids, k, rng)
    history = [_objective(x, centroids, labels)]
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        centroids = _means(x, labels, k, centroids)
        new, _ = assign_nearest(x, centroids)
        reseeded += _reseed_empty(x, new, centroids, k, rng)
        history.append(_objective(x, centroids, new))
        if np.array_equal(new, labels):
            converged = True
            labels = new
            break
        labels = new
    centroids = _means(x, labels, k, centroids)
    final = _objective(x, centroids, labels)
    if final < history[-1]:
        history.append(final)
    return ClusterState(centroids, labels, k, min(final, history[-1]), history, it, converged, reseeded)


def nmi(a, b):
    """Normalised mutual information with the arithmetic-mean normaliser."""
    a = np.unique(np.asarray(a), return_inverse=True)[1]
    b = np.unique(np.asarray(b), return_inverse=True)[1]
    n = len(a)
    joint = np.zeros((a.max() + 1, b.max() + 1))
    np.add.at(joint, (a, b), 1)
    pxy = joint / n
    px, py = pxy.sum(1), pxy.sum(0)
    nz = pxy > 0
    mi = float((pxy[nz] * np.log(pxy[nz] / np.outer(px, py)[nz])).sum())
    hx = -float((px[px > 0] * np.log(px[px > 0])).sum())
    hy = -float((py[py > 0] * np.log(py[py > 0])).sum())
    if hx == 0 and hy == 0:
        return 1.0
    return max(0.0, mi / ((hx + hy) / 2))


# --------------------------------------------------------------------------
# deep clustering
# --------------------------------------------------------------------------


def extract_features(net: Network, x, batch_size=256):
    """Penultimate features for every row of ``x`` in eval mode."""
    net.eval()
    out = []
    with nn.no_grad():
        for lo in range(0, len(x), batch_size):
            out.append(net.features(x[lo : lo + batch_size]).data.astype(np.float64))
    return np.concatenate(out)


def deepcluster_train(data, net: Network, k, hyper: PretextHyper, on_epoch=None):
    """Alternate k-means pseudo-labelling of penultimate features with one pass
    of weighted cross-entropy training on those labels.

    Returns (net, per-epoch stats); the last ClusterState is kept in
    ``net.meta["cluster_sizes"]`` for reporting.
    """
    n_samples = len(data)
    if k > n_samples:
        raise ValidationError(f"k={k} clusters exceed d={n_samples} samples")
    x = as_array_data(data, hyper.threads)
    state = None
    stats = []
    prev = None
    step = 0
    for epoch in range(hyper.epochs):
        feats = extract_features(net, x)
        p = min(hyper.pca_dim, feats.shape[1], len(feats) - 1)
        pca = pca_fit(feats, p)
        reduced = pca_apply(pca, feats)
        cs = kmeans(reduced, k, hyper.kmeans_iters, derive_seed(hyper.cluster_seed, epoch))
        cs.pca_mean, cs.pca_basis = pca.mean, pca.basis
        labels = cs.assignments
        sizes = cs.sizes
        weights = (1.0 / sizes)[labels]
        net.replace_head(k, np.random.default_rng(derive_seed(hyper.cluster_seed, epoch, 7)))
        if state is None:
            state = nn.SgdState(hyper.learning_rate, hyper.momentum, hyper.weight_decay)
        state.learning_rate = hyper.lr_at(epoch)
        # a fresh head has no velocity history
        state.velocity = {n: v for n, v in state.velocity.items() if not n.startswith("head.")}
        rng = np.random.default_rng(derive_seed(hyper.epoch_seed, epoch, 1))
        crop_seed = derive_seed(hyper.epoch_seed, epoch, 2)
        order = D.epoch_order(len(x), derive_seed(hyper.epoch_seed, epoch))
        net.train()
        loss_sum = seen = 0.0
        for lo in range(0, len(x), hyper.batch_size):
            idx = order[lo : lo + hyper.batch_size]
            batch = x[idx]
            if hyper.native_aug:
                batch = random_flip(resized_crops(batch, crop_seed, idx, hyper.dc_beta, hyper.dc_gamma), rng)
            params = net.trainable_parameters()
            nn.zero_grads(params)
            loss = nn.softmax_cross_entropy(net(batch), labels[idx], weights[idx])
            _check_loss(float(loss.data), epoch, step)
            loss.backward()
            _sgd(net, state, epoch, step)
            loss_sum += float(loss.data) * len(idx)
            seen += len(idx)
            step += 1
        row = {
            "epoch": epoch,
            "loss": loss_sum / max(seen, 1),
            "objective": cs.objective,
            "min_cluster": int(sizes.min()),
            "max_cluster": int(sizes.max()),
            "nmi_prev": nmi(prev, labels) if prev is not None else float("nan"),
        }
        prev = labels
        stats.append(row)
        net.meta["cluster_sizes"] = sizes.tolist()
        if on_epoch is not None:
            on_epoch(net, row)
    net.eval()
    return net, stats


STAT_FIELDS = ("epoch", "loss", "accuracy", "objective", "min_cluster", "max_cluster", "nmi_prev")


def write_stats_csv(rows, path):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=STAT_FIELDS, restval="")
        w.writeheader()
        for row in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) and not math.isnan(v) else v) for k, v in row.items()})
