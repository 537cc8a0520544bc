"""Deterministic d-sample datasets grown from N source images, plus image I/O."""
from __future__ import annotations

import hashlib
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from . import augment as A
from .errors import BoundsError, ValidationError


def load_image(path) -> np.ndarray:
    """PNG or PPM file -> (H, W, 3) float64 in [0, 1]. Gray is expanded to RGB
    and alpha is dropped."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            if im.format not in ("PNG", "PPM"):
                raise OSError(f"{path}: unsupported image format {im.format}")
            if im.mode in ("I;16", "I;16B", "I"):
                arr = np.asarray(im, dtype=np.float64) / 65535.0
                arr = np.repeat(arr[..., None], 3, axis=2)
            else:
                arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except (UnidentifiedImageError, FileNotFoundError, IsADirectoryError) as exc:
        raise OSError(f"{path}: cannot read image ({exc.__class__.__name__})") from exc
    if arr.size == 0:
        raise OSError(f"{path}: empty image")
    return arr


def to_uint8(img01):
    return np.round(np.clip(np.asarray(img01, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def save_image(path, img01):
    """Write an (H, W, 3) image in [0, 1] as 8-bit PNG."""
    Image.fromarray(to_uint8(img01), mode="RGB").save(path, format="PNG")


@dataclass
class SourceSet:
    images: list
    names: list = field(default_factory=list)

    def __post_init__(self):
        if not self.images:
            raise ValidationError("a source set needs at least one image")
        if not self.names:
            self.names = [chr(ord("A") + i) if i < 26 else f"img{i}" for i in range(len(self.images))]
        for im in self.images:
            if im.ndim != 3 or im.shape[2] != 3 or im.shape[0] < 1 or im.shape[1] < 1:
                raise ValidationError("source images must be nonempty (H, W, 3) arrays")

    def __len__(self):
        return len(self.images)

    @classmethod
    def from_paths(cls, paths):
        paths = [Path(p) for p in paths]
        return cls([load_image(p) for p in paths], [p.stem for p in paths])


@dataclass
class SynthDataset:
    sources: SourceSet
    d: int
    seed: int
    cfg: A.AugmentConfig

    def __post_init__(self):
        if self.d < len(self.sources):
            raise ValidationError(f"d={self.d} must be at least N={len(self.sources)}")

    @property
    def n_sources(self):
        return len(self.sources)

    def __len__(self):
        return self.d

    def __getitem__(self, i):
        return get_sample(self, i)


def original_patch(img, size):
    """Centre square of ``img``, normalised and resized to size x size."""
    h, w = img.shape[:2]
    c = A.center_square(w, h)
    patch = img[c.y : c.y + c.h, c.x : c.x + c.w]
    return np.clip(A.bilinear_resize(A.normalize(patch), size, size), -1, 1).astype(np.float32)


def get_sample(ds: SynthDataset, i: int) -> np.ndarray:
    """Sample ``i`` as (S, S, 3) float32 in [-1, 1]: the first N indices are the
    unaugmented sources, the rest augmentations of source ``i mod N``."""
    if not 0 <= i < ds.d:
        raise BoundsError(f"sample index {i} outside [0, {ds.d})")
    n = ds.n_sources
    src = ds.sources.images[i % n]
    if i < n:
        return original_patch(src, ds.cfg.target_size)
    return A.augment_sample(src, A.SampleRng(ds.seed, i), ds.cfg)


def materialize(ds: SynthDataset, indices, threads=1) -> np.ndarray:
    """Stack samples as an NCHW float32 batch; the result does not depend on
    ``threads``."""
    indices = [int(i) for i in indices]
    if threads > 1 and len(indices) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            samples = list(pool.map(lambda i: get_sample(ds, i), indices))
    else:
        samples = [get_sample(ds, i) for i in indices]
    return np.ascontiguousarray(np.stack(samples).transpose(0, 3, 1, 2))


def epoch_order(d, epoch_seed):
    return np.random.default_rng(epoch_seed).permutation(d)


def iterate_epoch(ds: SynthDataset, batch_size: int, epoch_seed: int, threads=1):
    """Yield (NCHW batch, indices) over a seeded permutation of [0, d); the last
    short batch is kept."""
    if batch_size < 1:
        raise ValidationError("batch_size must be at least 1")
    order = epoch_order(ds.d, epoch_seed)
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for lo in range(0, ds.d, batch_size):
            idx = order[lo : lo + batch_size]
            if pool is None:
                samples = [get_sample(ds, int(i)) for i in idx]
            else:
                samples = list(pool.map(lambda i: get_sample(ds, int(i)), idx))
            yield np.ascontiguousarray(np.stack(samples).transpose(0, 3, 1, 2)), idx
    finally:
        if pool is not None:
            pool.shutdown()


def quantize(sample):
    return to_uint8(A.denormalize(sample))


def dataset_checksum(ds: SynthDataset, threads=1, chunk=256) -> str:
    """Lowercase hex SHA-256 over every sample in index order, 8-bit quantised."""
    h = hashlib.sha256()
    for lo in range(0, ds.d, chunk):
        batch = materialize(ds, range(lo, min(lo + chunk, ds.d)), threads)
        h.update(quantize(batch.transpose(0, 2, 3, 1)).tobytes())
    return h.hexdigest()


def array_checksum(batch_nchw) -> str:
    """Same digest as ``dataset_checksum`` for an already materialised dataset."""
    return hashlib.sha256(quantize(np.asarray(batch_nchw).transpose(0, 2, 3, 1)).tobytes()).hexdigest()


def dump_samples(ds: SynthDataset, directory, count, stride=1, start=0, indices=None):
    """Write ``count`` samples (indices start, start+stride, ... unless
    ``indices`` is given) as PNGs."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if indices is None:
        indices = [(start + j * stride) % ds.d for j in range(count)]
    paths = []
    for i in indices[:count]:
        i = int(i)
        path = directory / f"sample_{i:07d}.png"
        save_image(path, A.denormalize(get_sample(ds, i)))
        paths.append(path)
    return paths


# --------------------------------------------------------------------------
# CIFAR binary batches
# --------------------------------------------------------------------------

CIFAR10_TRAIN = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR10_TEST = ["test_batch.bin"]


def _read_records(path, label_bytes):
    rec = 3072 + label_bytes
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % rec:
        raise OSError(f"{path}: size {raw.size} is not a multiple of the {rec}-byte record")
    raw = raw.reshape(-1, rec)
    return raw[:, label_bytes:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1), raw[:, label_bytes - 1]


def load_cifar(directory, split="train", limit=None, cifar100=False):
    """CIFAR-10 (or -100, fine labels) binary batches -> (images uint8 NHWC, labels).

    ``limit`` keeps the first ``limit`` records, which preserves the standard
    ordering of the files.
    """
    directory = Path(directory)
    if cifar100:
        files = ["train.bin"] if split == "train" else ["test.bin"]
        label_bytes = 2
    else:
        files = CIFAR10_TRAIN if split == "train" else CIFAR10_TEST
        label_bytes = 1
    imgs, labels = [], []
    total = 0
    for name in files:
        path = directory / name
        if not path.exists():
            raise OSError(f"{path}: CIFAR batch file not found")
        x, y = _read_records(path, label_bytes)
        imgs.append(x)
        labels.append(y)
        total += len(y)
        if limit is not None and total >= limit:
            break
    x = np.concatenate(imgs)
    y = np.concatenate(labels).astype(np.int64)
    if limit is not None:
        x, y = x[:limit], y[:limit]
    return x, y


def cifar_to_nchw(images_uint8):
    """uint8 NHWC -> float32 NCHW in [-1, 1] (the training value range)."""
    x = images_uint8.astype(np.float32) / 255.0
    return np.ascontiguousarray((2.0 * x - 1.0).transpose(0, 3, 1, 2))


def default_cifar_dir():
    return os.environ.get("MONOPROBE_CIFAR_DIR", "data/cifar-10-batches-bin")
