"""Image augmentation used to expand a handful of source images into a dataset.

Images are ``(H, W, 3)`` float arrays. Values live in [0, 1] until
:func:`normalize` maps them to [-1, 1].
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import kernels
from .errors import RangeError, ValidationError

LUMA = np.array([0.299, 0.587, 0.114])


@dataclass
class AugmentConfig:
    beta: float = 1e-3
    gamma: float = 0.75
    max_rot_deg: float = 35.0
    flip_prob: float = 0.5
    jitter_low: float = 0.6
    jitter_high: float = 1.4
    hue_range: float = 0.1
    target_size: int = 32
    scale_crop: bool = True
    rotation: bool = True
    jitter: bool = True
    flip: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self):
        bad = []
        if not 0 < self.beta <= 1:
            bad.append(f"beta={self.beta} (must lie in (0, 1])")
        if not 0 < self.gamma <= 1:
            bad.append(f"gamma={self.gamma} (must lie in (0, 1])")
        if not 0 <= self.max_rot_deg < 90:
            bad.append(f"max_rot_deg={self.max_rot_deg} (must lie in [0, 90))")
        if not 0 <= self.flip_prob <= 1:
            bad.append(f"flip_prob={self.flip_prob} (must lie in [0, 1])")
        if not 0 < self.jitter_low <= self.jitter_high:
            bad.append(f"jitter_low/jitter_high={self.jitter_low}/{self.jitter_high}")
        if not 0 <= self.hue_range < 0.5:
            bad.append(f"hue_range={self.hue_range} (must lie in [0, 0.5))")
        if int(self.target_size) != self.target_size or self.target_size < 1:
            bad.append(f"target_size={self.target_size} (must be a positive int)")
        if bad:
            raise ValidationError("invalid augment config: " + "; ".join(bad))
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown augment fields: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class CropParams:
    x: int
    y: int
    w: int
    h: int
    fallback: bool = False


class SampleRng:
    """Counter-based stream keyed by (dataset seed, sample index).

    Philox is keyed directly with the pair, so the stream for one sample does
    not depend on how many other samples were drawn, by whom, or in what order.
    """

    def __init__(self, seed: int, index: int):
        self.seed = int(seed)
        self.index = int(index)
        key = np.array([self.seed & 0xFFFFFFFFFFFFFFFF, self.index & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def uniform(self, low=0.0, high=1.0):
        return float(self._gen.uniform(low, high))

    def random(self):
        return float(self._gen.random())

    def integers(self, low, high):
        """Uniform int in [low, high)."""
        return int(self._gen.integers(low, high))

    @property
    def generator(self):
        return self._gen


# --------------------------------------------------------------------------
# geometry
# --------------------------------------------------------------------------


def rot90(img, k=1, axes=(0, 1)):
    """Exact counter-clockwise rotation by 90*k degrees (index permutation)."""
    return np.rot90(img, k, axes=axes)


def _inscribed_size(w, h, angle_rad):
    """Largest axis-aligned rectangle inside a w x h rectangle rotated by angle."""
    if w <= 0 or h <= 0:
        return 0.0, 0.0
    wide = w >= h
    long_side, short_side = (w, h) if wide else (h, w)
    sin_a, cos_a = abs(math.sin(angle_rad)), abs(math.cos(angle_rad))
    if short_side <= 2.0 * sin_a * cos_a * long_side or abs(sin_a - cos_a) < 1e-10:
        x = 0.5 * short_side
        return (x / sin_a, x / cos_a) if wide else (x / cos_a, x / sin_a)
    cos_2a = cos_a * cos_a - sin_a * sin_a
    return (w * cos_a - h * sin_a) / cos_2a, (h * cos_a - w * sin_a) / cos_2a


def inscribed_rect(width, height, angle_deg) -> CropParams:
    """Pixel rectangle of the rotated raster whose bilinear samples draw only
    on source pixels."""
    if angle_deg == 0:
        return CropParams(0, 0, width, height)
    # pixel centres span (W-1) x (H-1) in source coordinates
    wr, hr = _inscribed_size(width - 1, height - 1, math.radians(angle_deg))
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    tol = 1e-9
    x0 = max(0, math.ceil(cx - wr / 2 + tol))
    x1 = min(width - 1, math.floor(cx + wr / 2 - tol))
    y0 = max(0, math.ceil(cy - hr / 2 + tol))
    y1 = min(height - 1, math.floor(cy + hr / 2 - tol))
    if x1 < x0 or y1 < y0:
        xc, yc = int(round(cx)), int(round(cy))
        return CropParams(xc, yc, 1, 1)
    return CropParams(x0, y0, x1 - x0 + 1, y1 - y0 + 1)


def _rotation_coords(height, width, angle_deg, x0, y0, w, h):
    """Source coordinates for output pixels [y0, y0+h) x [x0, x0+w) of a
    counter-clockwise rotation about the raster centre."""
    t = math.radians(angle_deg)
    cos_t, sin_t = math.cos(t), math.sin(t)
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    dx = (np.arange(x0, x0 + w, dtype=np.float64) - cx)[None, :]
    dy = (np.arange(y0, y0 + h, dtype=np.float64) - cy)[:, None]
    xs = cx + cos_t * dx - sin_t * dy
    ys = cy + sin_t * dx + cos_t * dy
    return xs, ys


def rotate_image(img, angle_deg, fill=0.0):
    """Rotate counter-clockwise about the centre; returns (image, inscribed rect).

    Multiples of 90 degrees take the exact permutation path.
    """
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    if angle_deg % 90 == 0:
        k = int(angle_deg // 90) % 4
        out = rot90(img, k)
        return np.ascontiguousarray(out), CropParams(0, 0, out.shape[1], out.shape[0])
    xs, ys = _rotation_coords(h, w, angle_deg, 0, 0, w, h)
    return kernels.bilinear_sample(img, xs, ys, fill), inscribed_rect(w, h, angle_deg)


def rotated_window(img, angle_deg, crop: CropParams):
    """Same pixels as ``rotate_image(img, angle)[0][crop]`` without rotating
    the whole raster."""
    img = np.asarray(img, dtype=np.float64)
    if angle_deg == 0:
        return img[crop.y : crop.y + crop.h, crop.x : crop.x + crop.w].copy()
    h, w = img.shape[:2]
    xs, ys = _rotation_coords(h, w, angle_deg, crop.x, crop.y, crop.w, crop.h)
    return kernels.bilinear_sample(img, xs, ys, 0.0)


def largest_centered_crop(region_w, region_h, gamma) -> CropParams:
    """Biggest centred crop whose aspect h/w lies in [gamma, 1/gamma]."""
    w, h = region_w, region_h
    if h > w / gamma:
        h = max(1, math.floor(w / gamma))
    elif h < w * gamma:
        w = max(1, math.floor(h / gamma))
    return CropParams((region_w - w) // 2, (region_h - h) // 2, w, h, fallback=True)


def center_square(region_w, region_h) -> CropParams:
    side = min(region_w, region_h)
    return CropParams((region_w - side) // 2, (region_h - side) // 2, side, side)


def crop_ok(w, h, source_area, beta, gamma):
    return w * h >= beta * source_area and gamma * w <= h <= w / gamma


def sample_crop(rng: SampleRng, region_w, region_h, cfg: AugmentConfig, source_area=None) -> CropParams:
    """Random crop inside a region_w x region_h region.

    The log-aspect h/w is uniform in [ln gamma, -ln gamma]; the area is then
    uniform between beta*A and the largest area of that aspect that still
    fits the region (capped at A), where A is the source area (defaults to
    the region area). Up to ten draws; the largest centred crop is the
    fallback.
    """
    if region_w < 1 or region_h < 1:
        raise ValidationError(f"crop region {region_w}x{region_h} is smaller than 1x1")
    area = float(region_w * region_h if source_area is None else source_area)
    log_g = math.log(cfg.gamma)
    lo = cfg.beta * area
    for _ in range(10):
        aspect = math.exp(rng.uniform(log_g, -log_g)) if cfg.gamma < 1 else 1.0
        hi = min(area, region_w * region_w * aspect, region_h * region_h / aspect)
        target = rng.uniform(lo, max(lo, hi))
        w = min(region_w, int(round(math.sqrt(target / aspect))))
        h = min(region_h, int(round(math.sqrt(target * aspect))))
        if w >= 1 and h >= 1 and crop_ok(w, h, area, cfg.beta, cfg.gamma):
            x = rng.integers(0, region_w - w + 1)
            y = rng.integers(0, region_h - h + 1)
            return CropParams(x, y, w, h)
    return largest_centered_crop(region_w, region_h, cfg.gamma)


def hflip(img):
    return np.ascontiguousarray(np.asarray(img)[:, ::-1])


# --------------------------------------------------------------------------
# colour
# --------------------------------------------------------------------------


def luma(img):
    return np.asarray(img, dtype=np.float64) @ LUMA


rgb_to_hsv = kernels.rgb_to_hsv
hsv_to_rgb = kernels.hsv_to_rgb


def color_jitter(img, brightness, contrast, saturation, hue):
    """Brightness, contrast, saturation, hue in that order; clamps to [0, 1]
    after each stage. ``hue`` is a fraction of the full colour circle."""
    img = np.asarray(img, dtype=np.float64)
    if img.size and (img.min() < -1e-6 or img.max() > 1 + 1e-6):
        raise RangeError(f"color_jitter expects values in [0, 1], got [{img.min()}, {img.max()}]")
    if min(brightness, contrast, saturation) < 0:
        raise ValidationError("jitter factors must be nonnegative")
    if abs(hue) >= 0.5:
        raise ValidationError("hue shift must lie in (-0.5, 0.5)")
    return kernels.color_jitter(img, float(brightness), float(contrast), float(saturation), float(hue))


def normalize(img):
    return 2.0 * np.asarray(img) - 1.0


def denormalize(img):
    return (np.asarray(img) + 1.0) / 2.0


def _resize_weights(n_in, n_out):
    scale = n_in / n_out
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def bilinear_resize(img, out_w, out_h):
    """Half-pixel-centre (align_corners=False) bilinear resize with edge clamping."""
    if out_w < 1 or out_h < 1:
        raise ValidationError("output size must be positive")
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    y0, y1, fy = _resize_weights(h, out_h)
    x0, x1, fx = _resize_weights(w, out_w)
    fy = fy[:, None, None]
    rows = img[y0] * (1.0 - fy) + img[y1] * fy
    fx = fx[None, :, None]
    return rows[:, x0] * (1.0 - fx) + rows[:, x1] * fx


# --------------------------------------------------------------------------
# the full per-sample pipeline
# --------------------------------------------------------------------------


def draw_params(rng: SampleRng, cfg: AugmentConfig):
    """Angle, flip and jitter draws; always consumed in the same order so that
    toggling a stage does not reshuffle the others."""
    angle = rng.uniform(-cfg.max_rot_deg, cfg.max_rot_deg)
    while cfg.max_rot_deg > 0 and angle <= -cfg.max_rot_deg:
        angle = rng.uniform(-cfg.max_rot_deg, cfg.max_rot_deg)
    flip = rng.random() < cfg.flip_prob
    jit = (
        rng.uniform(cfg.jitter_low, cfg.jitter_high),
        rng.uniform(cfg.jitter_low, cfg.jitter_high),
        rng.uniform(cfg.jitter_low, cfg.jitter_high),
        rng.uniform(-cfg.hue_range, cfg.hue_range),
    )
    return {
        "angle": angle if cfg.rotation else 0.0,
        "flip": flip and cfg.flip,
        "jitter": jit if cfg.jitter else None,
    }


def augment_sample(source, rng: SampleRng, cfg: AugmentConfig, return_params=False):
    """rotate -> crop inside the inscribed rect -> flip -> jitter -> normalise
    -> resize to S x S. Returns float32 (S, S, 3) in [-1, 1]."""
    source = np.asarray(source, dtype=np.float64)
    h, w = source.shape[:2]
    if h < 2 or w < 2:
        raise ValidationError("source image must be at least 2x2")
    params = draw_params(rng, cfg)
    region = inscribed_rect(w, h, params["angle"])
    if cfg.scale_crop:
        local = sample_crop(rng, region.w, region.h, cfg, source_area=w * h)
    else:
        local = center_square(region.w, region.h)
    crop = CropParams(region.x + local.x, region.y + local.y, local.w, local.h, local.fallback)
    patch = rotated_window(source, params["angle"], crop)
    if params["flip"]:
        patch = hflip(patch)
    if params["jitter"] is not None:
        patch = color_jitter(np.clip(patch, 0.0, 1.0), *params["jitter"])
    out = bilinear_resize(normalize(patch), cfg.target_size, cfg.target_size)
    out = np.clip(out, -1.0, 1.0).astype(np.float32)
    if return_params:
        params["crop"] = crop
        return out, params
    return out
