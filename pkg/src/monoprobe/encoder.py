"""Encoder networks with named tap points after every block's ReLU."""
from __future__ import annotations

import copy
import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import nn
from .errors import ConfigError, FormatError, ValidationError
from .kernels import conv_out_size

VARIANTS = ("SmallAlexNet", "AlexNetBN")

# kernel, stride, padding per conv block; pool = (k, stride) or None
_LAYOUTS = {
    "SmallAlexNet": dict(
        kernels=(7, 5, 3, 3),
        strides=(3, 2, 2, 1),
        paddings=(0, 2, 1, 1),
        pools=(None, None, None, None),
        widths=(32, 64, 128, 128),
    ),
    "AlexNetBN": dict(
        kernels=(11, 5, 3, 3, 3),
        strides=(4, 1, 1, 1, 1),
        paddings=(2, 2, 1, 1, 1),
        pools=((3, 2), (3, 2), None, None, (3, 2)),
        widths=(96, 256, 384, 384, 256),
    ),
}


@dataclass
class EncoderConfig:
    variant: str = "SmallAlexNet"
    input_size: int = 32
    widths: tuple | None = None
    num_classes: int = 4
    batchnorm: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown encoder variant {self.variant!r}; expected one of {VARIANTS}")
        layout = _LAYOUTS[self.variant]
        self.widths = tuple(int(w) for w in (self.widths or layout["widths"]))
        if len(self.widths) != len(layout["kernels"]):
            raise ConfigError(
                f"{self.variant} has {len(layout['kernels'])} blocks, got {len(self.widths)} widths"
            )
        if self.input_size < 1 or self.num_classes < 1:
            raise ConfigError("input_size and num_classes must be positive")

    @property
    def kernels(self):
        return _LAYOUTS[self.variant]["kernels"]

    @property
    def strides(self):
        return _LAYOUTS[self.variant]["strides"]

    @property
    def paddings(self):
        return _LAYOUTS[self.variant]["paddings"]

    @property
    def pools(self):
        return _LAYOUTS[self.variant]["pools"]

    @property
    def taps(self):
        return [f"conv{i + 1}" for i in range(len(self.kernels))]

    def tap_shapes(self):
        """(C, H, W) at each tap, and the flattened size fed to the head."""
        size = self.input_size
        shapes = {}
        for i, name in enumerate(self.taps):
            size = conv_out_size(size, self.kernels[i], self.strides[i], self.paddings[i])
            if size < 1:
                raise ConfigError(f"input size {self.input_size} collapses before {name}")
            shapes[name] = (self.widths[i], size, size)
            if self.pools[i] is not None:
                k, s = self.pools[i]
                size = (size - k) // s + 1
        return shapes, self.widths[-1] * size * size

    def to_dict(self):
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class Block:
    conv: nn.Conv2d
    bn: nn.BatchNorm2d | None
    pool: tuple | None


@dataclass
class Network:
    config: EncoderConfig
    blocks: list
    head: nn.Linear
    init_seed: int = 0
    training: bool = True
    frozen_blocks: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def taps(self):
        return self.config.taps

    def train(self):
        self.training = True
        return self

    def eval(self):
        self.training = False
        return self

    def _block_forward(self, i, h):
        blk = self.blocks[i]
        h = nn.conv2d(h, blk.conv)
        if blk.bn is not None:
            frozen = i < self.frozen_blocks
            mode = "train" if self.training and not frozen else "eval"
            h = nn.batchnorm2d(h, blk.bn, mode)
        return nn.relu(h)

    def forward_with_taps(self, x, upto=None):
        """Return ({tap: activation}, head logits). ``upto`` stops after that tap
        and skips the head."""
        h = x if isinstance(x, nn.Tensor) else nn.Tensor(x)
        s = self.config.input_size
        if h.ndim != 4 or h.shape[1] != 3 or h.shape[2] != s or h.shape[3] != s:
            raise ConfigError(f"expected input (N, 3, {s}, {s}), got {h.shape}")
        taps = {}
        for i, name in enumerate(self.taps):
            h = self._block_forward(i, h)
            taps[name] = h
            if name == upto:
                return taps, None
            pool = self.blocks[i].pool
            if pool is not None:
                h = nn.maxpool2d(h, pool[0], pool[1])
        return taps, nn.linear(h.flatten(), self.head)

    def features(self, x):
        """Flattened input of the head (the penultimate representation)."""
        h = x if isinstance(x, nn.Tensor) else nn.Tensor(x)
        for i in range(len(self.blocks)):
            h = self._block_forward(i, h)
            pool = self.blocks[i].pool
            if pool is not None:
                h = nn.maxpool2d(h, pool[0], pool[1])
        return h.flatten()

    def forward(self, x):
        return self.forward_with_taps(x)[1]

    __call__ = forward

    def named_parameters(self):
        out = {}
        for i, blk in enumerate(self.blocks):
            for k, t in blk.conv.parameters().items():
                out[f"conv{i + 1}.{k}"] = t
            if blk.bn is not None:
                for k, t in blk.bn.parameters().items():
                    out[f"bn{i + 1}.{k}"] = t
        for k, t in self.head.parameters().items():
            out[f"head.{k}"] = t
        return out

    def trainable_parameters(self):
        return {k: v for k, v in self.named_parameters().items() if v.requires_grad}

    def buffers(self):
        out = {}
        for i, blk in enumerate(self.blocks):
            if blk.bn is not None:
                out[f"bn{i + 1}.running_mean"] = blk.bn.running_mean
                out[f"bn{i + 1}.running_var"] = blk.bn.running_var
        return out

    def state_arrays(self):
        """Every array that defines the network, in declaration order."""
        arrays = {k: v.data for k, v in self.named_parameters().items()}
        arrays.update(self.buffers())
        return arrays

    def replace_head(self, num_classes, rng):
        _, flat = self.config.tap_shapes()
        self.head = nn.Linear.create(flat, num_classes, rng=rng)
        self.config = replace(self.config, num_classes=num_classes)
        return self

    def clone(self):
        return copy.deepcopy(self)


def build_encoder(cfg: EncoderConfig, init_seed: int = 0) -> Network:
    """Deterministically initialised encoder (Kaiming fan-in normal, zero biases)."""
    rng = np.random.default_rng(init_seed)
    cfg.tap_shapes()  # validates the input size
    blocks = []
    in_ch = 3
    for i, width in enumerate(cfg.widths):
        conv = nn.Conv2d.create(
            in_ch, width, cfg.kernels[i], cfg.strides[i], cfg.paddings[i], rng=rng
        )
        bn = nn.BatchNorm2d.create(width) if cfg.batchnorm else None
        blocks.append(Block(conv, bn, cfg.pools[i]))
        in_ch = width
    _, flat = cfg.tap_shapes()
    head = nn.Linear.create(flat, cfg.num_classes, rng=rng)
    return Network(cfg, blocks, head, init_seed=init_seed)


def cast_network(net: Network, dtype) -> Network:
    """Copy of ``net`` with every parameter and buffer cast to ``dtype``."""
    out = net.clone()
    for t in out.named_parameters().values():
        t.data = t.data.astype(dtype)
        if t.grad is not None:
            t.grad = np.zeros_like(t.data)
    for blk in out.blocks:
        if blk.bn is not None:
            blk.bn.running_mean = blk.bn.running_mean.astype(dtype)
            blk.bn.running_var = blk.bn.running_var.astype(dtype)
    return out


def forward_with_taps(net: Network, batch):
    return net.forward_with_taps(batch)


def freeze_prefix(net: Network, k_blocks: int) -> Network:
    """Exclude conv and BN parameters of the first ``k_blocks`` blocks from
    optimisation; their BN layers run on frozen running statistics."""
    n = len(net.blocks)
    if not 0 <= k_blocks <= n:
        raise ValidationError(f"k_blocks must lie in [0, {n}], got {k_blocks}")
    net.frozen_blocks = k_blocks
    for i, blk in enumerate(net.blocks):
        params = dict(blk.conv.parameters())
        if blk.bn is not None:
            params.update({f"bn.{k}": v for k, v in blk.bn.parameters().items()})
        for t in params.values():
            trainable = i >= k_blocks
            t.requires_grad = trainable
            t.grad = np.zeros_like(t.data) if trainable else None
    return net


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

_MAGIC = b"MPCKPT\x00\x01"
_VERSION = 1


def _header(net: Network):
    arrays = net.state_arrays()
    manifest = [[k, list(v.shape), v.dtype.str.replace(">", "<").replace("=", "<")] for k, v in arrays.items()]
    return {
        "version": _VERSION,
        "config": net.config.to_dict(),
        "init_seed": net.init_seed,
        "frozen_blocks": net.frozen_blocks,
        "meta": net.meta,
        "arrays": manifest,
    }


def checkpoint_bytes(net: Network) -> bytes:
    header = json.dumps(_header(net), sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<II", _VERSION, len(header)))
    buf.write(header)
    for _, arr in net.state_arrays().items():
        buf.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    body = buf.getvalue()
    return body + hashlib.sha256(body).digest()


def save_checkpoint(net: Network, path):
    data = checkpoint_bytes(net)
    with open(path, "wb") as f:
        f.write(data)
    return hashlib.sha256(data).hexdigest()


def _config_diff(a: dict, b: dict):
    return {k: (a.get(k), b.get(k)) for k in sorted(set(a) | set(b)) if a.get(k) != b.get(k)}


def load_checkpoint(path, expect: EncoderConfig | None = None) -> Network:
    """Load a ``.ckpt`` file; with ``expect`` the stored config must match it."""
    with open(path, "rb") as f:
        blob = f.read()
    head_len = len(_MAGIC) + 8
    if len(blob) < head_len + 32 or blob[: len(_MAGIC)] != _MAGIC:
        raise FormatError(f"{path}: not a monoprobe checkpoint")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise FormatError(f"{path}: checksum mismatch (truncated or corrupted file)")
    version, hlen = struct.unpack("<II", body[len(_MAGIC) : head_len])
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(body[head_len : head_len + hlen])
        cfg = EncoderConfig.from_dict(header["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: bad header: {exc}") from exc
    if expect is not None and cfg.to_dict() != expect.to_dict():
        raise FormatError(f"{path}: config mismatch {_config_diff(cfg.to_dict(), expect.to_dict())}")
    net = build_encoder(cfg, header["init_seed"])
    targets = net.state_arrays()
    pos = head_len + hlen
    if [k for k, _, _ in header["arrays"]] != list(targets):
        raise FormatError(f"{path}: array manifest does not match the config")
    for name, shape, dtype in header["arrays"]:
        arr = targets[name]
        dt = np.dtype(dtype)
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if pos + nbytes > len(body) or tuple(shape) != arr.shape:
            raise FormatError(f"{path}: array {name} is truncated or misshapen")
        arr[...] = np.frombuffer(body, dtype=dt, count=int(np.prod(shape)), offset=pos).reshape(shape)
        pos += nbytes
    if pos != len(body):
        raise FormatError(f"{path}: trailing bytes after arrays")
    freeze_prefix(net, header["frozen_blocks"])
    net.meta = header.get("meta", {})
    return net
