"""Minimal reverse-mode autodiff over dense numpy arrays.

Only the pieces the encoders and the probes need: convolution, batch norm,
ReLU, max pooling, affine layers, softmax cross-entropy and SGD with momentum.
Each op records a closure that pushes the upstream gradient to its inputs;
:func:`backward` walks the graph in reverse topological order.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import (
    DimensionError,
    StateError,
    TrainingDivergedError,
    UsageError,
    ValidationError,
)

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Run forward passes without recording a graph."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            dtype = arr.dtype if arr.dtype.kind == "f" else np.float32
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self.name = name
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self):
        backward(self)

    # arithmetic ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, -_as_tensor(other, self.dtype))

    def sum(self):
        return tsum(self)

    def mean(self):
        return mul(tsum(self), 1.0 / self.size)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def flatten(self):
        return reshape(self, (self.shape[0], -1))


def _as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or np.float32))


def _result(data, parents, backward_fn):
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into every leaf with ``requires_grad``.

    Leaf gradients accumulate across calls; intermediate buffers are reset
    each call so a repeated backward adds exactly one more gradient.
    """
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    order, seen = [], set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    for node in order:
        if node._backward is not None:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# --------------------------------------------------------------------------
# elementwise and structural ops
# --------------------------------------------------------------------------


def add(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)

    def _bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), _bw)


def mul(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)

    def _bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), _bw)


def tsum(x):
    def _bw(g):
        x._accum(np.broadcast_to(g, x.shape))

    return _result(np.asarray(x.data.sum(), dtype=x.dtype), (x,), _bw)


def reshape(x, shape):
    def _bw(g):
        x._accum(g.reshape(x.shape))

    return _result(x.data.reshape(shape), (x,), _bw)


def relu(x):
    mask = x.data > 0

    def _bw(g):
        x._accum(g * mask)

    return _result(x.data * mask, (x,), _bw)


# --------------------------------------------------------------------------
# layers
# --------------------------------------------------------------------------


def _pair(v):
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def kaiming_normal(rng, shape, fan_in, dtype=np.float32):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


@dataclass
class Conv2d:
    weight: Tensor
    bias: Tensor
    stride: tuple = (1, 1)
    padding: tuple = (0, 0)
    kind = "conv2d"

    @classmethod
    def create(cls, in_ch, out_ch, kernel, stride=1, padding=0, rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        kh, kw = _pair(kernel)
        w = kaiming_normal(rng, (out_ch, in_ch, kh, kw), in_ch * kh * kw, dtype)
        return cls(
            Tensor(w, requires_grad=True),
            Tensor(np.zeros(out_ch, dtype), requires_grad=True),
            _pair(stride),
            _pair(padding),
        )

    def parameters(self):
        return {"weight": self.weight, "bias": self.bias}


@dataclass
class BatchNorm2d:
    weight: Tensor
    bias: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5
    training: bool = True
    kind = "batchnorm2d"

    @classmethod
    def create(cls, channels, dtype=np.float32, momentum=0.1, eps=1e-5):
        return cls(
            Tensor(np.ones(channels, dtype), requires_grad=True),
            Tensor(np.zeros(channels, dtype), requires_grad=True),
            np.zeros(channels, dtype),
            np.ones(channels, dtype),
            momentum,
            eps,
        )

    def parameters(self):
        return {"weight": self.weight, "bias": self.bias}


@dataclass
class Linear:
    weight: Tensor  # (out_features, in_features)
    bias: Tensor
    kind = "linear"

    @classmethod
    def create(cls, in_features, out_features, rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        w = kaiming_normal(rng, (out_features, in_features), in_features, dtype)
        return cls(
            Tensor(w, requires_grad=True),
            Tensor(np.zeros(out_features, dtype), requires_grad=True),
        )

    def parameters(self):
        return {"weight": self.weight, "bias": self.bias}


def conv2d(x: Tensor, p: Conv2d, stride=None, padding=None) -> Tensor:
    """Cross-correlation of an NCHW batch with ``p.weight`` (O, C, kh, kw)."""
    sh, sw = _pair(p.stride if stride is None else stride)
    ph, pw = _pair(p.padding if padding is None else padding)
    if x.ndim != 4:
        raise DimensionError(f"conv2d expects NCHW input, got {x.ndim} axes")
    o, c, kh, kw = p.weight.shape
    n, cx, h, w = x.shape
    if cx != c:
        raise DimensionError(f"axis 1 (channels): input has {cx}, weight expects {c}")
    oh = kernels.conv_out_size(h, kh, sh, ph)
    ow = kernels.conv_out_size(w, kw, sw, pw)
    if oh <= 0:
        raise DimensionError(f"axis 2 (height): {h} too small for kernel {kh} with padding {ph}")
    if ow <= 0:
        raise DimensionError(f"axis 3 (width): {w} too small for kernel {kw} with padding {pw}")
    cols = kernels.im2col(x.data, kh, kw, sh, sw, ph, pw)
    wmat = p.weight.data.reshape(o, -1)
    out = cols @ wmat.T
    out += p.bias.data
    out = out.reshape(n, oh, ow, o).transpose(0, 3, 1, 2)
    weight, bias = p.weight, p.bias

    def _bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        if weight.requires_grad:
            weight._accum((g2.T @ cols).reshape(weight.shape))
        if bias.requires_grad:
            bias._accum(g2.sum(axis=0))
        if x.requires_grad:
            x._accum(kernels.col2im(g2 @ wmat, x.shape, kh, kw, sh, sw, ph, pw))

    return _result(np.ascontiguousarray(out), (x, weight, bias), _bw)


def batchnorm2d(x: Tensor, p: BatchNorm2d, mode=None) -> Tensor:
    """Per-channel normalisation. ``mode`` is "train" or "eval"; defaults to ``p.training``."""
    mode = mode or ("train" if p.training else "eval")
    if x.ndim != 4:
        raise DimensionError(f"batchnorm2d expects NCHW input, got {x.ndim} axes")
    c = p.weight.shape[0]
    if x.shape[1] != c:
        raise DimensionError(f"axis 1 (channels): input has {x.shape[1]}, batchnorm expects {c}")
    if not np.all(p.running_var > 0):
        raise StateError("batchnorm running_var must be strictly positive")
    gamma = p.weight.data.reshape(1, c, 1, 1)
    beta = p.bias.data.reshape(1, c, 1, 1)
    weight, bias = p.weight, p.bias

    if mode == "eval":
        inv = (1.0 / np.sqrt(p.running_var.astype(x.dtype) + p.eps)).reshape(1, c, 1, 1)
        xhat = (x.data - p.running_mean.reshape(1, c, 1, 1)) * inv
        out = gamma * xhat + beta

        def _bw_eval(g):
            if weight.requires_grad:
                weight._accum((g * xhat).sum(axis=(0, 2, 3)))
            if bias.requires_grad:
                bias._accum(g.sum(axis=(0, 2, 3)))
            if x.requires_grad:
                x._accum(g * gamma * inv)

        return _result(out.astype(x.dtype, copy=False), (x, weight, bias), _bw_eval)

    if mode != "train":
        raise ValidationError(f"unknown batchnorm mode {mode!r}")
    if x.shape[0] < 2:
        raise ValidationError("batchnorm in train mode needs a batch of at least 2")
    m = x.shape[0] * x.shape[2] * x.shape[3]
    mean = x.data.mean(axis=(0, 2, 3))
    centered = x.data - mean.reshape(1, c, 1, 1)
    var = (centered * centered).mean(axis=(0, 2, 3))
    inv = (1.0 / np.sqrt(var + p.eps)).reshape(1, c, 1, 1)
    xhat = centered * inv
    out = gamma * xhat + beta
    mom = p.momentum
    p.running_mean[...] = (1 - mom) * p.running_mean + mom * mean
    p.running_var[...] = (1 - mom) * p.running_var + mom * var * (m / max(m - 1, 1))

    def _bw_train(g):
        if weight.requires_grad:
            weight._accum((g * xhat).sum(axis=(0, 2, 3)))
        if bias.requires_grad:
            bias._accum(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dxhat = g * gamma
            s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            x._accum(inv / m * (m * dxhat - s1 - xhat * s2))

    return _result(out.astype(x.dtype, copy=False), (x, weight, bias), _bw_train)


def maxpool2d(x: Tensor, k: int, stride: int | None = None) -> Tensor:
    stride = k if stride is None else stride
    if x.ndim != 4:
        raise DimensionError(f"maxpool2d expects NCHW input, got {x.ndim} axes")
    if k > x.shape[2]:
        raise DimensionError(f"axis 2 (height): pooling window {k} exceeds input {x.shape[2]}")
    if k > x.shape[3]:
        raise DimensionError(f"axis 3 (width): pooling window {k} exceeds input {x.shape[3]}")
    out, idx = kernels.maxpool_forward(np.ascontiguousarray(x.data), k, stride)

    def _bw(g):
        x._accum(kernels.maxpool_backward(g, idx, x.shape))

    return _result(out, (x,), _bw)


def linear(x: Tensor, p: Linear) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"linear expects (N, features) input, got {x.ndim} axes")
    if x.shape[1] != p.weight.shape[1]:
        raise DimensionError(
            f"axis 1 (features): input has {x.shape[1]}, weight expects {p.weight.shape[1]}"
        )
    weight, bias = p.weight, p.bias
    out = x.data @ weight.data.T + bias.data

    def _bw(g):
        if weight.requires_grad:
            weight._accum(g.T @ x.data)
        if bias.requires_grad:
            bias._accum(g.sum(axis=0))
        if x.requires_grad:
            x._accum(g @ weight.data)

    return _result(out, (x, weight, bias), _bw)


def log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(z):
    return np.exp(log_softmax(z))


def softmax_cross_entropy(logits: Tensor, labels, weights=None) -> Tensor:
    """Mean negative log-likelihood of ``labels``; optional per-sample weights
    turn the mean into a weighted mean."""
    if logits.ndim != 2:
        raise DimensionError(f"logits must be (N, K), got {logits.ndim} axes")
    n, k = logits.shape
    labels = np.asarray(labels)
    if n < 1:
        raise ValidationError("empty batch")
    if labels.shape != (n,) or labels.dtype.kind not in "iu":
        raise ValidationError(f"labels must be {n} integers")
    if labels.min() < 0 or labels.max() >= k:
        raise ValidationError(f"label out of range [0, {k})")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    w = w / w.sum()
    logp = log_softmax(logits.data.astype(np.float64))
    rows = np.arange(n)
    loss = -(w * logp[rows, labels]).sum()

    def _bw(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        logits._accum((float(g) * w[:, None] * d).astype(logits.dtype))

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), _bw)


# --------------------------------------------------------------------------
# optimiser
# --------------------------------------------------------------------------


@dataclass
class SgdState:
    learning_rate: float
    momentum: float = 0.0
    weight_decay: float = 0.0
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValidationError("learning_rate must be nonnegative")
        if not 0 <= self.momentum < 1:
            raise ValidationError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValidationError("weight_decay must be nonnegative")


def sgd_step(params: dict, state: SgdState, grads: dict | None = None):
    """One heavy-ball step: v <- m*v + g + wd*p ; p <- p - lr*v.

    ``params`` maps names to tensors; ``grads`` defaults to each tensor's
    ``.grad``. Updates happen in place.
    """
    for name, p in params.items():
        g = p.grad if grads is None else grads[name]
        if g is None:
            continue
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingDivergedError(f"non-finite gradient in {name}", param=name)
        step = g + state.weight_decay * p.data if state.weight_decay else g
        v = state.velocity.get(name)
        if v is None or v.shape != p.shape:
            v = np.zeros_like(p.data)
        v = state.momentum * v + step
        state.velocity[name] = v
        p.data -= (state.learning_rate * v).astype(p.dtype)
    return params


def zero_grads(params: dict):
    for p in params.values():
        p.zero_grad()
