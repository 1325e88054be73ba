"""Dense float64 tensor kernels with explicit forward/backward passes.

Tensors are plain :class:`numpy.ndarray` objects in float64. Image batches use
NHWC layout; convolution kernels are stored as ``(kh, kw, C_in, C_out)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LAYER_KINDS = ("Conv2D", "ReLU", "MaxPool2D", "Dropout", "Dense", "Flatten", "TemperatureScale")
PADDING_MODES = ("same", "valid")
LOG_CLAMP = 1e-12


class DimensionError(ValueError):
    """Raised when tensor shapes are incompatible."""

    def __init__(self, message, axis=None):
        super().__init__(message)
        self.axis = axis


class ParameterError(ValueError):
    """Raised for out-of-range hyperparameters."""


def as_tensor(values):
    arr = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains NaN or Inf")
    return arr


# --------------------------------------------------------------------------
# convolution


def _pair(value):
    if np.isscalar(value):
        return int(value), int(value)
    a, b = value
    return int(a), int(b)


def conv_padding(size, kernel, stride, padding):
    """Return ``(before, after)`` zero padding for one spatial axis."""
    if padding == "valid":
        return 0, 0
    if padding != "same":
        raise ParameterError(f"unknown padding mode {padding!r}")
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return total // 2, total - total // 2


def conv_output_shape(in_shape, kernel_shape, stride=1, padding="valid"):
    """Output ``(H, W, F)`` for an ``(H, W, C)`` input."""
    h, w, c = in_shape
    kh, kw, kc, f = kernel_shape
    sh, sw = _pair(stride)
    if kc != c:
        raise DimensionError(f"kernel expects {kc} input channels, input has {c}", axis="channels")
    ph = sum(conv_padding(h, kh, sh, padding))
    pw = sum(conv_padding(w, kw, sw, padding))
    if kh > h + ph:
        raise DimensionError(f"kernel height {kh} exceeds padded input height {h + ph}", axis="height")
    if kw > w + pw:
        raise DimensionError(f"kernel width {kw} exceeds padded input width {w + pw}", axis="width")
    return (h + ph - kh) // sh + 1, (w + pw - kw) // sw + 1, f


def _pad_nhwc(x, kh, kw, sh, sw, padding):
    pt, pb = conv_padding(x.shape[1], kh, sh, padding)
    pl, pr = conv_padding(x.shape[2], kw, sw, padding)
    if pt or pb or pl or pr:
        x = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    return x, (pt, pb, pl, pr)


def _im2col(xp, kh, kw, sh, sw, ho, wo):
    # windows: (N, Hp-kh+1, Wp-kw+1, C, kh, kw) -> strided -> (N, ho, wo, kh, kw, C)
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::sh, ::sw][:, :ho, :wo]
    n, c = xp.shape[0], xp.shape[3]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * c)


def _batched(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise DimensionError(f"expected HxWxC or NxHxWxC input, got shape {x.shape}", axis="rank")
    return x, False


def conv2d_forward(x, kernel, bias=None, stride=1, padding="valid", return_cols=False):
    """2-D cross-correlation of ``x`` (HWC or NHWC) with ``kernel`` (kh, kw, C, F)."""
    x, squeeze = _batched(x)
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.ndim != 4:
        raise DimensionError(f"kernel must be 4-D, got shape {kernel.shape}", axis="rank")
    kh, kw, _, f = kernel.shape
    sh, sw = _pair(stride)
    if sh < 1 or sw < 1:
        raise ParameterError("stride must be >= 1")
    ho, wo, _ = conv_output_shape(x.shape[1:], kernel.shape, (sh, sw), padding)
    xp, _ = _pad_nhwc(x, kh, kw, sh, sw, padding)
    cols = _im2col(xp, kh, kw, sh, sw, ho, wo)
    out = cols @ kernel.reshape(-1, f)
    if bias is not None:
        out += bias
    out = out.reshape(x.shape[0], ho, wo, f)
    if squeeze:
        out = out[0]
    if return_cols:
        return out, cols
    return out


def conv2d_backward(grad_out, cached_input, kernel, stride=1, padding="valid", cols=None):
    """Gradients of a convolution with respect to input, kernel and bias.

    ``cols`` may carry the im2col matrix saved from the forward pass.
    """
    x, squeeze = _batched(cached_input)
    g = np.asarray(grad_out, dtype=np.float64)
    if squeeze:
        g = g[None]
    kernel = np.asarray(kernel, dtype=np.float64)
    kh, kw, c, f = kernel.shape
    sh, sw = _pair(stride)
    ho, wo, _ = conv_output_shape(x.shape[1:], kernel.shape, (sh, sw), padding)
    expected = (x.shape[0], ho, wo, f)
    if g.shape != expected:
        axis = next((i for i, (a, b) in enumerate(zip(g.shape, expected)) if a != b), "rank")
        raise DimensionError(f"grad_out shape {g.shape} != forward output shape {expected}", axis=axis)
    xp, (pt, pb, pl, pr) = _pad_nhwc(x, kh, kw, sh, sw, padding)
    if cols is None:
        cols = _im2col(xp, kh, kw, sh, sw, ho, wo)
    g2 = g.reshape(-1, f)
    grad_kernel = (cols.T @ g2).reshape(kh, kw, c, f)
    grad_bias = g2.sum(axis=0)
    gcols = (g2 @ kernel.reshape(-1, f).T).reshape(x.shape[0], ho, wo, kh, kw, c)
    dxp = np.zeros_like(xp)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw, :] += gcols[:, :, :, i, j, :]
    grad_input = dxp[:, pt:dxp.shape[1] - pb, pl:dxp.shape[2] - pr, :]
    if squeeze:
        grad_input = grad_input[0]
    return grad_input, grad_kernel, grad_bias


# --------------------------------------------------------------------------
# elementwise / pooling / dense


def relu_forward(x):
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def relu_backward(grad_out, cached_input):
    return np.where(np.asarray(cached_input) > 0, grad_out, 0.0)


def maxpool_forward(x, pool=2, stride=2):
    """Max pooling; returns ``(out, argmax)`` where argmax indexes the flattened window.

    Ties resolve to the first position in row-major window order.
    """
    x, squeeze = _batched(x)
    ph, pw = _pair(pool)
    sh, sw = _pair(stride)
    n, h, w, c = x.shape
    if ph > h:
        raise DimensionError(f"pool height {ph} exceeds input height {h}", axis="height")
    if pw > w:
        raise DimensionError(f"pool width {pw} exceeds input width {w}", axis="width")
    ho, wo = (h - ph) // sh + 1, (w - pw) // sw + 1
    win = sliding_window_view(x, (ph, pw), axis=(1, 2))[:, ::sh, ::sw][:, :ho, :wo]
    win = win.reshape(n, ho, wo, c, ph * pw)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    if squeeze:
        return out[0], arg[0]
    return out, arg


def maxpool_backward(grad_out, argmax, input_shape, pool=2, stride=2):
    g = np.asarray(grad_out, dtype=np.float64)
    squeeze = len(input_shape) == 3
    if squeeze:
        g, argmax, input_shape = g[None], argmax[None], (1, *input_shape)
    ph, pw = _pair(pool)
    sh, sw = _pair(stride)
    ho, wo = g.shape[1], g.shape[2]
    dx = np.zeros(input_shape)
    for i in range(ph):
        for j in range(pw):
            hit = argmax == i * pw + j
            dx[:, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw, :] += np.where(hit, g, 0.0)
    return dx[0] if squeeze else dx


def dense_forward(x, weight, bias=None):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"dense expects {weight.shape[0]} features, got {x.shape[-1]}", axis=-1)
    out = x @ weight
    if bias is not None:
        out = out + bias
    return out


def dense_backward(grad_out, cached_input, weight):
    """Returns ``(grad_input, grad_weight, grad_bias)``."""
    x2 = np.atleast_2d(cached_input)
    g2 = np.atleast_2d(grad_out)
    return grad_out @ weight.T, x2.T @ g2, g2.sum(axis=0)


def dropout_forward(x, p, rng=None, training=False):
    """Inverted dropout; returns ``(out, mask)``. Identity when not training."""
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout probability must lie in [0, 1), got {p}")
    x = np.asarray(x, dtype=np.float64)
    if not training or p == 0.0:
        return x, None
    if rng is None:
        raise ParameterError("training-mode dropout needs an rng")
    keep = 1.0 - p
    mask = (rng.random(x.shape) < keep) / keep
    return x * mask, mask


def dropout_backward(grad_out, mask):
    return grad_out if mask is None else grad_out * mask


# --------------------------------------------------------------------------
# softmax and loss


def temperature_softmax(logits, T=1.0):
    """Softmax of ``logits / T`` along the last axis."""
    if not T > 0:
        raise ParameterError(f"temperature must be positive, got {T}")
    z = np.asarray(logits, dtype=np.float64) / T
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy_loss(probs, target):
    """``-sum(target * log(probs))`` along the last axis, with log clamped at 1e-12."""
    probs = np.asarray(probs, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if probs.shape != target.shape:
        raise DimensionError(f"probs shape {probs.shape} != target shape {target.shape}", axis=-1)
    return -(target * np.log(np.maximum(probs, LOG_CLAMP))).sum(axis=-1)


def entropy_bits(probs):
    p = np.asarray(probs, dtype=np.float64)
    return -(p * np.log2(np.where(p > 0, p, 1.0))).sum(axis=-1)


# --------------------------------------------------------------------------
# layers


@dataclass(frozen=True)
class LayerSpec:
    """Declarative description of one layer."""

    kind: str
    kernel: tuple = None
    filters: int = None
    stride: tuple = (1, 1)
    padding: str = "valid"
    pool: tuple = None
    p: float = None
    units: int = None
    temperature: float = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ParameterError(f"unknown layer kind {self.kind!r}")
        if any(s < 1 for s in self.stride):
            raise ParameterError("stride must be >= 1")
        if self.kind == "Conv2D" and self.padding not in PADDING_MODES:
            raise ParameterError(f"unknown padding mode {self.padding!r}")
        if self.kind == "Dropout" and not 0.0 <= self.p < 1.0:
            raise ParameterError(f"dropout probability must lie in [0, 1), got {self.p}")
        if self.kind == "TemperatureScale" and not self.temperature > 0:
            raise ParameterError(f"temperature must be positive, got {self.temperature}")

    def to_dict(self):
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items() if v is not None}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("kernel", "stride", "pool"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def layer_output_shape(spec, in_shape):
    if spec.kind == "Conv2D":
        return conv_output_shape(in_shape, (*spec.kernel, in_shape[-1], spec.filters), spec.stride, spec.padding)
    if spec.kind == "MaxPool2D":
        h, w, c = in_shape
        ph, pw = spec.pool
        if ph > h or pw > w:
            raise DimensionError(f"pool {spec.pool} exceeds input {in_shape[:2]}", axis="height" if ph > h else "width")
        return (h - ph) // spec.stride[0] + 1, (w - pw) // spec.stride[1] + 1, c
    if spec.kind == "Flatten":
        return (int(np.prod(in_shape)),)
    if spec.kind == "Dense":
        if len(in_shape) != 1:
            raise DimensionError(f"dense layer needs a flat input, got {in_shape}", axis="rank")
        return (spec.units,)
    return tuple(in_shape)


def param_shapes(spec, in_shape):
    """Shapes of the trainable parameters of ``spec`` given its input shape."""
    if spec.kind == "Conv2D":
        return {"kernel": (*spec.kernel, in_shape[-1], spec.filters), "bias": (spec.filters,)}
    if spec.kind == "Dense":
        return {"weight": (in_shape[0], spec.units), "bias": (spec.units,)}
    return {}


class Layer:
    """A stateful layer: caches forward inputs, accumulates parameter gradients."""

    def __init__(self, spec, params=None):
        self.spec = spec
        self.params = params or {}
        self.grads = {}
        self._cache = None

    def forward(self, x, training=False, rng=None):
        s = self.spec
        if s.kind == "Conv2D":
            out, cols = conv2d_forward(x, self.params["kernel"], self.params["bias"], s.stride, s.padding, return_cols=True)
            self._cache = (x, cols)
        elif s.kind == "ReLU":
            out = relu_forward(x)
            self._cache = x
        elif s.kind == "MaxPool2D":
            out, arg = maxpool_forward(x, s.pool, s.stride)
            self._cache = (x.shape, arg)
        elif s.kind == "Dropout":
            out, mask = dropout_forward(x, s.p, rng, training)
            self._cache = mask
        elif s.kind == "Dense":
            out = dense_forward(x, self.params["weight"], self.params["bias"])
            self._cache = x
        elif s.kind == "Flatten":
            self._cache = x.shape
            out = x.reshape(x.shape[0], -1)
        else:
            out = x / s.temperature
        return out

    def backward(self, grad):
        s = self.spec
        if s.kind == "Conv2D":
            x, cols = self._cache
            gx, gk, gb = conv2d_backward(grad, x, self.params["kernel"], s.stride, s.padding, cols=cols)
            self.grads = {"kernel": gk, "bias": gb}
            return gx
        if s.kind == "ReLU":
            return relu_backward(grad, self._cache)
        if s.kind == "MaxPool2D":
            shape, arg = self._cache
            return maxpool_backward(grad, arg, shape, s.pool, s.stride)
        if s.kind == "Dropout":
            return dropout_backward(grad, self._cache)
        if s.kind == "Dense":
            gx, gw, gb = dense_backward(grad, self._cache, self.params["weight"])
            self.grads = {"weight": gw, "bias": gb}
            return gx
        if s.kind == "Flatten":
            return grad.reshape(self._cache)
        return grad / s.temperature


# --------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    decay: float = 1e-6
    epochs: int = 30
    batch_size: int = 64
    rng_seed: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ParameterError("learning_rate must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ParameterError("momentum must lie in [0, 1)")
        if self.decay < 0:
            raise ParameterError("decay must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ParameterError("epochs and batch_size must be positive")


@dataclass
class SGD:
    """SGD with momentum and inverse-time learning-rate decay.

    ``lr_t = lr_0 / (1 + decay * t)`` where ``t`` counts completed updates.
    """

    learning_rate: float = 0.01
    momentum: float = 0.9
    decay: float = 0.0
    iterations: int = 0
    velocity: dict = field(default_factory=dict)

    @classmethod
    def from_config(cls, config):
        return cls(config.learning_rate, config.momentum, config.decay)

    @property
    def current_lr(self):
        return self.learning_rate / (1.0 + self.decay * self.iterations)

    def step(self, params, grads):
        """Update ``params`` (dict of name -> array) in place."""
        lr = self.current_lr
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise DimensionError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}", axis=name)
            v = self.velocity.get(name)
            if v is None:
                v = np.zeros_like(p)
            elif v.shape != p.shape:
                raise DimensionError(f"velocity shape {v.shape} != parameter shape {p.shape} for {name}", axis=name)
            v = self.momentum * v - lr * g
            self.velocity[name] = v
            p += v
        self.iterations += 1
        return params


def sgd_step(params, grads, config, velocity_state, step=0):
    """Functional single update; returns ``(new_params, new_velocity)``."""
    lr = config.learning_rate / (1.0 + config.decay * step)
    new_params, new_velocity = {}, {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        v = velocity_state.get(name, np.zeros_like(p))
        if g.shape != np.shape(p) or np.shape(v) != np.shape(p):
            raise DimensionError(f"shape mismatch for parameter {name}", axis=name)
        v = config.momentum * v - lr * g
        new_velocity[name] = v
        new_params[name] = p + v
    return new_params, new_velocity
