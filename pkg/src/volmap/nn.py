"""Small dense NN engine: exactly the layers the lightweight UNet needs.

Every op works on a single sample laid out as [C, H, W] and comes as a
``*_forward`` returning ``(out, cache)`` and a ``*_backward`` consuming the
upstream gradient and that cache. Ops follow the dtype of their input, so
gradient checks can run in float64 while training runs in float32.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .geometry import IGNORE_LABEL
from .labeler import ClassStats

WEIGHT_OFFSET = 1.02


# -- convolution ---------------------------------------------------------------

def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    c, h, w = x.shape
    if k == 1:
        return x.reshape(c, h * w)
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # [C, H, W, k, k]
    return win.transpose(0, 3, 4, 1, 2).reshape(c * k * k, h * w)


def conv2d_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray):
    """Stride-1 cross-correlation with 'same' zero padding (odd square kernels)."""
    cout, cin, kh, kw = weight.shape
    if x.ndim != 3 or x.shape[0] != cin:
        raise ValueError(f"conv2d expects {cin} input channels, got shape {x.shape}")
    if kh != kw or kh % 2 == 0:
        raise ValueError("kernel must be square with odd size")
    _, h, w = x.shape
    cols = _im2col(x, kh)
    out = weight.reshape(cout, -1) @ cols
    out += bias[:, None]
    return out.reshape(cout, h, w), (cols, x.shape, weight)


def conv2d_backward(dout: np.ndarray, cache):
    """Returns (dx, dweight, dbias)."""
    cols, (cin, h, w), weight = cache
    cout, _, k, _ = weight.shape
    d2 = dout.reshape(cout, h * w)
    dweight = (d2 @ cols.T).reshape(weight.shape)
    dbias = d2.sum(axis=1)
    dcols = weight.reshape(cout, -1).T @ d2
    if k == 1:
        return dcols.reshape(cin, h, w), dweight, dbias
    p = k // 2
    dcols = dcols.reshape(cin, k, k, h, w)
    dxp = np.zeros((cin, h + 2 * p, w + 2 * p), dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, i:i + h, j:j + w] += dcols[:, i, j]
    return dxp[:, p:p + h, p:p + w], dweight, dbias


def conv2d(x, weight, bias):
    return conv2d_forward(x, weight, bias)[0]


# -- activations, pooling, upsampling, skips ------------------------------------

def relu_forward(x: np.ndarray):
    mask = x > 0
    return np.where(mask, x, 0).astype(x.dtype, copy=False), mask


def relu_backward(dout: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return dout * mask


def relu(x):
    return relu_forward(x)[0]


def maxpool2_forward(x: np.ndarray):
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    blocks = x.reshape(c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h // 2, w // 2, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    return out, (arg, x.shape)


def maxpool2_backward(dout: np.ndarray, cache) -> np.ndarray:
    arg, (c, h, w) = cache
    d = np.zeros((c, h // 2, w // 2, 4), dtype=dout.dtype)
    np.put_along_axis(d, arg[..., None], dout[..., None], axis=-1)
    return d.reshape(c, h // 2, w // 2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h, w)


def maxpool2(x):
    return maxpool2_forward(x)[0]


def upsample2_forward(x: np.ndarray):
    return x.repeat(2, axis=1).repeat(2, axis=2), x.shape


def upsample2_backward(dout: np.ndarray, shape) -> np.ndarray:
    c, h, w = shape
    return dout.reshape(c, h, 2, w, 2).sum(axis=(2, 4))


def upsample2_nearest(x):
    return upsample2_forward(x)[0]


def concat_forward(a: np.ndarray, b: np.ndarray):
    if a.shape[1:] != b.shape[1:]:
        raise ValueError(f"cannot concatenate {a.shape} and {b.shape}")
    return np.concatenate([a, b], axis=0), a.shape[0]


def concat_backward(dout: np.ndarray, split: int):
    return dout[:split], dout[split:]


def concat_channels(a, b):
    return concat_forward(a, b)[0]


# -- loss ------------------------------------------------------------------------

def class_weights(stats, log_base: float = math.e) -> np.ndarray:
    """1 / log(1.02 + frequency) per class.

    ``stats`` is a :class:`ClassStats` or a plain sequence of frequencies.
    Any f >= 0 keeps the denominator positive, so values above 1 are allowed.
    """
    freqs = np.asarray(stats.frequencies if isinstance(stats, ClassStats) else stats, dtype=np.float64)
    if not (np.isfinite(freqs).all() and (freqs >= 0).all()):
        raise ValueError("class frequencies must be finite and non-negative")
    return math.log(log_base) / np.log(WEIGHT_OFFSET + freqs)


def softmax(logits: np.ndarray, axis: int = 0) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def weighted_softmax_ce(logits: np.ndarray, targets: np.ndarray, weights,
                        ignore_id: int = IGNORE_LABEL):
    """Mean weighted cross entropy over non-ignored cells, and d(loss)/d(logits)."""
    k = logits.shape[0]
    targets = np.asarray(targets)
    if targets.shape != logits.shape[1:]:
        raise ValueError(f"targets {targets.shape} do not match logits {logits.shape}")
    weights = np.asarray(weights, dtype=logits.dtype)
    if weights.shape != (k,):
        raise ValueError(f"need {k} class weights, got {weights.shape}")
    valid = targets != ignore_id
    count = int(valid.sum())
    if count == 0:
        raise ValueError("every cell is ignored; loss is undefined")
    t = np.where(valid, targets, 0).astype(np.int64)
    if t.max() >= k or t.min() < 0:
        raise ValueError("target class out of range")

    z = logits - logits.max(axis=0, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=0))
    logp_t = np.take_along_axis(z, t[None], axis=0)[0] - logsum
    w_t = np.where(valid, weights[t], 0).astype(logits.dtype)
    loss = float(-(w_t * logp_t).sum() / count)

    grad = np.exp(z - logsum)
    np.put_along_axis(grad, t[None], np.take_along_axis(grad, t[None], axis=0) - 1, axis=0)
    grad *= (w_t / count)[None]
    return loss, grad


# -- parameters ------------------------------------------------------------------

@dataclass(eq=False)
class LayerParams:
    name: str
    weight: np.ndarray
    bias: np.ndarray
    weight_grad: np.ndarray = field(default=None)
    bias_grad: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.weight_grad is None:
            self.weight_grad = np.zeros_like(self.weight)
        if self.bias_grad is None:
            self.bias_grad = np.zeros_like(self.bias)
        if self.weight_grad.shape != self.weight.shape or self.bias_grad.shape != self.bias.shape:
            raise ValueError(f"{self.name}: gradient shape differs from parameter shape")

    def zero_grad(self) -> None:
        self.weight_grad[...] = 0
        self.bias_grad[...] = 0


def he_normal(rng: np.random.Generator, cout: int, cin: int, k: int, dtype=np.float32) -> np.ndarray:
    std = math.sqrt(2.0 / (cin * k * k))
    return (rng.standard_normal((cout, cin, k, k)) * std).astype(dtype)


class SGD:
    """Plain SGD with optional momentum (off by default)."""

    def __init__(self, lr: float, momentum: float = 0.0):
        self.lr = lr
        self.momentum = momentum
        self._velocity: dict = {}

    def step(self, layers: Iterable[LayerParams]) -> None:
        for layer in layers:
            for attr in ("weight", "bias"):
                p, g = getattr(layer, attr), getattr(layer, attr + "_grad")
                if self.momentum:
                    v = self._velocity.setdefault((layer.name, attr), np.zeros_like(p))
                    v *= self.momentum
                    v += g
                    g = v
                p -= (self.lr * g).astype(p.dtype, copy=False)
            layer.zero_grad()


def sgd_step(layers: Sequence[LayerParams], lr: float) -> None:
    """p <- p - lr * grad for every parameter, then zero the gradients."""
    SGD(lr).step(layers)
