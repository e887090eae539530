"""
CNN layers with explicit forward and backward passes.

The functional ops (`conv_forward`, `pool_forward`, ...) are what the layer objects
at the bottom of this module wrap. All ops keep the dtype of their input, so the same
code runs in float32 for training and float64 for gradient checks.
"""

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from ..core.exceptions import ConfigError, ShapeError
from ..schemas.arch import AvgPool, Conv, MaxPool
from ..schemas.gnpp import GnppConfig
from .gnpp_service import (
    GnppCache,
    gaussian_blur_backward,
    gaussian_blur_forward,
    gnpp_backward,
    gnpp_forward,
)
from .tensor_service import Tensor4


# ---------------------------------------------------------------------------
# Output size arithmetic
# ---------------------------------------------------------------------------

def conv_out_dim(size: int, k: int, stride: int, pad: int) -> int:
    if size + 2 * pad < k:
        raise ShapeError(f"kernel {k} larger than padded input {size + 2 * pad}")
    return (size + 2 * pad - k) // stride + 1


def pool_out_dim(size: int, k: int, stride: int) -> int:
    """ceil((size - k) / stride) + 1; windows may overhang the bottom/right border."""
    out = -(-(size - k) // stride) + 1
    if out < 1:
        raise ShapeError(f"pool window {k} with stride {stride} produces no output on size {size}")
    if (out - 1) * stride >= size:
        raise ShapeError(f"last pool window starts outside an input of size {size}")
    return out


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

@dataclass
class ConvParams:
    kernel: np.ndarray  # (out_channels, in_channels, k, k)
    bias: np.ndarray  # (out_channels,)
    stride: int = 1
    pad: int = 0

    @property
    def k(self) -> int:
        return self.kernel.shape[2]


def im2col(x: Tensor4, k: int, stride: int, pad: int) -> Tuple[np.ndarray, int, int]:
    """Unfold (N, C, H, W) into rows of (C*k*k) patch values, one row per output location."""
    n, c, h, w = x.shape
    out_h = conv_out_dim(h, k, stride, pad)
    out_w = conv_out_dim(w, k, stride, pad)

    img = np.pad(x, [(0, 0), (0, 0), (pad, pad), (pad, pad)], mode="constant")
    col = np.empty((n, c, k, k, out_h, out_w), dtype=x.dtype)
    for y in range(k):
        y_max = y + stride * out_h
        for xx in range(k):
            x_max = xx + stride * out_w
            col[:, :, y, xx, :, :] = img[:, :, y:y_max:stride, xx:x_max:stride]

    col = col.transpose(0, 4, 5, 1, 2, 3).reshape(n * out_h * out_w, -1)
    return col, out_h, out_w


def col2im(col: np.ndarray, x_shape, k: int, stride: int, pad: int) -> Tensor4:
    """Fold patch rows back, summing overlapping contributions."""
    n, c, h, w = x_shape
    out_h = conv_out_dim(h, k, stride, pad)
    out_w = conv_out_dim(w, k, stride, pad)

    col = col.reshape(n, out_h, out_w, c, k, k).transpose(0, 3, 4, 5, 1, 2)
    img = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=col.dtype)
    for y in range(k):
        y_max = y + stride * out_h
        for xx in range(k):
            x_max = xx + stride * out_w
            img[:, :, y:y_max:stride, xx:x_max:stride] += col[:, :, y, xx, :, :]
    return img[:, :, pad:pad + h, pad:pad + w]


def conv_forward(x: Tensor4, p: ConvParams) -> Tuple[Tensor4, np.ndarray]:
    """Cross-correlation plus bias. Returns the output and the im2col matrix for backward."""
    n, c, _, _ = x.shape
    if c != p.kernel.shape[1]:
        raise ShapeError(f"input has {c} channels, kernel expects {p.kernel.shape[1]}")
    out_channels = p.kernel.shape[0]
    col, out_h, out_w = im2col(x, p.k, p.stride, p.pad)
    out = col @ p.kernel.reshape(out_channels, -1).T + p.bias
    return np.ascontiguousarray(out.reshape(n, out_h, out_w, out_channels).transpose(0, 3, 1, 2)), col


def conv_backward(
    grad_out: Tensor4, col: np.ndarray, x_shape, p: ConvParams
) -> Tuple[Tensor4, np.ndarray, np.ndarray]:
    """Gradients with respect to input, kernel and bias."""
    out_channels = p.kernel.shape[0]
    g = grad_out.transpose(0, 2, 3, 1).reshape(-1, out_channels)
    grad_kernel = (g.T @ col).reshape(p.kernel.shape)
    grad_bias = g.sum(axis=0)
    grad_col = g @ p.kernel.reshape(out_channels, -1)
    grad_x = col2im(grad_col, x_shape, p.k, p.stride, p.pad)
    return grad_x, grad_kernel, grad_bias


# ---------------------------------------------------------------------------
# Pooling
# ---------------------------------------------------------------------------

@dataclass
class PoolParams:
    kind: str  # "max" or "avg"
    k: int
    stride: int


@dataclass
class PoolCache:
    x_shape: Tuple[int, int, int, int]
    out_hw: Tuple[int, int]
    # Max: window position of the winner; Avg: in-bounds cell count per window
    argmax: Optional[np.ndarray] = None
    count: Optional[np.ndarray] = None


def _padded_extent(size: int, out: int, k: int, stride: int) -> int:
    return max(size, (out - 1) * stride + k)


def pool_forward(x: Tensor4, p: PoolParams) -> Tuple[Tensor4, PoolCache]:
    n, c, h, w = x.shape
    if p.k > h and p.k > w:
        raise ShapeError(f"pool window {p.k} larger than input {h}x{w}")
    out_h = pool_out_dim(h, p.k, p.stride)
    out_w = pool_out_dim(w, p.k, p.stride)
    ph = _padded_extent(h, out_h, p.k, p.stride)
    pw = _padded_extent(w, out_w, p.k, p.stride)
    span_h = p.stride * (out_h - 1) + 1
    span_w = p.stride * (out_w - 1) + 1
    cache = PoolCache(x_shape=x.shape, out_hw=(out_h, out_w))

    if p.kind == "max":
        xp = np.pad(x, [(0, 0), (0, 0), (0, ph - h), (0, pw - w)], constant_values=-np.inf)
        best = None
        argmax = np.zeros((n, c, out_h, out_w), dtype=np.int16)
        for ky in range(p.k):
            for kx in range(p.k):
                win = xp[:, :, ky:ky + span_h:p.stride, kx:kx + span_w:p.stride]
                if best is None:
                    best = win.copy()
                    continue
                better = win > best
                best = np.where(better, win, best)
                argmax[better] = ky * p.k + kx
        cache.argmax = argmax
        return best, cache

    xp = np.pad(x, [(0, 0), (0, 0), (0, ph - h), (0, pw - w)])
    inside = np.pad(np.ones((h, w), dtype=x.dtype), [(0, ph - h), (0, pw - w)])
    total = np.zeros((n, c, out_h, out_w), dtype=x.dtype)
    count = np.zeros((out_h, out_w), dtype=x.dtype)
    for ky in range(p.k):
        for kx in range(p.k):
            total += xp[:, :, ky:ky + span_h:p.stride, kx:kx + span_w:p.stride]
            count += inside[ky:ky + span_h:p.stride, kx:kx + span_w:p.stride]
    cache.count = count
    return total / count, cache


def pool_backward(grad_out: Tensor4, cache: PoolCache, p: PoolParams) -> Tensor4:
    n, c, h, w = cache.x_shape
    out_h, out_w = cache.out_hw
    ph = _padded_extent(h, out_h, p.k, p.stride)
    pw = _padded_extent(w, out_w, p.k, p.stride)
    span_h = p.stride * (out_h - 1) + 1
    span_w = p.stride * (out_w - 1) + 1

    grad_p = np.zeros((n, c, ph, pw), dtype=grad_out.dtype)
    if p.kind == "max":
        for ky in range(p.k):
            for kx in range(p.k):
                routed = np.where(cache.argmax == ky * p.k + kx, grad_out, 0)
                grad_p[:, :, ky:ky + span_h:p.stride, kx:kx + span_w:p.stride] += routed
    else:
        share = grad_out / cache.count
        for ky in range(p.k):
            for kx in range(p.k):
                grad_p[:, :, ky:ky + span_h:p.stride, kx:kx + span_w:p.stride] += share
    return np.ascontiguousarray(grad_p[:, :, :h, :w])


# ---------------------------------------------------------------------------
# Element-wise layers, fully connected, loss
# ---------------------------------------------------------------------------

def relu(x: Tensor4) -> Tensor4:
    return np.maximum(x, 0).astype(x.dtype, copy=False)


def relu_backward(grad_out: Tensor4, x: Tensor4) -> Tensor4:
    return grad_out * (x > 0)


def dropout_forward(
    x: Tensor4, ratio: float, rng: np.random.Generator, training: bool
) -> Tuple[Tensor4, Optional[np.ndarray]]:
    """Inverted dropout: survivors are scaled by 1/(1 - ratio), inference is the identity."""
    if not 0 <= ratio < 1:
        raise ConfigError(f"dropout ratio must be in [0, 1), got {ratio}")
    if not training:
        return x, None
    keep = rng.random(x.shape) >= ratio
    mask = keep.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - ratio))
    return x * mask, mask


def dropout_backward(grad_out: Tensor4, mask: Optional[np.ndarray]) -> Tensor4:
    return grad_out if mask is None else grad_out * mask


@dataclass
class FcParams:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)


def fc_forward(x: Tensor4, p: FcParams) -> Tensor4:
    flat = x.reshape(x.shape[0], -1)
    if flat.shape[1] != p.weight.shape[1]:
        raise ShapeError(f"FC expects {p.weight.shape[1]} inputs, got {flat.shape[1]}")
    out = flat @ p.weight.T + p.bias
    return out.reshape(x.shape[0], -1, 1, 1)


def fc_backward(grad_out: Tensor4, x: Tensor4, p: FcParams) -> Tuple[Tensor4, np.ndarray, np.ndarray]:
    g = grad_out.reshape(grad_out.shape[0], -1)
    flat = x.reshape(x.shape[0], -1)
    grad_weight = g.T @ flat
    grad_bias = g.sum(axis=0)
    grad_x = (g @ p.weight).reshape(x.shape)
    return grad_x, grad_weight, grad_bias


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_xent(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient with respect to the logits."""
    logits = logits.reshape(logits.shape[0], -1)
    labels = np.asarray(labels, dtype=np.int64)
    n, classes = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ShapeError(f"labels must lie in [0, {classes})")

    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_norm
    rows = np.arange(n)
    loss = float(-log_p[rows, labels].astype(np.float64).mean())

    grad = np.exp(log_p)
    grad[rows, labels] -= 1
    grad /= n
    return loss, grad


def he_normal(shape, fan_in: int, rng: np.random.Generator, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


# ---------------------------------------------------------------------------
# Layer objects used by the network pipeline
# ---------------------------------------------------------------------------

class Layer:
    """A pipeline stage. Stateful layers keep what backward needs from the last forward."""

    name: str = "layer"

    def forward(self, x: Tensor4, training: bool = False) -> Tensor4:
        raise NotImplementedError

    def backward(self, grad_out: Tensor4) -> Tensor4:
        raise NotImplementedError

    def params(self) -> List[np.ndarray]:
        return []

    def grads(self) -> List[np.ndarray]:
        return []

    def routing(self) -> Optional[np.ndarray]:
        """Discrete choices made by the last forward (active units, argmax picks), if any."""
        return None


class Conv2D(Layer):
    name = "conv"

    def __init__(self, in_channels: int, desc: Conv, rng: np.random.Generator, dtype=np.float32):
        fan_in = in_channels * desc.k * desc.k
        self.p = ConvParams(
            kernel=he_normal((desc.out_channels, in_channels, desc.k, desc.k), fan_in, rng, dtype),
            bias=np.zeros(desc.out_channels, dtype=dtype),
            stride=desc.stride,
            pad=desc.pad,
        )
        self.grad_kernel = np.zeros_like(self.p.kernel)
        self.grad_bias = np.zeros_like(self.p.bias)

    def forward(self, x, training=False):
        self._x_shape = x.shape
        out, self._col = conv_forward(x, self.p)
        return out

    def backward(self, grad_out):
        grad_x, self.grad_kernel, self.grad_bias = conv_backward(grad_out, self._col, self._x_shape, self.p)
        return grad_x

    def params(self):
        return [self.p.kernel, self.p.bias]

    def grads(self):
        return [self.grad_kernel, self.grad_bias]


class Pool2D(Layer):
    def __init__(self, desc):
        kind = "max" if isinstance(desc, MaxPool) else "avg"
        self.name = f"{kind}pool"
        self.p = PoolParams(kind=kind, k=desc.k, stride=desc.stride)

    def forward(self, x, training=False):
        out, self._cache = pool_forward(x, self.p)
        return out

    def backward(self, grad_out):
        return pool_backward(grad_out, self._cache, self.p)

    def routing(self):
        return self._cache.argmax


class ReLU(Layer):
    name = "relu"

    def forward(self, x, training=False):
        self._x = x
        return relu(x)

    def backward(self, grad_out):
        return relu_backward(grad_out, self._x)

    def routing(self):
        return self._x > 0


class FullyConnected(Layer):
    name = "fc"

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, dtype=np.float32):
        self.p = FcParams(
            weight=he_normal((out_features, in_features), in_features, rng, dtype),
            bias=np.zeros(out_features, dtype=dtype),
        )
        self.grad_weight = np.zeros_like(self.p.weight)
        self.grad_bias = np.zeros_like(self.p.bias)

    def forward(self, x, training=False):
        self._x = x
        return fc_forward(x, self.p)

    def backward(self, grad_out):
        grad_x, self.grad_weight, self.grad_bias = fc_backward(grad_out, self._x, self.p)
        return grad_x

    def params(self):
        return [self.p.weight, self.p.bias]

    def grads(self):
        return [self.grad_weight, self.grad_bias]


class DropoutLayer(Layer):
    name = "dropout"

    def __init__(self, ratio: float, rng: Optional[np.random.Generator] = None):
        if not 0 <= ratio < 1:
            raise ConfigError(f"dropout ratio must be in [0, 1), got {ratio}")
        self.ratio = ratio
        self.rng = rng if rng is not None else np.random.default_rng(0)
        # When set, this mask is reused instead of drawing a new one (gradient checks)
        self.fixed_mask: Optional[np.ndarray] = None
        self._mask = None

    def forward(self, x, training=False):
        if training and self.fixed_mask is not None:
            self._mask = self.fixed_mask.astype(x.dtype)
            return x * self._mask
        out, self._mask = dropout_forward(x, self.ratio, self.rng, training)
        return out

    def backward(self, grad_out):
        return dropout_backward(grad_out, self._mask)


class GnppLayer(Layer):
    name = "gnpp"

    def __init__(self, cfg: GnppConfig):
        self.cfg = cfg

    def forward(self, x, training=False):
        out, self._cache = gnpp_forward(x, self.cfg)
        return out

    def backward(self, grad_out):
        return gnpp_backward(grad_out, self._cache, self.cfg)

    @property
    def cache(self) -> GnppCache:
        return self._cache

    def routing(self):
        return self._cache.argmax


class GaussianBlurLayer(Layer):
    name = "gaussblur"

    def __init__(self, std: float):
        self.std = std

    def forward(self, x, training=False):
        return gaussian_blur_forward(x, self.std)

    def backward(self, grad_out):
        return gaussian_blur_backward(grad_out, self.std)
