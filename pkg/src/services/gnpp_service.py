"""
Geometric neural phrase pooling and the Gaussian blur control layer.

For every location the GNPP output is the mean of the central word and the largest
weighted side word:

    z[y, x] = 0.5 * (x[y, x] + max_k w_k * x[y + dy_k, x + dx_k])

Side words outside the map are ignored; when none is left the max term is 0.
All channels and samples are processed independently.
"""

import math
from typing import NamedTuple, Tuple

import numpy as np

from ..core.exceptions import ShapeError
from ..schemas.gnpp import GnppConfig
from .tensor_service import Tensor4, as_tensor4

EMPTY_SIDE_SET = -1


class GnppCache(NamedTuple):
    # Per (sample, channel, y, x): index into cfg.offsets, or EMPTY_SIDE_SET
    argmax: np.ndarray


def _shift_slices(d: int, length: int) -> Tuple[slice, slice]:
    """Slices (q, p) such that p = q + d stays inside [0, length)."""
    lo, hi = max(0, -d), min(length, length - d)
    return slice(lo, max(lo, hi)), slice(lo + d, max(lo, hi) + d)


def gnpp_forward(x: Tensor4, cfg: GnppConfig) -> Tuple[Tensor4, GnppCache]:
    x = as_tensor4(x)
    n, c, h, w = x.shape
    offsets = cfg.offsets

    candidates = np.full((len(offsets), n, c, h, w), -np.inf, dtype=x.dtype)
    for k, (dy, dx, weight) in enumerate(offsets):
        qy, py = _shift_slices(dy, h)
        qx, px = _shift_slices(dx, w)
        candidates[k, :, :, qy, qx] = weight * x[:, :, py, px]

    # np.argmax keeps the first maximum, i.e. the enumeration order breaks ties
    argmax = np.argmax(candidates, axis=0).astype(np.int8)
    side = np.take_along_axis(candidates, argmax[None].astype(np.intp), axis=0)[0]
    empty = np.isneginf(side)
    side[empty] = 0
    argmax[empty] = EMPTY_SIDE_SET

    z = (x + side) * x.dtype.type(0.5)
    return z.astype(x.dtype, copy=False), GnppCache(argmax=argmax)


def gnpp_backward(grad_z: Tensor4, cache: GnppCache, cfg: GnppConfig) -> Tensor4:
    """Subgradient of `gnpp_forward`; each location routes to its cached side word only."""
    grad_z = as_tensor4(grad_z)
    if grad_z.shape != cache.argmax.shape:
        raise ShapeError(f"gradient shape {grad_z.shape} does not match cache {cache.argmax.shape}")
    _, _, h, w = grad_z.shape
    half = grad_z.dtype.type(0.5)

    grad_x = half * grad_z
    for k, (dy, dx, weight) in enumerate(cfg.offsets):
        routed = np.where(cache.argmax == k, grad_z * (half * grad_z.dtype.type(weight)), 0)
        qy, py = _shift_slices(dy, h)
        qx, px = _shift_slices(dx, w)
        grad_x[:, :, py, px] += routed[:, :, qy, qx]
    return grad_x


def gaussian_kernel(std: float) -> np.ndarray:
    """Normalized 1D Gaussian truncated at ceil(3 * std)."""
    if std <= 0:
        raise ShapeError(f"Gaussian blur std must be positive, got {std}")
    radius = int(math.ceil(3 * std))
    taps = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-(taps ** 2) / (2 * std ** 2))
    return kernel / kernel.sum()


def _blur_axis(x: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    radius = len(kernel) // 2
    length = x.shape[axis]
    pad = [(0, 0)] * x.ndim
    pad[axis] = (radius, radius)
    padded = np.pad(x, pad)
    out = np.zeros_like(x)
    for t, weight in enumerate(kernel):
        window = [slice(None)] * x.ndim
        window[axis] = slice(t, t + length)
        out += x.dtype.type(weight) * padded[tuple(window)]
    return out


def gaussian_blur_forward(x: Tensor4, std: float) -> Tensor4:
    """Per-channel zero-padded Gaussian blur; the 2D kernel is separable and sums to 1."""
    x = as_tensor4(x)
    kernel = gaussian_kernel(std)
    return _blur_axis(_blur_axis(x, kernel, axis=3), kernel, axis=2)


def gaussian_blur_backward(grad_out: Tensor4, std: float) -> Tensor4:
    # The kernel is symmetric, so the blur is self-adjoint
    return gaussian_blur_forward(grad_out, std)
