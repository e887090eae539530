"""
Receptive fields, latent connection counts, diffusion heatmaps and convergence helpers.
"""

import math
from typing import List, Optional

import numpy as np
import pandas as pd

from ..core.exceptions import ConfigError, ShapeError
from ..schemas.analysis import RfInfo
from ..schemas.arch import POOL_TYPES, ArchSpec, Conv, Fc, GaussBlur, Gnpp
from ..schemas.gnpp import AXIAL_OFFSETS, DIAGONAL_OFFSETS, NeighborhoodType
from .arch_service import layer_token, shape_infer
from .tensor_service import Tensor4, channel_mean_map, validate_shape


def _check_index(arch: ArchSpec, layer_index: int):
    if not 0 <= layer_index < len(arch.layers):
        raise ConfigError(f"layer index {layer_index} out of range for {len(arch.layers)} layers")


def receptive_field_chain(arch: ArchSpec, layer_index: int) -> List[RfInfo]:
    """RfInfo after every layer up to and including `layer_index`.

    rf <- rf + (k - 1) * jump and jump <- jump * stride for Conv and pooling;
    a GNPP layer adds one ring of neurons (2 * jump), a Gaussian blur adds its kernel radius.
    """
    _check_index(arch, layer_index)
    rf, jump, start = 1, 1, 0.0
    chain = []
    for i, layer in enumerate(arch.layers[: layer_index + 1]):
        if isinstance(layer, Fc):
            raise ConfigError(f"layer {i} is fully connected; receptive fields stop before FC layers")
        if isinstance(layer, Conv) or isinstance(layer, POOL_TYPES):
            pad = layer.pad if isinstance(layer, Conv) else 0
            rf += (layer.k - 1) * jump
            start += ((layer.k - 1) / 2 - pad) * jump
            jump *= layer.stride
        elif isinstance(layer, Gnpp):
            rf += 2 * jump
        elif isinstance(layer, GaussBlur):
            rf += 2 * math.ceil(3 * layer.std) * jump
        chain.append(RfInfo(rf=rf, jump=jump, start=start))
    return chain


def receptive_field(arch: ArchSpec, layer_index: int) -> RfInfo:
    return receptive_field_chain(arch, layer_index)[-1]


def rf_table(arch: ArchSpec, layer_index: Optional[int] = None) -> pd.DataFrame:
    """One row per layer up to `layer_index` (default: the last layer before any FC)."""
    if layer_index is None:
        layer_index = next(i for i, layer in enumerate(arch.layers) if isinstance(layer, Fc)) - 1
        if layer_index < 0:
            raise ConfigError("architecture has no layers before its first FC")
    chain = receptive_field_chain(arch, layer_index)
    return pd.DataFrame(
        {
            "index": range(len(chain)),
            "layer": [layer_token(layer) for layer in arch.layers[: len(chain)]],
            "rf": [info.rf for info in chain],
            "jump": [info.jump for info in chain],
            "overlap": [round(info.overlap, 6) for info in chain],
        }
    )


def full_view_layer(arch: ArchSpec, input_shape) -> Optional[int]:
    """Earliest layer whose receptive field covers the whole input, or None."""
    shape = validate_shape(input_shape)
    side = max(shape.h, shape.w)
    last = next(i for i, layer in enumerate(arch.layers) if isinstance(layer, Fc)) - 1
    if last < 0:
        return None
    for i, info in enumerate(receptive_field_chain(arch, last)):
        if info.rf >= side:
            return i
    return None


def phrase_offsets(nb_type: Optional[NeighborhoodType]):
    offsets = [(0, 0)]
    if nb_type is not None:
        offsets += list(AXIAL_OFFSETS)
        if NeighborhoodType(nb_type) is NeighborhoodType.TYPE2:
            offsets += list(DIAGONAL_OFFSETS)
    return offsets


def connection_footprint(k: int, stride: int = 1, nb_type: Optional[NeighborhoodType] = None) -> int:
    """Input positions feeding one (GNPP) neuron: the union of k x k windows at the phrase offsets."""
    cells = set()
    for dy, dx in phrase_offsets(nb_type):
        for ky in range(k):
            for kx in range(k):
                cells.add((dy * stride + ky, dx * stride + kx))
    return len(cells)


def connection_count(
    arch: ArchSpec,
    conv_layer_index: int,
    input_shape,
    nb_type: Optional[NeighborhoodType] = None,
) -> int:
    """Connections between a conv layer and its input, optionally counting GNPP latent ones."""
    _check_index(arch, conv_layer_index)
    layer = arch.layers[conv_layer_index]
    if not isinstance(layer, Conv):
        raise ConfigError(f"layer {conv_layer_index} ({layer_token(layer)}) is not a convolution")
    shapes = shape_infer(arch, input_shape)
    in_channels = validate_shape(input_shape).c if conv_layer_index == 0 else shapes[conv_layer_index - 1].c
    out = shapes[conv_layer_index]
    footprint = connection_footprint(layer.k, layer.stride, nb_type)
    return out.c * out.h * out.w * footprint * in_channels


def conv_ordinal_index(arch: ArchSpec, ordinal: int) -> int:
    """Arch index of the `ordinal`-th convolution (1-based, as in conv-5)."""
    convs = arch.conv_indices()
    if not 1 <= ordinal <= len(convs):
        raise ConfigError(f"conv-{ordinal} does not exist; architecture has {len(convs)} conv layers")
    return convs[ordinal - 1]


def heatmap_accumulate(
    features: Tensor4,
    arch: ArchSpec,
    layer_index: int,
    input_shape,
    std_factor: float = 0.25,
    sample: int = 0,
) -> np.ndarray:
    """Diffuse the channel-mean response of every neuron as a Gaussian over the input image.

    Each neuron contributes value * exp(-d^2 / (2 std^2)) centered at its receptive-field
    center, with std = std_factor * rf. Returns the un-normalized (H, W) map.
    """
    if std_factor <= 0:
        raise ConfigError(f"std factor must be positive, got {std_factor}")
    shape = validate_shape(input_shape)
    expected = shape_infer(arch, shape.with_batch(features.shape[0]))[layer_index]
    if tuple(features.shape) != tuple(expected):
        raise ShapeError(f"features of shape {features.shape} do not match layer output {tuple(expected)}")
    info = receptive_field(arch, layer_index)
    responses = channel_mean_map(features, sample).astype(np.float64)
    std = std_factor * info.rf

    def axis_weights(count: int, size: int) -> np.ndarray:
        centers = info.start + info.jump * np.arange(count)
        pixels = np.arange(size)
        return np.exp(-((pixels[None, :] - centers[:, None]) ** 2) / (2 * std ** 2))

    # Separable: sum_ij m_ij gy_i(Y) gx_j(X) = Gy^T M Gx
    gy = axis_weights(responses.shape[0], shape.h)
    gx = axis_weights(responses.shape[1], shape.w)
    return gy.T @ responses @ gx


def heatmap(
    features: Tensor4,
    arch: ArchSpec,
    layer_index: int,
    input_shape,
    std_factor: float = 0.25,
    sample: int = 0,
) -> np.ndarray:
    """`heatmap_accumulate` min-max normalized to an 8-bit grayscale image."""
    acc = heatmap_accumulate(features, arch, layer_index, input_shape, std_factor, sample)
    lo, hi = acc.min(), acc.max()
    if hi <= lo:
        return np.zeros(acc.shape, dtype=np.uint8)
    return np.round((acc - lo) / (hi - lo) * 255).astype(np.uint8)


def iterations_to_reach(curves: pd.DataFrame, target_error: float) -> Optional[int]:
    """First iteration at which the test error is at or below `target_error`."""
    hits = curves[curves["test_error"] <= target_error]
    if hits.empty:
        return None
    return int(hits["iteration"].iloc[0])
