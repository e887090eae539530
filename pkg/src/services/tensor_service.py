"""
Dense rank-4 tensors (batch, channels, height, width).

Tensors are C-contiguous numpy arrays, so element (i, d, y, x) sits at flat index
((i*c + d)*h + y)*w + x and flat iteration order is deterministic.
"""

from typing import NamedTuple, Tuple, Union

import numpy as np

from ..core.exceptions import ShapeError
from ..schemas.run import Precision

Tensor4 = np.ndarray

_U64_MAX = 2 ** 64 - 1


class Shape4(NamedTuple):
    n: int
    c: int
    h: int
    w: int

    @property
    def size(self) -> int:
        return self.n * self.c * self.h * self.w

    @classmethod
    def of(cls, x: Tensor4) -> "Shape4":
        return cls(*x.shape)

    def with_batch(self, n: int) -> "Shape4":
        return self._replace(n=n)


def dtype_for(precision: Union[Precision, str]) -> np.dtype:
    """float32 for training, float64 for gradient checking."""
    return np.dtype(np.float64 if Precision(precision) is Precision.DOUBLE else np.float32)


def validate_shape(shape: Tuple[int, int, int, int]) -> Shape4:
    if len(shape) != 4:
        raise ShapeError(f"expected 4 dimensions, got {len(shape)}")
    shape = Shape4(*(int(d) for d in shape))
    if any(d < 1 for d in shape):
        raise ShapeError(f"invalid shape {tuple(shape)}: all dimensions must be >= 1")
    if shape.size > _U64_MAX:
        raise ShapeError(f"invalid shape {tuple(shape)}: element count overflows 64 bits")
    return shape


def tensor_new(shape: Tuple[int, int, int, int], fill: float = 0.0, dtype=np.float32) -> Tensor4:
    shape = validate_shape(shape)
    return np.full(shape, fill, dtype=dtype)


def as_tensor4(x) -> Tensor4:
    """Return `x` as a C-contiguous rank-4 float array, validating its shape."""
    x = np.asarray(x)
    validate_shape(x.shape)
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float32)
    return np.ascontiguousarray(x)


def flat_index(shape: Shape4, i: int, d: int, y: int, x: int) -> int:
    return ((i * shape.c + d) * shape.h + y) * shape.w + x


def unflatten_index(shape: Shape4, index: int) -> Tuple[int, int, int, int]:
    index, x = divmod(index, shape.w)
    index, y = divmod(index, shape.h)
    i, d = divmod(index, shape.c)
    return i, d, y, x


def channel_mean_map(x: Tensor4, sample: int) -> np.ndarray:
    """Average one sample over its channels, giving an (h, w) map."""
    if not 0 <= sample < x.shape[0]:
        raise ShapeError(f"sample {sample} out of range for batch of {x.shape[0]}")
    return x[sample].mean(axis=0, dtype=np.float64).astype(x.dtype)
