"""
Dataset ingestion: MNIST IDX files, CIFAR-10/100 binary batches, normalization and
horizontal-flip augmentation.
"""

import gzip
import logging
import struct
from enum import Enum
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from ..core.exceptions import ConfigError, DataFormatError
from ..schemas.run import DatasetName, NormalizeScheme

logger = logging.getLogger(__name__)

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

CIFAR_PIXELS = 3 * 32 * 32

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CIFAR10_FILES = {
    "train": [f"data_batch_{i}.bin" for i in range(1, 6)],
    "test": ["test_batch.bin"],
}
CIFAR100_FILES = {"train": ["train.bin"], "test": ["test.bin"]}


class Split(str, Enum):
    TRAIN = "train"
    TEST = "test"


class CifarVariant(str, Enum):
    C10 = "c10"
    C100 = "c100"


class Dataset(BaseModel):
    """Labeled images of shape (count, channels, h, w) with values in [0, 1]."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    images: np.ndarray
    labels: np.ndarray
    class_count: int
    split: Split
    # Per-channel training mean, set once MeanSubtract has been applied
    channel_mean: Optional[List[float]] = None

    @model_validator(mode="after")
    def check_labels(self):
        if self.images.ndim != 4:
            raise ValueError(f"images must be rank 4, got shape {self.images.shape}")
        if len(self.labels) != self.images.shape[0]:
            raise ValueError(f"{len(self.labels)} labels for {self.images.shape[0]} images")
        if len(self.labels) and int(self.labels.max()) >= self.class_count:
            raise ValueError(f"label {int(self.labels.max())} >= class count {self.class_count}")
        return self

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, limit: Optional[int]) -> "Dataset":
        if limit is None or limit >= len(self):
            return self
        return self.model_copy(update={"images": self.images[:limit], "labels": self.labels[:limit]})

    def class_histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count)


def _read_bytes(path: Union[str, Path]) -> bytes:
    path = Path(path)
    if not path.exists():
        raise DataFormatError("file not found", str(path))
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return f.read()


def _idx_header(data: bytes, path, expected_magic: int, dims: int):
    header_size = 4 + 4 * dims
    if len(data) < header_size:
        raise DataFormatError("truncated IDX header", str(path))
    magic = struct.unpack(">I", data[:4])[0]
    if magic != expected_magic:
        raise DataFormatError(f"bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}", str(path))
    return struct.unpack(f">{dims}I", data[4:header_size]), header_size


def load_mnist(image_path, label_path, split: Split = Split.TRAIN) -> Dataset:
    """Parse a big-endian IDX image/label file pair (gzip-compressed when the name ends in .gz)."""
    image_data = _read_bytes(image_path)
    label_data = _read_bytes(label_path)

    (count, rows, cols), offset = _idx_header(image_data, image_path, IDX_IMAGE_MAGIC, 3)
    expected = offset + count * rows * cols
    if len(image_data) < expected:
        raise DataFormatError(f"truncated: {len(image_data)} bytes, expected {expected}", str(image_path))
    images = np.frombuffer(image_data, dtype=np.uint8, count=count * rows * cols, offset=offset)

    (label_count,), label_offset = _idx_header(label_data, label_path, IDX_LABEL_MAGIC, 1)
    if len(label_data) < label_offset + label_count:
        raise DataFormatError(
            f"truncated: {len(label_data)} bytes, expected {label_offset + label_count}", str(label_path)
        )
    if label_count != count:
        raise DataFormatError(f"{count} images but {label_count} labels", str(label_path))
    labels = np.frombuffer(label_data, dtype=np.uint8, count=label_count, offset=label_offset)

    logger.info(f"Loaded {count} MNIST images from {image_path}")
    return Dataset(
        images=(images.reshape(count, 1, rows, cols).astype(np.float32) / np.float32(255)),
        labels=labels.astype(np.int64),
        class_count=10,
        split=split,
    )


def load_cifar(paths: Sequence[Union[str, Path]], variant: CifarVariant, split: Split = Split.TRAIN) -> Dataset:
    """Concatenate CIFAR binary batch files.

    C10 records are 1 label byte + 3072 pixels, C100 records are coarse + fine label
    bytes + 3072 pixels (the fine label is used). Pixels are R, G, B planes, row-major.
    """
    variant = CifarVariant(variant)
    label_bytes = 1 if variant is CifarVariant.C10 else 2
    record = label_bytes + CIFAR_PIXELS
    images, labels = [], []
    for path in paths:
        data = _read_bytes(path)
        if len(data) % record:
            raise DataFormatError(f"length {len(data)} is not a multiple of the {record}-byte record", str(path))
        rows = np.frombuffer(data, dtype=np.uint8).reshape(-1, record)
        labels.append(rows[:, label_bytes - 1])
        images.append(rows[:, label_bytes:])

    pixels = np.concatenate(images) if images else np.zeros((0, CIFAR_PIXELS), dtype=np.uint8)
    count = pixels.shape[0]
    logger.info(f"Loaded {count} CIFAR-{variant.value[1:]} images from {len(paths)} file(s)")
    return Dataset(
        images=pixels.reshape(count, 3, 32, 32).astype(np.float32) / np.float32(255),
        labels=np.concatenate(labels).astype(np.int64) if labels else np.zeros(0, dtype=np.int64),
        class_count=10 if variant is CifarVariant.C10 else 100,
        split=split,
    )


def _first_existing(data_dir: Path, name: str) -> Path:
    for candidate in (data_dir / name, data_dir / f"{name}.gz"):
        if candidate.exists():
            return candidate
    raise DataFormatError(f"missing {name}[.gz]", str(data_dir))


def load_dataset(name: DatasetName, data_dir: Union[str, Path], split: Split) -> Dataset:
    """Load a split from the standard file names inside `data_dir`."""
    data_dir = Path(data_dir)
    name, split = DatasetName(name), Split(split)
    if name is DatasetName.MNIST:
        image_name, label_name = MNIST_FILES[split.value]
        return load_mnist(_first_existing(data_dir, image_name), _first_existing(data_dir, label_name), split)
    if name is DatasetName.CIFAR10:
        paths = [_first_existing(data_dir, f) for f in CIFAR10_FILES[split.value]]
        return load_cifar(paths, CifarVariant.C10, split)
    paths = [_first_existing(data_dir, f) for f in CIFAR100_FILES[split.value]]
    return load_cifar(paths, CifarVariant.C100, split)


def flip_mask(count: int, prob: float, rng: np.random.Generator) -> np.ndarray:
    if not 0 <= prob <= 1:
        raise ConfigError(f"flip probability must be in [0, 1], got {prob}")
    return rng.random(count) < prob


def augment_flip(batch: np.ndarray, prob: float, rng: np.random.Generator) -> np.ndarray:
    """Mirror each sample horizontally with probability `prob`."""
    mask = flip_mask(batch.shape[0], prob, rng)
    if not mask.any():
        return batch
    out = batch.copy()
    out[mask] = out[mask][:, :, :, ::-1]
    return out


def normalize(ds: Dataset, scheme: NormalizeScheme, train_mean: Optional[List[float]] = None) -> Dataset:
    """Scale255 keeps the load-time [0, 1] scaling.

    MeanSubtract removes the per-channel mean: computed from `ds` on the training split,
    taken from `train_mean` on the test split. The mean already removed from `ds` is
    tracked in `channel_mean`, so a second pass only subtracts the residual and keeps
    the recorded training mean.
    """
    scheme = NormalizeScheme(scheme)
    if scheme is NormalizeScheme.SCALE255:
        return ds

    channels = ds.images.shape[1]
    removed = np.zeros(channels) if ds.channel_mean is None else np.asarray(ds.channel_mean, dtype=np.float64)
    if removed.shape != (channels,):
        raise ConfigError(f"recorded mean has {removed.shape[0]} channels, images have {channels}")
    if ds.split is Split.TRAIN and train_mean is None:
        residual = ds.images.mean(axis=(0, 2, 3), dtype=np.float64)
        mean = removed + residual
    elif train_mean is not None:
        mean = np.asarray(train_mean, dtype=np.float64)
        if mean.shape != (channels,):
            raise ConfigError(f"mean has {mean.shape[0]} channels, images have {channels}")
        residual = mean - removed
    else:
        raise ConfigError("mean subtraction on the test split needs the stored training mean")

    images = (ds.images - residual.astype(ds.images.dtype)[None, :, None, None]).astype(ds.images.dtype)
    return ds.model_copy(update={"images": images, "channel_mean": [float(m) for m in mean]})
