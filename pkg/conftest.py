"""
Shared fixtures: tiny synthetic datasets written in the real on-disk formats.
"""

import gzip
import struct
from pathlib import Path

import numpy as np
import pytest

from src.core.config import get_settings


def write_idx_images(path: Path, images: np.ndarray, compress: bool = False) -> Path:
    count, rows, cols = images.shape
    payload = struct.pack(">IIII", 0x00000803, count, rows, cols) + images.astype(np.uint8).tobytes()
    path.write_bytes(gzip.compress(payload) if compress else payload)
    return path


def write_idx_labels(path: Path, labels: np.ndarray, compress: bool = False) -> Path:
    payload = struct.pack(">II", 0x00000801, len(labels)) + labels.astype(np.uint8).tobytes()
    path.write_bytes(gzip.compress(payload) if compress else payload)
    return path


def synthetic_digits(count: int, seed: int):
    """Images whose brightest quadrant-ish stripe encodes the label, so a tiny net can learn something."""
    rng = np.random.default_rng(seed)
    labels = np.arange(count) % 10
    images = rng.integers(0, 40, size=(count, 28, 28))
    for i, label in enumerate(labels):
        images[i, 2 * label:2 * label + 6, 4:24] = 255
    return images.astype(np.uint8), labels.astype(np.uint8)


@pytest.fixture
def mnist_dir(tmp_path) -> Path:
    data_dir = tmp_path / "mnist"
    data_dir.mkdir()
    train_images, train_labels = synthetic_digits(60, seed=1)
    test_images, test_labels = synthetic_digits(20, seed=2)
    write_idx_images(data_dir / "train-images-idx3-ubyte", train_images)
    write_idx_labels(data_dir / "train-labels-idx1-ubyte", train_labels)
    write_idx_images(data_dir / "t10k-images-idx3-ubyte.gz", test_images, compress=True)
    write_idx_labels(data_dir / "t10k-labels-idx1-ubyte.gz", test_labels, compress=True)
    return data_dir


def cifar_records(labels, seed: int, fine: bool = False) -> bytes:
    rng = np.random.default_rng(seed)
    records = []
    for label in labels:
        head = bytes([label % 20, label]) if fine else bytes([label])
        records.append(head + rng.integers(0, 256, size=3 * 32 * 32, dtype=np.uint8).tobytes())
    return b"".join(records)


@pytest.fixture(autouse=True)
def isolated_settings(monkeypatch, tmp_path):
    """Keep GNPP_* variables from the developer's shell or .env out of the tests."""
    for name in ("GNPP_DATA_DIR", "GNPP_OUT_DIR", "GNPP_LOG_LEVEL", "GNPP_SEED"):
        monkeypatch.delenv(name, raising=False)
    monkeypatch.chdir(tmp_path)
    get_settings.cache_clear()
    yield
    get_settings.cache_clear()
