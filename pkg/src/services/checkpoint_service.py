"""
Binary checkpoints, little-endian throughout:

    magic        8 bytes  b"GNPPNET1"
    version      u32
    arch_len     u32, then arch_len bytes of UTF-8 architecture text
    input shape  4 x u32 (1, c, h, w)
    seed         u64
    epoch        u32
    param_count  u32
    per parameter: shape 4 x u32, then prod(shape) f32 values
"""

import logging
import struct
from pathlib import Path
from typing import Union

import numpy as np

from ..core.exceptions import CheckpointError
from .arch_service import build_network, parse_arch
from .network_service import Network

logger = logging.getLogger(__name__)

MAGIC = b"GNPPNET1"
VERSION = 1


def _shape4(shape) -> tuple:
    return tuple(shape) + (1,) * (4 - len(shape))


def checkpoint_bytes(net: Network) -> bytes:
    arch_text = net.arch.source_text.encode("utf-8")
    params = net.params()
    parts = [
        MAGIC,
        struct.pack("<I", VERSION),
        struct.pack("<I", len(arch_text)),
        arch_text,
        struct.pack("<4I", *net.input_shape),
        struct.pack("<Q", net.seed),
        struct.pack("<I", net.epoch),
        struct.pack("<I", len(params)),
    ]
    for p in params:
        parts.append(struct.pack("<4I", *_shape4(p.shape)))
        parts.append(np.ascontiguousarray(p, dtype="<f4").tobytes())
    return b"".join(parts)


def checkpoint_save(net: Network, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(net))
    logger.info(f"Saved checkpoint to {path}")
    return path


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, size: int) -> bytes:
        if self.pos + size > len(self.data):
            raise CheckpointError(f"{self.path}: truncated checkpoint at byte {self.pos}")
        chunk = self.data[self.pos:self.pos + size]
        self.pos += size
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def checkpoint_load(path: Union[str, Path], dtype=np.float32) -> Network:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"{path}: checkpoint not found")
    reader = _Reader(path.read_bytes(), path)

    magic = reader.take(len(MAGIC))
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    (version,) = reader.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}, expected {VERSION}")
    (arch_len,) = reader.unpack("<I")
    arch_text = reader.take(arch_len).decode("utf-8")
    input_shape = reader.unpack("<4I")
    (seed,) = reader.unpack("<Q")
    (epoch,) = reader.unpack("<I")
    (count,) = reader.unpack("<I")

    # Strict placement is not re-checked: the saved net may come from an ablation run
    net = build_network(parse_arch(arch_text), input_shape, seed=seed, dtype=dtype, strict_placement=False)
    params = net.params()
    if count != len(params):
        raise CheckpointError(f"{path}: {count} parameter tensors, architecture needs {len(params)}")
    for p in params:
        shape = reader.unpack("<4I")
        if shape != _shape4(p.shape):
            raise CheckpointError(f"{path}: parameter shape {shape} does not match {_shape4(p.shape)}")
        values = np.frombuffer(reader.take(4 * p.size), dtype="<f4")
        p[...] = values.reshape(p.shape)
    if reader.pos != len(reader.data):
        raise CheckpointError(f"{path}: {len(reader.data) - reader.pos} trailing bytes")
    net.epoch = epoch
    return net
