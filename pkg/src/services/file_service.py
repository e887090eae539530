"""
Run artifacts on disk: run directories, config echo, seed files, CSV tables and PGM images.
"""

import json
import logging
import re
from pathlib import Path
from typing import Any, Dict, Union

import numpy as np
import pandas as pd

from ..core.exceptions import DataFormatError, ShapeError

logger = logging.getLogger(__name__)

CURVE_COLUMNS = ["epoch", "iteration", "lr", "train_loss", "test_error"]
# Six significant digits keep small learning rates and errors readable
FLOAT_FORMAT = "%.6g"
_PGM_HEADER = re.compile(rb"P5\s+(\d+)\s+(\d+)\s+255\s")


def run_dir(out_dir: Union[str, Path], seed: int) -> Path:
    """Create and return `<out_dir>/seed-<seed>`."""
    path = Path(out_dir) / f"seed-{seed}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_config_echo(path: Union[str, Path], config: Dict[str, Any]) -> Path:
    path = Path(path)
    path.write_text(json.dumps(config, indent=2, sort_keys=True, default=str) + "\n")
    return path


def write_seed(path: Union[str, Path], seed: int) -> Path:
    path = Path(path)
    path.write_text(f"{seed}\n")
    return path


def reset_csv(path: Union[str, Path], columns) -> Path:
    """Start a fresh CSV file holding only the header row."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(columns=columns).to_csv(path, index=False)
    return path


def append_csv_row(path: Union[str, Path], row: Dict[str, Any], columns) -> None:
    frame = pd.DataFrame([row], columns=columns)
    frame.to_csv(path, mode="a", header=False, index=False, float_format=FLOAT_FORMAT)


def write_table(path: Union[str, Path], table: pd.DataFrame) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    logger.info(f"Wrote {len(table)} rows to {path}")
    return path


def read_curves(path: Union[str, Path]) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise DataFormatError("curves file not found", str(path))
    table = pd.read_csv(path)
    missing = [c for c in CURVE_COLUMNS if c not in table.columns]
    if missing:
        raise DataFormatError(f"missing columns {missing}", str(path))
    return table


def write_pgm(path: Union[str, Path], image: np.ndarray) -> Path:
    """Binary PGM (P5) with maxval 255."""
    if image.ndim != 2:
        raise ShapeError(f"PGM images are 2-D, got shape {image.shape}")
    if image.dtype != np.uint8:
        raise ShapeError(f"PGM pixels must be uint8, got {image.dtype}")
    h, w = image.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(image).tobytes())
    logger.info(f"Wrote {w}x{h} heatmap to {path}")
    return path


def read_pgm(path: Union[str, Path]) -> np.ndarray:
    data = Path(path).read_bytes()
    header = _PGM_HEADER.match(data)
    if header is None:
        raise DataFormatError("not an 8-bit binary PGM", str(path))
    w, h = int(header.group(1)), int(header.group(2))
    pixels = data[header.end():]
    if len(pixels) != w * h:
        raise DataFormatError(f"{len(pixels)} pixel bytes, expected {w * h}", str(path))
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w)
