"""IDX-format image/label files (the MNIST container format).

Big-endian headers: magic 0x00000803 (2051) for 3-D image files, 0x00000801
(2049) for 1-D label files.  Pixels are scaled to [0, 1] by dividing by 255;
images are flattened to length-784 rows for the fully connected pipelines or
kept as 28 x 28 x 1 tensors for the convolutional ones.  ``.gz`` files are
decompressed transparently.
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

__all__ = ["IdxDataset", "IdxFormatError", "load_idx", "data_dir",
           "find_mnist", "MNIST_FILES", "DATA_DIR_ENV"]

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049
DATA_DIR_ENV = "RESNETSDE_DATA"

MNIST_FILES = {
    ("train", "images"): "train-images-idx3-ubyte",
    ("train", "labels"): "train-labels-idx1-ubyte",
    ("test", "images"): "t10k-images-idx3-ubyte",
    ("test", "labels"): "t10k-labels-idx1-ubyte",
}


class IdxFormatError(ValueError):
    pass


@dataclass(frozen=True)
class IdxDataset:
    """Images scaled to [0, 1] with integer labels."""

    images: np.ndarray  # (N, 784) flattened or (N, 28, 28, 1)
    labels: np.ndarray  # (N,) uint8

    def __len__(self) -> int:
        return self.labels.size


def _read_bytes(path) -> bytes:
    path = Path(path)
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as fh:
            return fh.read()
    return path.read_bytes()


def _parse_header(raw: bytes, expected_magic: int, n_dims: int, path) -> tuple:
    header_len = 4 * (1 + n_dims)
    if len(raw) < header_len:
        raise IdxFormatError(f"{path}: truncated header")
    fields = struct.unpack(f">{1 + n_dims}I", raw[:header_len])
    if fields[0] != expected_magic:
        raise IdxFormatError(
            f"{path}: bad magic {fields[0]} (expected {expected_magic})")
    return fields[1:], raw[header_len:]


def load_idx(images_path, labels_path, flatten: bool = True) -> IdxDataset:
    """Parse an image/label file pair; counts must match between the two."""
    raw = _read_bytes(images_path)
    (count, rows, cols), body = _parse_header(raw, IMAGE_MAGIC, 3, images_path)
    expected = count * rows * cols
    if len(body) < expected:
        raise IdxFormatError(f"{images_path}: truncated image data "
                             f"({len(body)} < {expected} bytes)")
    images = np.frombuffer(body[:expected], dtype=np.uint8)
    images = images.astype(np.float64) / 255.0

    raw = _read_bytes(labels_path)
    (label_count,), body = _parse_header(raw, LABEL_MAGIC, 1, labels_path)
    if label_count != count:
        raise IdxFormatError(f"count mismatch: {count} images vs "
                             f"{label_count} labels")
    if len(body) < label_count:
        raise IdxFormatError(f"{labels_path}: truncated label data")
    labels = np.frombuffer(body[:label_count], dtype=np.uint8).copy()

    if flatten:
        images = images.reshape(count, rows * cols)
    else:
        images = images.reshape(count, rows, cols, 1)
    return IdxDataset(images, labels)


def data_dir() -> Path:
    return Path(os.environ.get(DATA_DIR_ENV, "data"))


def find_mnist(split: str, base: Optional[Path] = None) -> Optional[tuple[Path, Path]]:
    """Locate the (images, labels) pair for a split, allowing .gz variants."""
    base = data_dir() if base is None else Path(base)
    paths = []
    for kind in ("images", "labels"):
        stem = base / MNIST_FILES[(split, kind)]
        if stem.exists():
            paths.append(stem)
        elif stem.with_suffix(stem.suffix + ".gz").exists():
            paths.append(stem.with_suffix(stem.suffix + ".gz"))
        else:
            return None
    return tuple(paths)
