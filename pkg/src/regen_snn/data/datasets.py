"""
Dataset readers - MNIST IDX and CIFAR-10 binary batches.

IDX images (big-endian):
    [offset] [type]   [value]
    0000     u32      0x00000803 magic
    0004     u32      item count
    0008     u32      rows
    0012     u32      cols
    0016     u8[]     pixels, row-major
IDX labels (big-endian):
    0000     u32      0x00000801 magic
    0004     u32      item count
    0008     u8[]     labels 0..9
CIFAR-10 batch: records of 1 label byte + 3072 pixel bytes (R, G, B planes
of 1024 bytes each, row-major 32x32).

Files ending in .gz are decompressed transparently.
"""
import gzip
import logging
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Union

import numpy as np

from ..engine.errors import (
    BadMagicError,
    DataFormatError,
    EmptyDatasetError,
    LabelRangeError,
    RecordSizeError,
    TrailingBytesError,
    TruncatedPayloadError,
)
from ..engine.rng import RngStream

logger = logging.getLogger(__name__)

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32
CLASSES = 10

PathLike = Union[str, Path]


@dataclass(frozen=True)
class Dataset:
    """Images (N, C, H, W) uint8 with aligned labels (N,) uint8.

    `ids` are the item positions in the source file; subsets keep them so
    per-item seeds do not depend on how a subset was drawn.
    """
    images: np.ndarray
    labels: np.ndarray
    ids: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[1] not in (1, 3):
            raise DataFormatError(f"images must be (N, 1|3, H, W), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DataFormatError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.ids is None:
            object.__setattr__(self, "ids", np.arange(len(self.images), dtype=np.int64))
        elif len(self.ids) != len(self.images):
            raise DataFormatError(f"{len(self.ids)} ids for {len(self.images)} images")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def count(self) -> int:
        return len(self.images)

    @property
    def channels(self) -> int:
        return int(self.images.shape[1])

    @property
    def geometry(self) -> tuple[int, int, int]:
        _, c, h, w = self.images.shape
        return int(c), int(h), int(w)


def _read_bytes(path: PathLike) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    try:
        with opener(path, "rb") as f:
            return f.read()
    except EOFError as exc:
        raise TruncatedPayloadError(f"{path}: compressed stream ends early ({exc})") from exc
    except (gzip.BadGzipFile, zlib.error) as exc:
        raise DataFormatError(f"{path}: not a valid gzip stream ({exc})") from exc


def parse_idx_images(raw: bytes) -> np.ndarray:
    """Decode an IDX image buffer to (count, rows, cols) uint8."""
    if len(raw) < 16:
        raise TruncatedPayloadError(f"IDX image header needs 16 bytes, got {len(raw)}")
    magic, count, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IDX_IMAGE_MAGIC:
        raise BadMagicError(f"IDX image magic 0x{magic:08x}, expected 0x{IDX_IMAGE_MAGIC:08x}")
    if count and (rows == 0 or cols == 0):
        raise DataFormatError(f"IDX image dimensions must be positive, got {rows}x{cols}")
    expected = count * rows * cols
    payload = len(raw) - 16
    if payload < expected:
        raise TruncatedPayloadError(f"IDX header claims {count} images ({expected} bytes), payload has {payload}")
    if payload > expected:
        raise TrailingBytesError(f"IDX image payload has {payload - expected} bytes beyond {count} images")
    return np.frombuffer(raw, dtype=np.uint8, offset=16).reshape(count, rows, cols).copy()


def parse_idx_labels(raw: bytes, classes: int = CLASSES) -> np.ndarray:
    """Decode an IDX label buffer to (count,) uint8."""
    if len(raw) < 8:
        raise TruncatedPayloadError(f"IDX label header needs 8 bytes, got {len(raw)}")
    magic, count = struct.unpack(">II", raw[:8])
    if magic != IDX_LABEL_MAGIC:
        raise BadMagicError(f"IDX label magic 0x{magic:08x}, expected 0x{IDX_LABEL_MAGIC:08x}")
    payload = len(raw) - 8
    if payload < count:
        raise TruncatedPayloadError(f"IDX header claims {count} labels, payload has {payload}")
    if payload > count:
        raise TrailingBytesError(f"IDX label payload has {payload - count} bytes beyond {count} labels")
    labels = np.frombuffer(raw, dtype=np.uint8, offset=8).copy()
    if labels.size and labels.max() >= classes:
        bad = int(np.argmax(labels >= classes))
        raise LabelRangeError(f"label {labels[bad]} at index {bad} outside 0..{classes - 1}")
    return labels


def read_idx_images(path: PathLike) -> np.ndarray:
    images = parse_idx_images(_read_bytes(path))
    logger.info("Read %d IDX images of %dx%d from %s", *images.shape, path)
    return images


def read_idx_labels(path: PathLike) -> np.ndarray:
    labels = parse_idx_labels(_read_bytes(path))
    logger.info("Read %d IDX labels from %s", labels.size, path)
    return labels


def load_mnist(images_path: PathLike, labels_path: PathLike) -> Dataset:
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    return Dataset(images=images[:, np.newaxis], labels=labels)


def parse_cifar10(raw: bytes, classes: int = CLASSES) -> Dataset:
    """Decode one CIFAR-10 binary batch buffer."""
    if len(raw) % CIFAR_RECORD:
        raise RecordSizeError(f"CIFAR-10 batch of {len(raw)} bytes is not a multiple of {CIFAR_RECORD}")
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].copy()
    if labels.size and labels.max() >= classes:
        bad = int(np.argmax(labels >= classes))
        raise LabelRangeError(f"label {labels[bad]} at record {bad} outside 0..{classes - 1}")
    images = records[:, 1:].reshape(-1, 3, 32, 32).copy()
    return Dataset(images=images, labels=labels)


def read_cifar10(paths: Union[PathLike, Iterable[PathLike]]) -> Dataset:
    """Read and concatenate one or more CIFAR-10 batch files in order."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    parts = []
    for path in paths:
        part = parse_cifar10(_read_bytes(path))
        logger.info("Read %d CIFAR-10 records from %s", len(part), path)
        parts.append(part)
    if not parts:
        raise EmptyDatasetError("no CIFAR-10 batch files given")
    return Dataset(
        images=np.concatenate([p.images for p in parts]),
        labels=np.concatenate([p.labels for p in parts]),
    )


def take_subset(dataset: Dataset, n: int, seed: int) -> Dataset:
    """First n items of a seeded permutation of the dataset."""
    if n < 1:
        raise EmptyDatasetError(f"subset size must be at least 1, got {n}")
    if n > dataset.count:
        raise ValueError(f"subset size {n} exceeds the {dataset.count} available items")
    order = RngStream(seed).derive("shuffle").permutation(dataset.count)[:n]
    return Dataset(images=dataset.images[order], labels=dataset.labels[order], ids=dataset.ids[order])


def head(dataset: Dataset, n: int) -> Dataset:
    """First n items in file order (n larger than the set keeps everything)."""
    n = min(n, dataset.count)
    return Dataset(images=dataset.images[:n], labels=dataset.labels[:n], ids=dataset.ids[:n])
