"""
Shared builders for the test suite: synthetic dataset files and dense
reference implementations of the convolutional operators.
"""
import gzip
import json
import struct
from pathlib import Path

import numpy as np


def idx_images_bytes(images: np.ndarray) -> bytes:
    images = np.asarray(images, dtype=np.uint8)
    count, rows, cols = images.shape
    return struct.pack(">IIII", 0x803, count, rows, cols) + images.tobytes()


def idx_labels_bytes(labels) -> bytes:
    labels = np.asarray(labels, dtype=np.uint8)
    return struct.pack(">II", 0x801, labels.size) + labels.tobytes()


def cifar_bytes(images: np.ndarray, labels) -> bytes:
    """images (N, 3, 32, 32) uint8 -> CIFAR-10 batch records."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    records = [bytes([int(label)]) + image.tobytes() for image, label in zip(images, labels)]
    return b"".join(records)


def write_gz(path: Path, payload: bytes) -> Path:
    with gzip.open(path, "wb") as f:
        f.write(payload)
    return path


def bar_images(count: int, size: int = 8, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Images with one bright vertical or horizontal bar; label 0/1 by orientation."""
    rng = np.random.default_rng(seed)
    images = np.zeros((count, size, size), dtype=np.uint8)
    labels = np.zeros(count, dtype=np.uint8)
    for n in range(count):
        pos = int(rng.integers(1, size - 1))
        if n % 2:
            images[n, pos, :] = 255
            labels[n] = 1
        else:
            images[n, :, pos] = 255
    return images, labels


def ring_image(size: int = 28, outer: float = 9.0, inner: float = 5.0) -> np.ndarray:
    """A zero-like digit: a full-intensity ring centred in the frame."""
    centre = (size - 1) / 2.0
    rows, cols = np.mgrid[:size, :size]
    radius = np.hypot(rows - centre, cols - centre)
    return np.where((radius >= inner) & (radius <= outer), 255, 0).astype(np.uint8)


def write_mnist_like(root: Path, train: int = 12, test: int = 6, size: int = 8) -> dict:
    """Gzipped IDX train/test files of bar images; returns the data block for a config."""
    root.mkdir(parents=True, exist_ok=True)
    train_x, train_y = bar_images(train, size, seed=1)
    test_x, test_y = bar_images(test, size, seed=2)
    return {
        "format": "mnist",
        "train_images": str(write_gz(root / "train-images-idx3-ubyte.gz", idx_images_bytes(train_x))),
        "train_labels": str(write_gz(root / "train-labels-idx1-ubyte.gz", idx_labels_bytes(train_y))),
        "test_images": str(write_gz(root / "t10k-images-idx3-ubyte.gz", idx_images_bytes(test_x))),
        "test_labels": str(write_gz(root / "t10k-labels-idx1-ubyte.gz", idx_labels_bytes(test_y))),
    }


def write_config(path: Path, **document) -> Path:
    path.write_text(json.dumps(document), encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# Dense references
# ---------------------------------------------------------------------------

def loop_correlate_valid(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    m, n = x.shape
    a, b = k.shape
    out = np.zeros((m - a + 1, n - b + 1))
    for i in range(out.shape[0]):
        for j in range(out.shape[1]):
            out[i, j] = np.sum(x[i:i + a, j:j + b] * k)
    return out


def synapse_map(in_shape: tuple[int, int, int], out_maps: int, kh: int, kw: int):
    """
    Explicit synapse table of a valid conv layer.

    Returns (hidden_shape, index) where index[j, i] is the flat index into
    the (K, L, kh, kw) kernel storage of the synapse from input neuron i to
    hidden neuron j, or -1 when there is no synapse.
    """
    maps, rows, cols = in_shape
    hidden_shape = (out_maps, rows - kh + 1, cols - kw + 1)
    n_in = maps * rows * cols
    n_hidden = int(np.prod(hidden_shape))
    index = np.full((n_hidden, n_in), -1, dtype=np.int64)
    for k in range(out_maps):
        for i in range(hidden_shape[1]):
            for j in range(hidden_shape[2]):
                post = np.ravel_multi_index((k, i, j), hidden_shape)
                for l in range(maps):
                    for a in range(kh):
                        for b in range(kw):
                            pre = np.ravel_multi_index((l, i + a, j + b), in_shape)
                            index[post, pre] = np.ravel_multi_index((k, l, a, b), (out_maps, maps, kh, kw))
    return hidden_shape, index


def dense_matrix(weights: np.ndarray, index: np.ndarray) -> np.ndarray:
    """Encoder synapse matrix (hidden x input) for the given kernel storage."""
    flat = weights.ravel()
    return np.where(index >= 0, flat[np.maximum(index, 0)], 0.0)


def fold_shared(per_synapse: np.ndarray, index: np.ndarray, size: int) -> np.ndarray:
    """Sum per-synapse values over every synapse that shares one kernel entry."""
    mask = index >= 0
    out = np.zeros(size)
    np.add.at(out, index[mask], per_synapse[mask])
    return out
