"""
Tests for the IDX / CIFAR-10 readers, subsets and graymap export.
"""
import os
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

# Add src to path for internal imports
src_path = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), 'src')
if src_path not in sys.path:
    sys.path.insert(0, src_path)

from regen_snn.data.datasets import (
    Dataset,
    head,
    load_mnist,
    parse_cifar10,
    parse_idx_images,
    parse_idx_labels,
    read_cifar10,
    read_idx_images,
    read_idx_labels,
    take_subset,
)
from regen_snn.data.images import (
    read_pgm,
    rescale_counts,
    write_channels,
    write_grayscale_image,
    write_kernel_grid,
)
from regen_snn.engine.errors import (
    BadMagicError,
    DataFormatError,
    EmptyDatasetError,
    ExportError,
    LabelRangeError,
    RecordSizeError,
    TrailingBytesError,
    TruncatedPayloadError,
)
from tests.helpers import cifar_bytes, idx_images_bytes, idx_labels_bytes, write_gz


@pytest.fixture(scope="module")
def two_images():
    return np.arange(2 * 3 * 4, dtype=np.uint8).reshape(2, 3, 4)


@pytest.fixture(scope="module")
def cifar_records():
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, (3, 3, 32, 32)).astype(np.uint8)
    labels = np.array([4, 0, 9], dtype=np.uint8)
    return images, labels, cifar_bytes(images, labels)


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------

def test_idx_images_decode(two_images):
    images = parse_idx_images(idx_images_bytes(two_images))
    assert images.shape == (2, 3, 4)
    np.testing.assert_array_equal(images, two_images)


def test_idx_labels_decode():
    np.testing.assert_array_equal(parse_idx_labels(idx_labels_bytes([7, 0, 9])), [7, 0, 9])


def test_idx_errors(two_images):
    raw = idx_images_bytes(two_images)
    with pytest.raises(TruncatedPayloadError):
        parse_idx_images(raw[:-1])
    with pytest.raises(TruncatedPayloadError):
        parse_idx_images(raw[:10])
    with pytest.raises(TrailingBytesError):
        parse_idx_images(raw + b"\x00")
    with pytest.raises(BadMagicError):
        parse_idx_images(b"\x00\x00\x08\x01" + raw[4:])
    with pytest.raises(LabelRangeError):
        parse_idx_labels(idx_labels_bytes([1, 10, 2]))
    with pytest.raises(TrailingBytesError):
        parse_idx_labels(idx_labels_bytes([1, 2]) + b"\x03")


def test_every_truncation_is_reported(two_images):
    raw = idx_images_bytes(two_images)
    for cut in range(len(raw)):
        with pytest.raises(DataFormatError):
            parse_idx_images(raw[:cut])


def test_load_mnist_gzip(tmp_path, two_images):
    images = write_gz(tmp_path / "images.gz", idx_images_bytes(two_images))
    labels = write_gz(tmp_path / "labels.gz", idx_labels_bytes([3, 8]))
    dataset = load_mnist(images, labels)
    assert dataset.images.shape == (2, 1, 3, 4)
    assert dataset.geometry == (1, 3, 4)
    np.testing.assert_array_equal(dataset.labels, [3, 8])
    np.testing.assert_array_equal(dataset.ids, [0, 1])


def test_truncated_gzip_is_a_data_error(tmp_path, two_images):
    whole = write_gz(tmp_path / "whole.gz", idx_images_bytes(two_images)).read_bytes()
    for cut in (5, len(whole) // 2, len(whole) - 3):
        path = tmp_path / f"cut{cut}.gz"
        path.write_bytes(whole[:cut])
        with pytest.raises(TruncatedPayloadError):
            read_idx_images(path)


def test_corrupt_gzip_is_a_data_error(tmp_path, two_images):
    plain = tmp_path / "plain.gz"
    plain.write_bytes(idx_images_bytes(two_images))
    with pytest.raises(DataFormatError, match="gzip"):
        read_idx_images(plain)

    whole = bytearray(write_gz(tmp_path / "whole.gz", idx_images_bytes(two_images)).read_bytes())
    for i in range(10, len(whole) - 8):
        whole[i] ^= 0xFF
    mangled = tmp_path / "mangled.gz"
    mangled.write_bytes(bytes(whole))
    with pytest.raises(DataFormatError):
        read_idx_labels(mangled)



def test_read_uncompressed_idx(tmp_path, two_images):
    images = tmp_path / "images.idx"
    images.write_bytes(idx_images_bytes(two_images))
    labels = tmp_path / "labels.idx"
    labels.write_bytes(idx_labels_bytes([3, 8]))
    np.testing.assert_array_equal(read_idx_images(images), two_images)
    assert read_idx_labels(labels).tolist() == [3, 8]


# ---------------------------------------------------------------------------
# CIFAR-10
# ---------------------------------------------------------------------------

def test_cifar_planes(cifar_records):
    images, labels, raw = cifar_records
    dataset = parse_cifar10(raw)
    assert dataset.images.shape == (3, 3, 32, 32)
    np.testing.assert_array_equal(dataset.labels, labels)
    # second record, green plane, row 5 col 7
    assert dataset.images[1, 1, 5, 7] == raw[3073 + 1 + 1024 + 5 * 32 + 7]
    np.testing.assert_array_equal(dataset.images, images)


def test_cifar_record_size_off_by_one(cifar_records):
    _, _, raw = cifar_records
    with pytest.raises(RecordSizeError):
        parse_cifar10(raw[:-1])
    with pytest.raises(RecordSizeError):
        parse_cifar10(raw + b"\x00")


def test_cifar_label_range(cifar_records):
    _, _, raw = cifar_records
    bad = bytearray(raw)
    bad[3073] = 10
    with pytest.raises(LabelRangeError):
        parse_cifar10(bytes(bad))


def test_read_cifar_concatenates_batches(tmp_path, cifar_records):
    images, labels, raw = cifar_records
    first = tmp_path / "data_batch_1.bin"
    second = tmp_path / "data_batch_2.bin"
    first.write_bytes(raw)
    second.write_bytes(raw[:3073])
    dataset = read_cifar10([first, second])
    assert dataset.count == 4
    np.testing.assert_array_equal(dataset.labels, [4, 0, 9, 4])
    with pytest.raises(EmptyDatasetError):
        read_cifar10([])


# ---------------------------------------------------------------------------
# Mutation robustness
# ---------------------------------------------------------------------------

def _valid_buffers():
    rng = np.random.default_rng(7)
    images = rng.integers(0, 256, (3, 5, 5)).astype(np.uint8)
    cifar = rng.integers(0, 256, (2, 3, 32, 32)).astype(np.uint8)
    return {
        "idx_images": idx_images_bytes(images),
        "idx_labels": idx_labels_bytes([1, 2, 3]),
        "cifar": cifar_bytes(cifar, [1, 2]),
    }


_PARSERS = {
    "idx_images": parse_idx_images,
    "idx_labels": parse_idx_labels,
    "cifar": parse_cifar10,
}


@settings(max_examples=500, deadline=None)
@given(
    kind=st.sampled_from(sorted(_PARSERS)),
    data=st.data(),
)
def test_mutated_buffers_fail_with_typed_errors(kind, data):
    raw = bytearray(_valid_buffers()[kind])
    action = data.draw(st.sampled_from(["flip", "truncate", "extend", "header"]))
    if action == "flip":
        pos = data.draw(st.integers(min_value=0, max_value=len(raw) - 1))
        raw[pos] = data.draw(st.integers(min_value=0, max_value=255))
    elif action == "truncate":
        raw = raw[:data.draw(st.integers(min_value=0, max_value=len(raw) - 1))]
    elif action == "extend":
        raw += bytes(data.draw(st.integers(min_value=1, max_value=40)))
    else:
        pos = data.draw(st.integers(min_value=0, max_value=min(15, len(raw) - 1)))
        raw[pos] = data.draw(st.integers(min_value=0, max_value=255))
    try:
        _PARSERS[kind](bytes(raw))
    except DataFormatError:
        pass


# ---------------------------------------------------------------------------
# Subsets
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def ten_items():
    images = np.arange(10, dtype=np.uint8).reshape(10, 1, 1, 1).repeat(2, axis=2).repeat(2, axis=3)
    return Dataset(images=images, labels=np.arange(10, dtype=np.uint8) % 10)


def test_subset_is_a_seeded_permutation_prefix(ten_items):
    a = take_subset(ten_items, 4, seed=3)
    b = take_subset(ten_items, 4, seed=3)
    full = take_subset(ten_items, 10, seed=3)
    np.testing.assert_array_equal(a.ids, b.ids)
    np.testing.assert_array_equal(a.ids, full.ids[:4])
    np.testing.assert_array_equal(np.sort(full.ids), np.arange(10))
    np.testing.assert_array_equal(a.images[:, 0, 0, 0], a.ids)


def test_subset_bounds(ten_items):
    with pytest.raises(EmptyDatasetError):
        take_subset(ten_items, 0, seed=0)
    with pytest.raises(ValueError):
        take_subset(ten_items, 11, seed=0)


def test_head_keeps_file_order(ten_items):
    np.testing.assert_array_equal(head(ten_items, 3).ids, [0, 1, 2])
    assert head(ten_items, 50).count == 10


def test_dataset_rejects_misaligned_labels():
    with pytest.raises(DataFormatError):
        Dataset(images=np.zeros((3, 1, 2, 2), dtype=np.uint8), labels=np.zeros(2, dtype=np.uint8))


# ---------------------------------------------------------------------------
# Graymaps
# ---------------------------------------------------------------------------

def test_rescale_counts():
    np.testing.assert_array_equal(rescale_counts(np.zeros((2, 2))), np.zeros((2, 2), dtype=np.uint8))
    scaled = rescale_counts(np.array([[0, 5], [10, 20]]))
    assert scaled.max() == 255
    assert scaled[0, 0] == 0
    assert scaled[1, 0] == 128
    with pytest.raises(DataFormatError):
        rescale_counts(np.array([[-1, 2]]))


def test_graymap_round_trip(tmp_path):
    counts = np.array([[0, 1, 2], [3, 4, 12]])
    path = write_grayscale_image(counts, tmp_path / "counts.pgm")
    assert path.read_bytes().startswith(b"P5\n3 2\n255\n")
    np.testing.assert_array_equal(read_pgm(path), rescale_counts(counts))

    raw = np.array([[0, 17], [200, 255]], dtype=np.uint8)
    np.testing.assert_array_equal(read_pgm(write_grayscale_image(raw, tmp_path / "raw.pgm", rescale=False)), raw)


def test_all_zero_counts_write_black(tmp_path):
    path = write_grayscale_image(np.zeros((4, 4)), tmp_path / "black.pgm")
    assert not read_pgm(path).any()


def test_multichannel_writes_one_file_per_map(tmp_path):
    files = write_channels(np.ones((3, 4, 4)), tmp_path / "recon.pgm")
    assert [f.name for f in files] == ["recon_ch0.pgm", "recon_ch1.pgm", "recon_ch2.pgm"]
    assert write_channels(np.ones((1, 4, 4)), tmp_path / "single.pgm")[0].name == "single.pgm"


def test_kernel_grid_geometry(tmp_path):
    grid = read_pgm(write_kernel_grid(np.random.default_rng(0).normal(size=(12, 5, 5)), tmp_path / "k.pgm"))
    # 12 kernels tile as 3 rows x 4 cols of 5x5 with 1-pixel borders
    assert grid.shape == (3 * 6 + 1, 4 * 6 + 1)


def test_unwritable_graymap(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(ExportError):
        write_grayscale_image(np.ones((2, 2)), blocker / "sub" / "out.pgm")
