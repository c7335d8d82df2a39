"""Tests for the dataset readers, synthetic blobs and subsets."""

import gzip
import logging
import struct
from pathlib import Path

import numpy as np
import pytest
from scipy import linalg

from pfmsoft.minformer.data import (
    CIFAR_RECORD,
    MNIST_FILES,
    DataConfig,
    Dataset,
    load_cifar10,
    load_mnist,
    load_named,
    load_split,
    mnist_paths,
    save_cifar10,
    save_mnist,
    subset,
    synthetic,
)
from pfmsoft.minformer.errors import ConfigError, DataFormatError

logger = logging.getLogger(__name__)


def _write_idx(directory: Path, pixels: bytes, labels: bytes, count: int, rows: int, cols: int) -> tuple[Path, Path]:
    directory.mkdir(parents=True, exist_ok=True)
    images_path = directory / "images-idx3-ubyte"
    labels_path = directory / "labels-idx1-ubyte"
    images_path.write_bytes(struct.pack(">IIII", 0x803, count, rows, cols) + pixels)
    labels_path.write_bytes(struct.pack(">II", 0x801, count) + labels)
    return images_path, labels_path


def test_mnist_reader_byte_by_byte(test_output_dir: Path):
    images_path, labels_path = _write_idx(
        test_output_dir / "test_data" / "idx", bytes([0, 255, 51, 102, 1, 2, 3, 4]), bytes([7, 3]), 2, 2, 2
    )
    ds = load_mnist(images_path, labels_path)
    assert ds.images.shape == (2, 2, 2, 1)
    assert ds.images[0, :, :, 0].tolist() == [[0.0, 1.0], [0.2, 0.4]]
    assert ds.images[1, 1, 1, 0] == pytest.approx(4 / 255)
    assert ds.labels.tolist() == [7, 3]
    assert ds.classes == 10


def test_mnist_reader_rejects_bad_magic(test_output_dir: Path):
    directory = test_output_dir / "test_data" / "bad_magic"
    images_path, labels_path = _write_idx(directory, bytes(4), bytes([1]), 1, 2, 2)
    images_path.write_bytes(struct.pack(">IIII", 0x801, 1, 2, 2) + bytes(4))
    with pytest.raises(DataFormatError, match="magic"):
        load_mnist(images_path, labels_path)


def test_mnist_reader_rejects_truncation(test_output_dir: Path):
    images_path, labels_path = _write_idx(test_output_dir / "test_data" / "short", bytes(7), bytes([1, 2]), 2, 2, 2)
    with pytest.raises(DataFormatError, match="pixel bytes"):
        load_mnist(images_path, labels_path)


def test_mnist_reader_rejects_count_mismatch(test_output_dir: Path):
    directory = test_output_dir / "test_data" / "mismatch"
    images_path, labels_path = _write_idx(directory, bytes(8), bytes([1, 2]), 2, 2, 2)
    labels_path.write_bytes(struct.pack(">II", 0x801, 3) + bytes([1, 2, 3]))
    with pytest.raises(DataFormatError, match="labels"):
        load_mnist(images_path, labels_path)


def test_mnist_gzip_sibling_is_found(test_output_dir: Path):
    directory = test_output_dir / "test_data" / "gz"
    directory.mkdir(parents=True, exist_ok=True)
    images_name, labels_name = MNIST_FILES["test"]
    images = struct.pack(">IIII", 0x803, 1, 2, 2) + bytes([10, 20, 30, 40])
    labels = struct.pack(">II", 0x801, 1) + bytes([5])
    (directory / f"{images_name}.gz").write_bytes(gzip.compress(images))
    (directory / f"{labels_name}.gz").write_bytes(gzip.compress(labels))
    paths = mnist_paths(directory, "test")
    assert all(p.suffix == ".gz" for p in paths)
    ds = load_mnist(*paths)
    assert ds.labels.tolist() == [5]
    assert ds.images.ravel().tolist() == pytest.approx([10 / 255, 20 / 255, 30 / 255, 40 / 255])


def test_mnist_writer_round_trip(test_output_dir: Path):
    directory = test_output_dir / "test_data" / "written"
    ds = synthetic(3, 4, image_shape=(4, 4, 1), seed=2)
    quantized = Dataset(np.rint(ds.images * 255) / 255, ds.labels, ds.classes)
    save_mnist(quantized, directory / "i", directory / "l", overwrite=True)
    loaded = load_mnist(directory / "i", directory / "l")
    assert np.array_equal(loaded.labels, ds.labels)
    assert np.allclose(loaded.images, quantized.images, atol=1e-12)


def test_cifar_single_record(test_output_dir: Path):
    """One record: label byte, then red, green and blue planes in row-major order."""
    record = np.zeros(CIFAR_RECORD, dtype=np.uint8)
    record[0] = 9
    red, green, blue = 1, 1 + 1024, 1 + 2048
    record[red] = 255
    record[green + 33] = 51
    record[blue + 1023] = 102
    path = test_output_dir / "test_data" / "cifar" / "one.bin"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(record.tobytes())
    ds = load_cifar10([path])
    assert ds.images.shape == (1, 32, 32, 3)
    assert ds.labels.tolist() == [9]
    assert ds.images[0, 0, 0].tolist() == [1.0, 0.0, 0.0]
    assert ds.images[0, 1, 1, 1] == pytest.approx(0.2)
    assert ds.images[0, 31, 31, 2] == pytest.approx(0.4)


def test_cifar_rejects_partial_records(test_output_dir: Path):
    path = test_output_dir / "test_data" / "cifar" / "partial.bin"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(bytes(CIFAR_RECORD + 10))
    with pytest.raises(DataFormatError, match="multiple"):
        load_cifar10([path])
    path.write_bytes(bytes(CIFAR_RECORD))
    with pytest.raises(DataFormatError, match="expected 2 records"):
        load_cifar10([path], expected_records=2)


def test_cifar_writer_round_trip(test_output_dir: Path):
    ds = synthetic(10, 1, image_shape=(32, 32, 3), seed=4)
    path = test_output_dir / "test_data" / "cifar" / "written.bin"
    save_cifar10(ds, path, overwrite=True)
    loaded = load_cifar10([path])
    assert np.array_equal(loaded.labels, ds.labels)
    assert np.allclose(loaded.images, ds.images, atol=0.5 / 255)


def test_dataset_validation():
    with pytest.raises(DataFormatError, match="labels outside"):
        Dataset(np.zeros((2, 2, 2, 1)), np.array([0, 3]), classes=3)
    with pytest.raises(DataFormatError, match=r"\[0, 1\]"):
        Dataset(np.full((1, 2, 2, 1), 1.5), np.array([0]), classes=1)
    with pytest.raises(DataFormatError):
        Dataset(np.zeros((2, 2, 2)), np.array([0, 0]), classes=1)


def test_synthetic_is_balanced_and_seeded():
    a = synthetic(5, 12, seed=7)
    b = synthetic(5, 12, seed=7)
    c = synthetic(5, 12, seed=8)
    assert len(a) == 60
    assert a.class_counts().tolist() == [12] * 5
    assert np.array_equal(a.images, b.images)
    assert np.array_equal(a.labels, b.labels)
    assert not np.array_equal(a.images, c.images)
    assert a.images.min() >= 0.0
    assert a.images.max() <= 1.0


def test_synthetic_is_linearly_separable():
    """A least-squares linear classifier separates the blob classes perfectly."""
    ds = synthetic(4, 50, image_shape=(8, 8, 1), seed=0)
    features = np.concatenate([ds.images.reshape(len(ds), -1), np.ones((len(ds), 1))], axis=1)
    targets = np.eye(ds.classes)[ds.labels]
    weights, *_ = linalg.lstsq(features, targets)
    predicted = np.argmax(features @ weights, axis=1)
    assert np.mean(predicted == ds.labels) == 1.0


def test_synthetic_validation():
    with pytest.raises(ConfigError):
        synthetic(0, 3)


def test_subset_is_proportional():
    labels = np.array([0] * 5 + [1] * 3 + [2] * 2)
    ds = Dataset(np.zeros((10, 1, 1, 1)), labels, classes=3)
    small = subset(ds, 5)
    assert small.class_counts().tolist() == [3, 1, 1]
    assert subset(ds, 0).class_counts().tolist() == [0, 0, 0]
    assert len(subset(ds, 10)) == 10


def test_subset_within_one_of_proportional():
    ds = synthetic(10, 30, image_shape=(2, 2, 1), seed=3)
    for n in (7, 55, 123, 299):
        counts = subset(ds, n, seed=1).class_counts()
        assert counts.sum() == n
        assert np.all(np.abs(counts - n / 10) <= 1)


def test_subset_seed():
    ds = synthetic(4, 50, image_shape=(2, 2, 1), seed=3)
    first = subset(ds, 40, seed=5)
    assert np.array_equal(first.images, subset(ds, 40, seed=5).images)
    assert not np.array_equal(first.images, subset(ds, 40, seed=6).images)


def test_subset_too_large():
    with pytest.raises(ConfigError):
        subset(synthetic(2, 3), 7)


def test_missing_mnist_names_the_file(test_output_dir: Path):
    directory = test_output_dir / "test_data" / "empty"
    directory.mkdir(parents=True, exist_ok=True)
    with pytest.raises(FileNotFoundError, match="train-images-idx3-ubyte"):
        load_split(DataConfig(dataset="mnist", dir=str(directory)), "train")


def test_missing_cifar_names_the_file(test_output_dir: Path):
    directory = test_output_dir / "test_data" / "empty"
    directory.mkdir(parents=True, exist_ok=True)
    with pytest.raises(FileNotFoundError, match="test_batch.bin"):
        load_split(DataConfig(dataset="cifar10", dir=str(directory)), "test")


def test_load_named_synthetic_ignores_data_dir(test_output_dir: Path):
    train = load_named("synthetic", "train", test_output_dir / "nowhere")
    assert train.images.shape == (1000, 28, 28, 1)
    assert train.name == "synthetic"
    assert not np.array_equal(train.images[:1], load_named("synthetic", "test", Path(".")).images[:1])


def test_load_named_checks_official_sizes(test_output_dir: Path):
    directory = test_output_dir / "test_data" / "named"
    directory.mkdir(parents=True, exist_ok=True)
    images_name, labels_name = MNIST_FILES["test"]
    (directory / images_name).write_bytes(struct.pack(">IIII", 0x803, 1, 2, 2) + bytes(4))
    (directory / labels_name).write_bytes(struct.pack(">II", 0x801, 1) + bytes([5]))
    with pytest.raises(DataFormatError, match="10000"):
        load_named("mnist", "test", directory)


def test_load_named_unknown():
    with pytest.raises(ConfigError, match="unknown dataset"):
        load_named("imagenet", "train", Path("."))


def test_load_split_synthetic_sizes():
    config = DataConfig(dataset="synthetic", per_class=10, train_size=12)
    train = load_split(config, "train", image_shape=(4, 4, 1), classes=3)
    val = load_split(config, "test", image_shape=(4, 4, 1), classes=3)
    assert len(train) == 12
    assert len(val) == 30
    assert not np.array_equal(train.images[:1], val.images[:1])


@pytest.mark.slow
def test_official_mnist_sizes(mnist_dir: Path):
    train = load_split(DataConfig(dataset="mnist", dir=str(mnist_dir)), "train")
    test = load_split(DataConfig(dataset="mnist", dir=str(mnist_dir)), "test")
    assert train.images.shape == (60_000, 28, 28, 1)
    assert len(test) == 10_000
    assert sorted(np.unique(train.labels).tolist()) == list(range(10))
