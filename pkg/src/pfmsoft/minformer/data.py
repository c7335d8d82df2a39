"""Image datasets: MNIST IDX and CIFAR-10 binary files, synthetic blobs, subsets.

All images are float arrays ``[K, H, W, C]`` scaled into ``[0, 1]`` by
1/255; no mean/std standardization is applied. Files are read fully into
memory and the library never downloads anything.
"""

import gzip
import logging
import struct
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np
import numpy.typing as npt

from pfmsoft.minformer.errors import ConfigError, DataFormatError
from pfmsoft.minformer.serializer import check_file
from pfmsoft.minformer.tensor import Tensor

logger = logging.getLogger(__name__)

MNIST_IMAGE_MAGIC = 0x00000803
MNIST_LABEL_MAGIC = 0x00000801
MNIST_SIZES = {"train": 60_000, "test": 10_000}
MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}

CIFAR_SIDE = 32
CIFAR_CHANNELS = 3
CIFAR_RECORD = 1 + CIFAR_SIDE * CIFAR_SIDE * CIFAR_CHANNELS
CIFAR_BATCH_RECORDS = 10_000
CIFAR_SIZES = {"train": 50_000, "test": 10_000}
CIFAR_DIR = "cifar-10-batches-bin"
CIFAR_FILES = {
    "train": tuple(f"data_batch_{i}.bin" for i in range(1, 6)),
    "test": ("test_batch.bin",),
}
CIFAR_CLASS_NAMES = (
    "airplane",
    "automobile",
    "bird",
    "cat",
    "deer",
    "dog",
    "frog",
    "horse",
    "ship",
    "truck",
)

Split = Literal["train", "test"]


@dataclass(frozen=True)
class DataConfig:
    """The ``data.*`` section of an experiment config.

    ``train_size`` / ``val_size`` of 0 keep the full split; otherwise a
    stratified subset of that size is drawn with ``seed``.
    """

    dataset: Literal["mnist", "cifar10", "synthetic"] = "mnist"
    dir: str = "data"
    train_size: int = 0
    val_size: int = 0
    per_class: int = 50
    snr: float = 10.0
    seed: int = 0


@dataclass(frozen=True, eq=False)
class Dataset:
    """Labeled images ``[K, H, W, C]`` in ``[0, 1]`` with labels in ``[0, classes)``."""

    images: Tensor
    labels: npt.NDArray[np.int64]
    classes: int
    name: str = ""
    split: str = "train"

    def __post_init__(self) -> None:
        if self.images.ndim != 4:
            raise DataFormatError(f"{self.name}: images must be [K, H, W, C], got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise DataFormatError(
                f"{self.name}: {self.labels.shape[0]} labels for {self.images.shape[0]} images"
            )
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise DataFormatError(f"{self.name}: labels outside [0, {self.classes})")
        if not np.all(np.isfinite(self.images)) or self.images.min(initial=0.0) < 0 or self.images.max(initial=0.0) > 1:
            raise DataFormatError(f"{self.name}: pixel values must be finite and in [0, 1]")

    def __len__(self) -> int:
        return int(self.images.shape[0])

    @property
    def image_shape(self) -> tuple[int, int, int]:
        _, h, w, c = self.images.shape
        return (h, w, c)

    def class_counts(self) -> npt.NDArray[np.int64]:
        return np.bincount(self.labels, minlength=self.classes)

    def take(self, indices: npt.NDArray[np.intp]) -> "Dataset":
        return Dataset(self.images[indices], self.labels[indices], self.classes, self.name, self.split)


def _read_bytes(path: Path) -> bytes:
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as file:
            return file.read()
    return path.read_bytes()


def _resolve(path: Path) -> Path:
    """``path`` itself, or its ``.gz`` sibling when only that exists."""
    if not path.exists() and path.with_name(path.name + ".gz").exists():
        return path.with_name(path.name + ".gz")
    return path


def load_mnist(images_path: Path, labels_path: Path, name: str = "mnist", split: str = "train") -> Dataset:
    """Parse a pair of big-endian IDX files (optionally gzip compressed).

    Raises:
        DataFormatError: On a bad magic, truncated data, or differing counts.
        OSError: If a file cannot be read.
    """
    image_bytes = _read_bytes(images_path)
    if len(image_bytes) < 16:
        raise DataFormatError(f"{images_path}: truncated IDX header")
    magic, count, rows, cols = struct.unpack(">IIII", image_bytes[:16])
    if magic != MNIST_IMAGE_MAGIC:
        raise DataFormatError(f"{images_path}: bad image magic 0x{magic:08x}")
    if len(image_bytes) - 16 != count * rows * cols:
        raise DataFormatError(
            f"{images_path}: expected {count * rows * cols} pixel bytes, found {len(image_bytes) - 16}"
        )

    label_bytes = _read_bytes(labels_path)
    if len(label_bytes) < 8:
        raise DataFormatError(f"{labels_path}: truncated IDX header")
    magic, label_count = struct.unpack(">II", label_bytes[:8])
    if magic != MNIST_LABEL_MAGIC:
        raise DataFormatError(f"{labels_path}: bad label magic 0x{magic:08x}")
    if len(label_bytes) - 8 != label_count:
        raise DataFormatError(f"{labels_path}: expected {label_count} label bytes, found {len(label_bytes) - 8}")
    if label_count != count:
        raise DataFormatError(f"{images_path} holds {count} images but {labels_path} holds {label_count} labels")

    pixels = np.frombuffer(image_bytes, dtype=np.uint8, offset=16).reshape(count, rows, cols, 1)
    labels = np.frombuffer(label_bytes, dtype=np.uint8, offset=8).astype(np.int64)
    logger.debug("read %d MNIST images from %s", count, images_path)
    return Dataset(pixels / 255.0, labels, classes=10, name=name, split=split)


def _to_bytes(images: Tensor) -> npt.NDArray[np.uint8]:
    return np.rint(images * 255.0).astype(np.uint8)


def save_mnist(ds: Dataset, images_path: Path, labels_path: Path, overwrite: bool = False) -> None:
    """Write a single-channel dataset as IDX image and label files."""
    k, h, w, c = ds.images.shape
    if c != 1:
        raise DataFormatError(f"IDX images are single channel, got {c} channels")
    for path in (images_path, labels_path):
        check_file(path, overwrite)
        path.parent.mkdir(exist_ok=True, parents=True)
    images_path.write_bytes(struct.pack(">IIII", MNIST_IMAGE_MAGIC, k, h, w) + _to_bytes(ds.images).tobytes())
    labels_path.write_bytes(struct.pack(">II", MNIST_LABEL_MAGIC, k) + ds.labels.astype(np.uint8).tobytes())


def load_cifar10(
    batch_paths: Sequence[Path],
    expected_records: int | None = None,
    name: str = "cifar10",
    split: str = "train",
) -> Dataset:
    """Parse CIFAR-10 binary batches of 3073-byte records.

    Args:
        batch_paths: Batch files, concatenated in the given order.
        expected_records: Records each file must hold, when known.
        name: Dataset name.
        split: Split tag.

    Raises:
        DataFormatError: On a file length that is not whole records, or a
            record count differing from ``expected_records``.
    """
    labels: list[npt.NDArray[np.int64]] = []
    images: list[npt.NDArray[np.uint8]] = []
    for path in batch_paths:
        blob = path.read_bytes()
        if len(blob) % CIFAR_RECORD:
            raise DataFormatError(f"{path}: length {len(blob)} is not a multiple of {CIFAR_RECORD}")
        records = np.frombuffer(blob, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        if expected_records is not None and records.shape[0] != expected_records:
            raise DataFormatError(f"{path}: expected {expected_records} records, found {records.shape[0]}")
        labels.append(records[:, 0].astype(np.int64))
        planes = records[:, 1:].reshape(-1, CIFAR_CHANNELS, CIFAR_SIDE, CIFAR_SIDE)
        images.append(planes.transpose(0, 2, 3, 1))
        logger.debug("read %d CIFAR-10 records from %s", records.shape[0], path)
    if not images:
        raise DataFormatError("no CIFAR-10 batch files given")
    return Dataset(np.concatenate(images) / 255.0, np.concatenate(labels), classes=10, name=name, split=split)


def save_cifar10(ds: Dataset, path: Path, overwrite: bool = False) -> None:
    """Write a 32x32x3 dataset as one CIFAR-10 binary batch."""
    if ds.image_shape != (CIFAR_SIDE, CIFAR_SIDE, CIFAR_CHANNELS):
        raise DataFormatError(f"CIFAR-10 records are 32x32x3, got {ds.image_shape}")
    check_file(path, overwrite)
    path.parent.mkdir(exist_ok=True, parents=True)
    planes = _to_bytes(ds.images).transpose(0, 3, 1, 2).reshape(len(ds), -1)
    records = np.concatenate([ds.labels.astype(np.uint8)[:, None], planes], axis=1)
    path.write_bytes(records.tobytes())


def synthetic(
    classes: int,
    per_class: int,
    image_shape: tuple[int, int, int] = (8, 8, 1),
    seed: int = 0,
    snr: float = 10.0,
    split: str = "train",
) -> Dataset:
    """Class-conditional Gaussian-blob images.

    Class ``c`` places a bright blob at its own spot on a circle around the
    image centre; pixel noise has standard deviation ``0.5 / snr``.

    Args:
        classes: Number of classes M.
        per_class: Images per class k.
        image_shape: ``(H, W, C)``.
        seed: Generator seed; equal seeds give identical datasets.
        snr: Signal-to-noise ratio of the blob over the pixel noise.
        split: Split tag.
    """
    if classes < 1 or per_class < 1:
        raise ConfigError(f"synthetic needs classes >= 1 and per_class >= 1, got {classes}, {per_class}")
    h, w, c = image_shape
    rng = np.random.default_rng(seed)
    rows, cols = np.mgrid[0:h, 0:w]
    sigma = max(h, w) / 6.0
    radius = min(h, w) / 4.0
    angles = 2.0 * np.pi * np.arange(classes) / classes
    centers = np.stack([(h - 1) / 2 + radius * np.sin(angles), (w - 1) / 2 + radius * np.cos(angles)], axis=1)
    blobs = np.exp(
        -((rows[None] - centers[:, 0, None, None]) ** 2 + (cols[None] - centers[:, 1, None, None]) ** 2)
        / (2.0 * sigma**2)
    )
    labels = rng.permutation(np.repeat(np.arange(classes), per_class))
    noise = rng.normal(0.0, 0.5 / snr, size=(labels.size, h, w, c))
    images = np.clip(0.25 + 0.5 * blobs[labels][..., None] + noise, 0.0, 1.0)
    return Dataset(images, labels.astype(np.int64), classes=classes, name="synthetic", split=split)


def subset(ds: Dataset, n: int, seed: int = 0) -> Dataset:
    """Stratified sample of ``n`` examples preserving class proportions.

    Each class receives ``floor(n * count / K)`` examples plus one more for
    the classes with the largest remainders, so every class share is within
    one example of proportional. Selected examples keep their original order.

    Raises:
        ConfigError: If ``n`` exceeds the dataset size.
    """
    total = len(ds)
    if not 0 <= n <= total:
        raise ConfigError(f"cannot take a subset of {n} from {total} examples")
    counts = ds.class_counts()
    exact = counts * n / total
    take = np.floor(exact).astype(np.int64)
    short = n - int(take.sum())
    # Largest remainder first, lowest class index on ties.
    order = sorted(range(ds.classes), key=lambda k: (-(exact[k] - take[k]), k))
    for k in order[:short]:
        take[k] += 1
    rng = np.random.default_rng(seed)
    chosen = [
        rng.choice(np.flatnonzero(ds.labels == k), size=int(take[k]), replace=False)
        for k in range(ds.classes)
        if take[k]
    ]
    indices = np.sort(np.concatenate(chosen)) if chosen else np.empty(0, dtype=np.intp)
    return ds.take(indices)


def mnist_paths(data_dir: Path, split: Split) -> tuple[Path, Path]:
    images, labels = MNIST_FILES[split]
    return _resolve(data_dir / images), _resolve(data_dir / labels)


def cifar10_paths(data_dir: Path, split: Split) -> list[Path]:
    base = data_dir / CIFAR_DIR if (data_dir / CIFAR_DIR).is_dir() else data_dir
    return [base / name for name in CIFAR_FILES[split]]


def load_named(name: str, split: Split, data_dir: Path) -> Dataset:
    """Load a dataset split by name from its standard file names under ``data_dir``.

    ``synthetic`` gives the default blob set (10 classes of 28x28 images,
    seeded by split) and ignores ``data_dir``.

    Raises:
        ConfigError: For an unknown name.
        FileNotFoundError: Naming the first missing dataset file.
        DataFormatError: When official files hold the wrong number of examples.
    """
    match name:
        case "mnist":
            paths = mnist_paths(data_dir, split)
            _require(paths)
            ds = load_mnist(*paths, name="mnist", split=split)
            if len(ds) != MNIST_SIZES[split]:
                raise DataFormatError(f"MNIST {split} must hold {MNIST_SIZES[split]} images, found {len(ds)}")
            return ds
        case "cifar10":
            cifar = cifar10_paths(data_dir, split)
            _require(cifar)
            return load_cifar10(cifar, expected_records=CIFAR_BATCH_RECORDS, name="cifar10", split=split)
        case "synthetic":
            return synthetic(10, 100, (28, 28, 1), seed=0 if split == "train" else 1, split=split)
    raise ConfigError(f"unknown dataset {name!r}, expected mnist, cifar10 or synthetic")


def load_split(
    config: DataConfig,
    split: Split,
    image_shape: tuple[int, int, int] = (28, 28, 1),
    classes: int = 10,
) -> Dataset:
    """Load the configured dataset's split, reduced to the configured size.

    Official files must hold exactly their published number of examples.

    Args:
        config: The data section.
        split: ``train`` or ``test`` (the test split serves as validation).
        image_shape: Image shape for synthetic data.
        classes: Class count for synthetic data.

    Raises:
        FileNotFoundError: Naming the first missing dataset file.
    """
    if config.dataset == "synthetic":
        seed = config.seed if split == "train" else config.seed + 1
        ds = synthetic(classes, config.per_class, image_shape, seed=seed, snr=config.snr, split=split)
    else:
        ds = load_named(config.dataset, split, Path(config.dir))
    size = config.train_size if split == "train" else config.val_size
    if size:
        ds = subset(ds, size, seed=config.seed)
    logger.info("loaded %s/%s: %d examples", ds.name, split, len(ds))
    return ds


def _require(paths: Sequence[Path]) -> None:
    for path in paths:
        if not path.is_file():
            raise FileNotFoundError(f"dataset file not found: {path}")
