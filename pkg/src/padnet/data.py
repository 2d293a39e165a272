"""Dataset ingestion (IDX, CIFAR-10 binary) and the synthetic cluster task."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32


class DataFormatError(ValueError):
    """Malformed dataset file; ``offset`` is the byte position of the problem."""

    def __init__(self, path, offset: int, message: str):
        super().__init__(f"{path}: at byte offset {offset}: {message}")
        self.path = str(path)
        self.offset = offset


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        if len(self.inputs) == 0:
            raise ValueError("dataset is empty")
        if len(self.inputs) != len(self.labels):
            raise ValueError(f"{len(self.inputs)} inputs but {len(self.labels)} labels")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if not np.all(np.isfinite(self.inputs)):
            raise ValueError("inputs contain non-finite values")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return self.inputs.shape[1:]

    def subset(self, indices) -> Dataset:
        idx = np.asarray(indices)
        return Dataset(self.inputs[idx], self.labels[idx], self.num_classes, self.mean, self.std)

    def denormalize(self) -> np.ndarray:
        """Recover the raw 0..255 bytes of an image dataset."""
        shape = (1, -1) + (1,) * (self.inputs.ndim - 2)
        scaled = self.inputs * self.std.reshape(shape) + self.mean.reshape(shape)
        return np.rint(scaled * 255.0).astype(np.uint8)


def _open(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def read_idx(path) -> np.ndarray:
    """Parse an unsigned-byte IDX file (optionally gzipped) into an array."""
    raw = _open(path)
    if len(raw) < 4:
        raise DataFormatError(path, len(raw), "truncated before the 4-byte magic number")
    zero, dtype_code, ndim = raw[0:2], raw[2], raw[3]
    if zero != b"\x00\x00" or dtype_code != 0x08 or ndim == 0:
        magic = struct.unpack(">I", raw[:4])[0]
        raise DataFormatError(path, 0, f"bad magic 0x{magic:08x}; expected an unsigned-byte IDX header")
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise DataFormatError(path, len(raw), f"truncated inside the {ndim} dimension fields")
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    count = int(np.prod(dims))
    if len(raw) - header_end < count:
        raise DataFormatError(path, len(raw), f"truncated payload: need {count} bytes after offset {header_end}")
    if len(raw) - header_end > count:
        raise DataFormatError(path, header_end + count, "trailing bytes after payload")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header_end).reshape(dims)


def write_idx(path, array: np.ndarray, compress: bool | None = None) -> None:
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise ValueError("only unsigned-byte IDX files are supported")
    header = struct.pack(">BBBB", 0, 0, 0x08, array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    payload = header + np.ascontiguousarray(array).tobytes()
    path = Path(path)
    if compress is None:
        compress = path.suffix == ".gz"
    if compress:
        payload = gzip.compress(payload, mtime=0)
    path.write_bytes(payload)


def channel_stats(images01: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean/std of ``[N, C, H, W]`` images already scaled to [0, 1]."""
    axes = (0,) + tuple(range(2, images01.ndim))
    mean = images01.mean(axis=axes)
    std = images01.std(axis=axes)
    std = np.where(std > 0, std, 1.0)
    return mean, std


def _normalize(raw: np.ndarray, labels: np.ndarray, num_classes: int, stats) -> Dataset:
    x = raw.astype(np.float64) / 255.0
    mean, std = channel_stats(x) if stats is None else (np.asarray(stats[0]), np.asarray(stats[1]))
    shape = (1, -1) + (1,) * (x.ndim - 2)
    x = (x - mean.reshape(shape)) / std.reshape(shape)
    return Dataset(x, labels.astype(np.int64), num_classes, mean, std)


def load_idx(images_path, labels_path, stats=None, subset: int | None = None) -> Dataset:
    """IDX image/label pair -> normalised ``[N, 1, H, W]`` dataset.

    ``stats`` (mean, std) should come from the training split; when omitted
    they are computed from these images.  ``subset`` keeps the first N items.
    """
    images = _read_magic(images_path, IDX_IMAGES_MAGIC)
    labels = _read_magic(labels_path, IDX_LABELS_MAGIC)
    if images.ndim != 3:
        raise DataFormatError(images_path, 3, f"image file must have 3 dimensions, got {images.ndim}")
    if labels.ndim != 1:
        raise DataFormatError(labels_path, 3, f"label file must have 1 dimension, got {labels.ndim}")
    if len(labels) != len(images):
        raise DataFormatError(labels_path, 4, f"{len(labels)} labels for {len(images)} images")
    if subset is not None:
        images, labels = images[:subset], labels[:subset]
    return _normalize(images[:, None], labels, 10 if labels.max() < 10 else int(labels.max()) + 1, stats)


def _read_magic(path, magic: int) -> np.ndarray:
    arr = read_idx(path)
    expect_ndim = magic & 0xFF
    if arr.ndim != expect_ndim:
        got = 0x00000800 | arr.ndim
        raise DataFormatError(path, 0, f"magic 0x{got:08x} but expected 0x{magic:08x}")
    return arr


def load_cifar_binary(paths: str | Path | Sequence, stats=None, subset: int | None = None,
                      seed: int = 0) -> Dataset:
    """CIFAR-10 binary batches (1 label byte + 3072 pixel bytes per record).

    ``subset`` draws a deterministic sample of that many records, kept in file order.
    """
    if isinstance(paths, (str, Path)):
        paths = [paths]
    chunks = []
    for path in paths:
        raw = _open(path)
        if len(raw) == 0 or len(raw) % CIFAR_RECORD:
            bad = len(raw) - len(raw) % CIFAR_RECORD
            raise DataFormatError(path, bad, f"file length {len(raw)} is not a multiple of {CIFAR_RECORD}")
        chunks.append(np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD))
    records = np.concatenate(chunks)
    labels = records[:, 0]
    if labels.max() >= 10:
        row = int(np.argmax(labels >= 10))
        raise DataFormatError(paths[0], row * CIFAR_RECORD, f"label byte {labels[row]} outside [0, 10)")
    images = records[:, 1:].reshape(-1, 3, 32, 32)
    if subset is not None and subset < len(records):
        keep = np.sort(np.random.default_rng(seed).permutation(len(records))[:subset])
        images, labels = images[keep], labels[keep]
    return _normalize(images, labels, 10, stats)


def synthetic_moe_task(seed: int, dim: int, classes: int, n: int, noise: float,
                       clusters_per_class: int = 2) -> Dataset:
    """Gaussian clusters around unit-sphere centres, several per class.

    With more than one cluster per class the label is a union of blobs, so a
    router that sends each region to its own expert beats one linear map.
    Deterministic in ``seed``.
    """
    if classes < 2:
        raise ValueError("need at least 2 classes")
    if clusters_per_class < 1:
        raise ValueError("clusters_per_class must be positive")
    rng = np.random.default_rng(seed)
    centres = _centres(rng, dim, classes * clusters_per_class)
    labels = rng.permutation(np.arange(n) % classes)
    cluster = labels * clusters_per_class + rng.integers(0, clusters_per_class, size=n)
    x = centres[cluster] + noise * rng.normal(size=(n, dim))
    return Dataset(x, labels.astype(np.int64), classes, np.zeros(1), np.ones(1))


def synthetic_centres(seed: int, dim: int, classes: int, clusters_per_class: int = 2) -> np.ndarray:
    """The cluster centres :func:`synthetic_moe_task` uses, row ``c * clusters_per_class + j``."""
    return _centres(np.random.default_rng(seed), dim, classes * clusters_per_class)


def _centres(rng: np.random.Generator, dim: int, count: int) -> np.ndarray:
    centres = rng.normal(size=(count, dim))
    return centres / np.linalg.norm(centres, axis=1, keepdims=True)


def train_test_split(ds: Dataset, n_test: int) -> tuple[Dataset, Dataset]:
    """Last ``n_test`` items become the test split."""
    if not 0 < n_test < len(ds):
        raise ValueError(f"n_test must be in (0, {len(ds)})")
    cut = len(ds) - n_test
    return ds.subset(np.arange(cut)), ds.subset(np.arange(cut, len(ds)))


class BatchIterator:
    """Seeded mini-batches; each epoch is a fresh permutation of all indices."""

    def __init__(self, dataset: Dataset, batch_size: int, seed: int = 0, shuffle: bool = True):
        if batch_size <= 0:
            raise ValueError("batch size must be positive")
        self.dataset = dataset
        self.batch_size = batch_size
        self.seed = seed
        self.shuffle = shuffle
        self.epoch = 0

    def __len__(self) -> int:
        return -(-len(self.dataset) // self.batch_size)

    def order(self, epoch: int) -> np.ndarray:
        n = len(self.dataset)
        if not self.shuffle:
            return np.arange(n)
        return np.random.default_rng([self.seed, epoch]).permutation(n)

    def index_batches(self, epoch: int) -> list[np.ndarray]:
        order = self.order(epoch)
        return [order[i : i + self.batch_size] for i in range(0, len(order), self.batch_size)]

    def batches(self, epoch: int | None = None) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        if epoch is None:
            epoch = self.epoch
            self.epoch += 1
        for idx in self.index_batches(epoch):
            yield self.dataset.inputs[idx], self.dataset.labels[idx]

    def __iter__(self):
        return self.batches()

    def stream(self, start_epoch: int = 0) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        """Endless batches, epoch after epoch."""
        epoch = start_epoch
        while True:
            yield from self.batches(epoch)
            epoch += 1
