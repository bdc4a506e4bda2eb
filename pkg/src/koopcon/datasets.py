"""Dataset ingestion: IDX (MNIST / FashionMNIST), CIFAR-10 binary batches,
per-class batch assembly and balanced hold-out splits.

Images are held as float64 arrays of shape (n, c, h, w) scaled into [0, 1].
"""

from __future__ import annotations

import gzip
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConsistencyError, ContractError, DataError, FormatError, LengthError

IDX_UBYTE = 0x08
IDX_LABELS_MAGIC = 0x00000801
IDX_IMAGES_MAGIC = 0x00000803
IDX_IMAGES4_MAGIC = 0x00000804

CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_CLASSES = 10

IDX_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CIFAR_FILES = {
    "train": [f"data_batch_{i}.bin" for i in range(1, 6)],
    "test": ["test_batch.bin"],
}


@dataclass(frozen=True)
class LabeledImages:
    images: np.ndarray
    labels: np.ndarray
    class_count: int
    source_name: str = ""

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if images.ndim != 4:
            raise ContractError(f"images must be (n, c, h, w), got shape {images.shape}")
        if len(images) != len(labels):
            raise ConsistencyError(f"{len(images)} images but {len(labels)} labels")
        if labels.size and (labels.min() < 0 or labels.max() >= self.class_count):
            raise ConsistencyError(f"labels must lie in [0, {self.class_count})")
        if images.size and (images.min() < 0.0 or images.max() > 1.0):
            raise DataError(f"pixel values must lie in [0, 1], got [{images.min()}, {images.max()}]")
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return len(self.labels)

    @property
    def geometry(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count)

    def subset(self, indices, source_name=None) -> "LabeledImages":
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledImages(
            self.images[indices],
            self.labels[indices],
            self.class_count,
            source_name or self.source_name,
        )


@dataclass(frozen=True)
class ClassBatch:
    class_id: int
    images: np.ndarray
    sample_indices: List[int] = field(default_factory=list)


def _maybe_gunzip(blob: bytes) -> bytes:
    if blob[:2] == b"\x1f\x8b":
        try:
            return gzip.decompress(blob)
        except (OSError, EOFError, zlib.error) as exc:
            raise FormatError(f"corrupt gzip stream: {exc}", offset=0) from exc
    return blob


def _read_idx(blob: bytes, allowed_magic: Sequence[int], what: str) -> np.ndarray:
    blob = _maybe_gunzip(bytes(blob))
    if len(blob) < 4:
        raise LengthError(f"{what}: IDX header truncated", expected=4, actual=len(blob))
    (magic,) = struct.unpack(">I", blob[:4])
    if magic not in allowed_magic:
        expected = " or ".join(f"0x{m:08X}" for m in allowed_magic)
        raise FormatError(f"{what}: bad IDX magic 0x{magic:08X}, expected {expected}", offset=0)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(blob) < header:
        raise LengthError(f"{what}: IDX dimension table truncated", expected=header, actual=len(blob))
    dims = struct.unpack(f">{ndim}I", blob[4:header])
    if any(d == 0 for d in dims):
        raise FormatError(f"{what}: zero extent in IDX dimensions {dims}", offset=4)
    payload = math.prod(dims)
    if len(blob) != header + payload:
        raise LengthError(f"{what}: IDX payload size", expected=header + payload, actual=len(blob))
    return np.frombuffer(blob, dtype=np.uint8, offset=header).reshape(dims)


def parse_idx(image_bytes: bytes, label_bytes: bytes, class_count: int = 10, source_name: str = "idx") -> LabeledImages:
    """Parse an IDX image file and its IDX label file.

    3-D image files (n, h, w) become single-channel images; 4-D files are
    read as (n, c, h, w). Either input may be gzip-compressed.
    """
    pixels = _read_idx(image_bytes, (IDX_IMAGES_MAGIC, IDX_IMAGES4_MAGIC), "images")
    labels = _read_idx(label_bytes, (IDX_LABELS_MAGIC,), "labels")
    if pixels.shape[0] != labels.shape[0]:
        raise ConsistencyError(f"{pixels.shape[0]} images but {labels.shape[0]} labels")
    if labels.max() >= class_count:
        raise FormatError(f"label {int(labels.max())} outside [0, {class_count})")
    if pixels.ndim == 3:
        pixels = pixels[:, None, :, :]
    return LabeledImages(pixels / 255.0, labels.astype(np.int64), class_count, source_name)


def _idx_blob(array: np.ndarray) -> bytes:
    magic = (IDX_UBYTE << 8) | array.ndim
    header = struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape)
    return header + np.ascontiguousarray(array, dtype=np.uint8).tobytes()


def to_uint8(images: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(images, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_idx(data: LabeledImages) -> Tuple[bytes, bytes]:
    """Serialize to (image_bytes, label_bytes); the inverse of :func:`parse_idx`."""
    pixels = to_uint8(data.images)
    if pixels.shape[1] == 1:
        pixels = pixels[:, 0]
    return _idx_blob(pixels), _idx_blob(data.labels.astype(np.uint8))


def parse_cifar10(batch_bytes: bytes, source_name: str = "cifar10") -> LabeledImages:
    """Parse a CIFAR-10 binary batch: records of 1 label byte + 3072 planar RGB bytes."""
    blob = bytes(batch_bytes)
    if len(blob) == 0 or len(blob) % CIFAR_RECORD:
        records, rest = divmod(len(blob), CIFAR_RECORD)
        raise FormatError(
            f"CIFAR-10 batch length {len(blob)} is not a positive multiple of {CIFAR_RECORD} "
            f"({records} whole records + {rest} stray bytes)",
            offset=records * CIFAR_RECORD,
        )
    raw = np.frombuffer(blob, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = raw[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= CIFAR_CLASSES)
    if bad.size:
        raise FormatError(f"label {labels[bad[0]]} outside [0, 10)", offset=int(bad[0]) * CIFAR_RECORD)
    images = raw[:, 1:].reshape(-1, 3, 32, 32) / 255.0
    return LabeledImages(images, labels, CIFAR_CLASSES, source_name)


def write_cifar10(data: LabeledImages) -> bytes:
    pixels = to_uint8(data.images).reshape(len(data), -1)
    return np.concatenate([data.labels.astype(np.uint8)[:, None], pixels], axis=1).tobytes()


def _find(directory: Path, name: str) -> Path:
    for candidate in (directory / name, directory / f"{name}.gz"):
        if candidate.exists():
            return candidate
    raise DataError(f"dataset file {name}[.gz] not found under {directory}")


def load_dataset(name: str, data_dir, split: str = "train") -> LabeledImages:
    """Load one split of a dataset stored under its conventional filenames."""
    directory = Path(data_dir)
    if split not in ("train", "test"):
        raise ContractError(f"unknown split {split!r}")
    if name in ("mnist", "fashion_mnist"):
        image_name, label_name = IDX_FILES[split]
        return parse_idx(
            _find(directory, image_name).read_bytes(),
            _find(directory, label_name).read_bytes(),
            source_name=f"{name}:{split}",
        )
    if name == "cifar10":
        parts = [parse_cifar10(_find(directory, f).read_bytes()) for f in CIFAR_FILES[split]]
        return LabeledImages(
            np.concatenate([p.images for p in parts]),
            np.concatenate([p.labels for p in parts]),
            CIFAR_CLASSES,
            f"cifar10:{split}",
        )
    raise DataError(f"unknown dataset {name!r}")


def make_toy_dataset(
    class_count: int = 2, per_class: int = 8, size: int = 16, channels: int = 1, seed: int = 0
) -> LabeledImages:
    """Constant-colored images: class k has intensity near (k + 0.5) / class_count."""
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for k in range(class_count):
        centre = (k + 0.5) / class_count
        jitter = rng.uniform(-0.25, 0.25, size=per_class) / class_count
        for level in centre + jitter:
            images.append(np.full((channels, size, size), level))
            labels.append(k)
    return LabeledImages(np.array(images), np.array(labels), class_count, "toy")


def class_batch(data: LabeledImages, class_id: int, n_b: int, seed) -> ClassBatch:
    """Draw exactly ``n_b`` samples of one class.

    Sampling is without replacement when the class is large enough and with
    replacement otherwise, so the batch size is always ``n_b``.
    """
    if not 0 <= class_id < data.class_count:
        raise ContractError(f"class {class_id} outside [0, {data.class_count})")
    members = np.flatnonzero(data.labels == class_id)
    if members.size == 0:
        raise DataError(f"class {class_id} has no samples in {data.source_name or 'dataset'}")
    rng = np.random.default_rng(seed)
    picked = rng.choice(members, size=n_b, replace=members.size < n_b)
    return ClassBatch(class_id, data.images[picked], [int(i) for i in picked])


def holdout_split(data: LabeledImages, per_class: int, seed) -> Tuple[LabeledImages, LabeledImages]:
    """Split into a subset with exactly ``per_class`` samples of each class and the rest."""
    rng = np.random.default_rng(seed)
    chosen = []
    for k in range(data.class_count):
        members = np.flatnonzero(data.labels == k)
        if members.size < per_class:
            raise DataError(f"class {k} has {members.size} samples, fewer than {per_class} requested")
        chosen.append(rng.permutation(members)[:per_class])
    subset_idx = np.concatenate(chosen) if chosen else np.empty(0, dtype=np.int64)
    mask = np.ones(len(data), dtype=bool)
    mask[subset_idx] = False
    return data.subset(subset_idx), data.subset(np.flatnonzero(mask))


def stratified_limit(data: LabeledImages, per_class: Optional[int], seed) -> LabeledImages:
    """Keep at most ``per_class`` samples of every class (all when None)."""
    if per_class is None:
        return data
    rng = np.random.default_rng(seed)
    keep = []
    for k in range(data.class_count):
        members = np.flatnonzero(data.labels == k)
        keep.append(np.sort(rng.permutation(members)[:per_class]))
    return data.subset(np.sort(np.concatenate(keep)))
