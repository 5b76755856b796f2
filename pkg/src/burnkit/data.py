"""BDS1 dataset container plus the augmenting batcher.

BDS1 layout (little-endian)::

    magic "BDS1", count u32, channels u32, height u32, width u32
    count images, each f32[C*H*W] in CHW order
    count labels, u16
    num_classes u16

so a file is ``20 + count*(C*H*W*4 + 2) + 2`` bytes long.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import DataError, FormatError

MAGIC = b"BDS1"
HEADER = struct.Struct("<4sIIII")


@dataclass
class Dataset:
    images: np.ndarray  # float32 [N, C, H, W]
    labels: np.ndarray  # uint16 [N]
    num_classes: int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.uint16)
        if self.images.ndim != 4:
            raise DataError(f"images must be [N, C, H, W], got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise DataError(f"{self.labels.shape[0]} labels for {self.images.shape[0]} images")
        if self.labels.size and int(self.labels.max()) >= self.num_classes:
            raise DataError(f"label {int(self.labels.max())} >= num_classes {self.num_classes}")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])  # type: ignore[return-value]

    def split(self, holdout: float, seed: int = 0) -> tuple["Dataset", "Dataset"]:
        """Seeded random split into (train, held-out)."""
        order = np.random.default_rng(seed).permutation(len(self))
        n_hold = int(round(len(self) * holdout))
        hold, train = order[:n_hold], order[n_hold:]
        return (
            Dataset(self.images[train], self.labels[train], self.num_classes),
            Dataset(self.images[hold], self.labels[hold], self.num_classes),
        )


def dataset_bytes(ds: Dataset) -> bytes:
    n, c, h, w = ds.images.shape
    return b"".join(
        [
            HEADER.pack(MAGIC, n, c, h, w),
            np.ascontiguousarray(ds.images, dtype="<f4").tobytes(),
            np.ascontiguousarray(ds.labels, dtype="<u2").tobytes(),
            struct.pack("<H", ds.num_classes),
        ]
    )


def write_dataset(path: str | os.PathLike, ds: Dataset) -> None:
    Path(path).write_bytes(dataset_bytes(ds))


def parse_dataset(buf: bytes) -> Dataset:
    if len(buf) < HEADER.size:
        raise FormatError(f"dataset header needs {HEADER.size} bytes, file has {len(buf)}", offset=len(buf))
    magic, n, c, h, w = HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad dataset magic {magic!r}", offset=0)
    img_bytes = n * c * h * w * 4
    expected = HEADER.size + img_bytes + 2 * n + 2
    if len(buf) != expected:
        raise FormatError(
            f"dataset length mismatch: expected {expected} bytes for {n} images of {c}x{h}x{w}, got {len(buf)}",
            offset=min(len(buf), expected),
        )
    pos = HEADER.size
    images = np.frombuffer(buf, dtype="<f4", count=n * c * h * w, offset=pos).astype(np.float32).reshape(n, c, h, w)
    pos += img_bytes
    labels = np.frombuffer(buf, dtype="<u2", count=n, offset=pos).astype(np.uint16)
    pos += 2 * n
    (num_classes,) = struct.unpack_from("<H", buf, pos)
    if n and int(labels.max()) >= num_classes:
        bad = int(np.argmax(labels >= num_classes))
        raise FormatError(f"label {int(labels[bad])} >= declared class count {num_classes}", offset=HEADER.size + img_bytes + 2 * bad)
    return Dataset(images, labels, num_classes)


def load_dataset(path: str | os.PathLike) -> Dataset:
    return parse_dataset(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# augmentation / batching


@dataclass
class AugmentSpec:
    crop_padding: int = 0
    flip_prob: float = 0.0
    mean: tuple[float, ...] | None = None
    std: tuple[float, ...] | None = None

    def __post_init__(self):
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError(f"flip_prob must lie in [0, 1], got {self.flip_prob}")
        if self.crop_padding < 0:
            raise ValueError(f"crop_padding must be >= 0, got {self.crop_padding}")

    def normalize(self, x: np.ndarray) -> np.ndarray:
        if self.mean is None:
            return x
        mean = np.asarray(self.mean, np.float32)[None, :, None, None]
        std = np.asarray(self.std if self.std is not None else (1.0,) * len(self.mean), np.float32)[None, :, None, None]
        return (x - mean) / std


def augment(images: np.ndarray, aug: AugmentSpec, rng: np.random.Generator) -> np.ndarray:
    """One augmented view per image: zero-pad + random crop, random h-flip, normalise."""
    out = images
    n, _, h, w = images.shape
    if aug.crop_padding:
        p = aug.crop_padding
        padded = np.pad(images, ((0, 0), (0, 0), (p, p), (p, p)))
        dy = rng.integers(0, 2 * p + 1, size=n)
        dx = rng.integers(0, 2 * p + 1, size=n)
        out = np.stack([padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w] for i in range(n)])
    if aug.flip_prob > 0:
        flip = rng.random(n) < aug.flip_prob
        if flip.any():
            out = out.copy() if out is images else out
            out[flip] = out[flip][..., ::-1]
    return aug.normalize(out).astype(np.float32, copy=False)


@dataclass
class Batcher:
    """Seeded epoch-shuffled batches; the last partial batch of an epoch is emitted."""

    dataset: Dataset
    batch_size: int
    aug: AugmentSpec = field(default_factory=AugmentSpec)
    seed: int = 0
    shuffle: bool = True
    epoch: int = 0
    _order: np.ndarray | None = None
    _pos: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def _start_epoch(self) -> None:
        rng = np.random.default_rng([self.seed, self.epoch, 0])
        n = len(self.dataset)
        self._order = rng.permutation(n) if self.shuffle else np.arange(n)
        self._pos = 0

    def steps_per_epoch(self) -> int:
        return -(-len(self.dataset) // self.batch_size)

    def next_batch(self) -> tuple[np.ndarray, np.ndarray]:
        if len(self.dataset) == 0:
            raise DataError("cannot draw batches from an empty dataset")
        if self._order is None:
            self._start_epoch()
        assert self._order is not None
        idx = self._order[self._pos:self._pos + self.batch_size]
        # augmentation randomness is keyed by (seed, epoch, position) so it
        # does not depend on how many batches were drawn in earlier epochs
        rng = np.random.default_rng([self.seed, self.epoch, 1, self._pos])
        batch = augment(self.dataset.images[idx], self.aug, rng)
        labels = self.dataset.labels[idx].astype(np.int64)
        self._pos += len(idx)
        if self._pos >= len(self._order):
            self.epoch += 1
            self._order = None
        return batch, labels

    def epoch_batches(self) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        """Yield the remaining batches of the current epoch."""
        start = self.epoch
        while self.epoch == start:
            yield self.next_batch()


def next_batch(batcher: Batcher) -> tuple[np.ndarray, np.ndarray]:
    return batcher.next_batch()


def iterate_plain(dataset: Dataset, batch_size: int, aug: AugmentSpec | None = None) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """In-order, unaugmented (but normalised) batches; for evaluation."""
    aug = aug or AugmentSpec()
    plain = AugmentSpec(mean=aug.mean, std=aug.std)
    for i in range(0, len(dataset), batch_size):
        yield plain.normalize(dataset.images[i:i + batch_size]).astype(np.float32, copy=False), dataset.labels[i:i + batch_size].astype(np.int64)


# ---------------------------------------------------------------------------
# dataset sources


def images_from_folder(root: str | os.PathLike, size: int = 32) -> Dataset:
    """Convert ``root/<class>/<image>`` into a dataset (classes sorted by name)."""
    from PIL import Image

    root = Path(root)
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not classes:
        raise DataError(f"no class sub-folders under {root}")
    images, labels = [], []
    for label, cls in enumerate(classes):
        for f in sorted((root / cls).iterdir()):
            if not f.is_file():
                continue
            with Image.open(f) as im:
                arr = np.asarray(im.convert("RGB").resize((size, size)), dtype=np.float32) / 255.0
            images.append(arr.transpose(2, 0, 1))
            labels.append(label)
    return Dataset(np.stack(images), np.asarray(labels), len(classes))
