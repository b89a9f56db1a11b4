"""CIFAR-10 ingestion, synthetic fixtures and augmentation.

Splits keep raw ``uint8`` pixels in CHW order; normalization happens when a
batch is materialized so that the constants stay in one place and can be
recorded alongside checkpoints.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Literal

import numpy as np
import torch

# Widely published CIFAR-10 per-channel statistics (pixel values scaled to [0, 1]).
CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2470, 0.2435, 0.2616)

NUM_CLASSES = 10
IMAGE_SHAPE = (3, 32, 32)
RECORD_BYTES = 1 + 3 * 32 * 32
RECORDS_PER_FILE = 10000
TRAIN_FILES = tuple(f"data_batch_{k}.bin" for k in range(1, 6))
TEST_FILES = ("test_batch.bin",)

DATA_ROOT_ENV = "STITCHLAB_DATA_ROOT"

Role = Literal["train", "test"]
AugmentPolicy = Literal["none", "crop_flip"]


class IngestionError(RuntimeError):
    """A dataset file is missing, unreadable or the wrong size."""


class CorruptRecordError(IngestionError):
    """A dataset file contains a malformed record."""


def normalization_constants() -> dict[str, list[float]]:
    return {"mean": list(CIFAR10_MEAN), "std": list(CIFAR10_STD)}


@dataclass(frozen=True)
class ImageBatch:
    """Normalized images ``(batch, 3, 32, 32)`` with integer labels in ``[0, 10)``."""

    images: torch.Tensor
    labels: torch.Tensor

    def __post_init__(self):
        if self.images.ndim != 4 or tuple(self.images.shape[1:]) != IMAGE_SHAPE:
            raise ValueError(f"images must have shape (batch, 3, 32, 32), got {tuple(self.images.shape)}")
        if self.labels.shape != self.images.shape[:1]:
            raise ValueError("labels must have one entry per image")
        if self.labels.numel() and (self.labels.min() < 0 or self.labels.max() >= NUM_CLASSES):
            raise ValueError("labels must lie in [0, 10)")

    def __len__(self) -> int:
        return self.images.shape[0]

    def to(self, device) -> "ImageBatch":
        return ImageBatch(self.images.to(device), self.labels.to(device))


@dataclass(frozen=True, eq=False)
class DatasetSplit:
    """An immutable collection of labelled 32x32 RGB images.

    ``pixels`` holds raw ``uint8`` values with shape ``(n, 3, 32, 32)``.
    Iteration order is a pure function of ``(seed, epoch)``.
    """

    role: Role
    source: Literal["cifar10", "synthetic"]
    pixels: np.ndarray
    labels: np.ndarray
    mean: tuple[float, float, float] = CIFAR10_MEAN
    std: tuple[float, float, float] = CIFAR10_STD
    description: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.pixels.dtype != np.uint8 or self.pixels.shape[1:] != IMAGE_SHAPE:
            raise ValueError(f"pixels must be uint8 with shape (n, 3, 32, 32), got {self.pixels.dtype} {self.pixels.shape}")
        if self.labels.shape != (self.pixels.shape[0],):
            raise ValueError("labels must have one entry per image")
        self.pixels.setflags(write=False)
        self.labels.setflags(write=False)

    @property
    def size(self) -> int:
        return int(self.pixels.shape[0])

    def __len__(self) -> int:
        return self.size

    def normalize(self, pixels: np.ndarray) -> torch.Tensor:
        x = torch.from_numpy(pixels.astype(np.float32) / 255.0)
        mean = torch.tensor(self.mean, dtype=torch.float32).view(1, 3, 1, 1)
        std = torch.tensor(self.std, dtype=torch.float32).view(1, 3, 1, 1)
        return (x - mean) / std

    def batch(self, indices) -> ImageBatch:
        indices = np.asarray(indices, dtype=np.int64)
        return ImageBatch(
            self.normalize(self.pixels[indices]),
            torch.from_numpy(self.labels[indices].astype(np.int64)),
        )

    def order(self, seed: int | None = None, epoch: int = 0) -> np.ndarray:
        """Example order for one pass; ``seed=None`` keeps the stored order."""
        if seed is None:
            return np.arange(self.size)
        return np.random.default_rng([seed, epoch]).permutation(self.size)

    def batches(
        self,
        batch_size: int,
        *,
        seed: int | None = None,
        epoch: int = 0,
        augment: AugmentPolicy = "none",
        drop_last: bool = False,
    ) -> Iterator[ImageBatch]:
        order = self.order(seed, epoch)
        stop = self.size - self.size % batch_size if drop_last else self.size
        for n, start in enumerate(range(0, stop, batch_size)):
            b = self.batch(order[start:start + batch_size])
            if augment != "none":
                b = augment_batch(b, augment, seed=_mix(seed or 0, epoch, n))
            yield b

    def num_batches(self, batch_size: int, drop_last: bool = False) -> int:
        if drop_last:
            return self.size // batch_size
        return -(-self.size // batch_size)

    def subset(self, fraction: float | None = None, count: int | None = None, seed: int = 0) -> "DatasetSplit":
        """Deterministic random subset, by fraction of the split or by count."""
        if (fraction is None) == (count is None):
            raise ValueError("give exactly one of fraction or count")
        n = int(round(self.size * fraction)) if fraction is not None else int(count)
        if not 1 <= n <= self.size:
            raise ValueError(f"subset size {n} outside [1, {self.size}]")
        if n == self.size:
            return self
        idx = np.sort(np.random.default_rng(seed).permutation(self.size)[:n])
        return DatasetSplit(
            self.role, self.source, self.pixels[idx].copy(), self.labels[idx].copy(),
            self.mean, self.std, {**self.description, "subset_of": self.size, "subset_seed": seed},
        )


def _mix(*values: int) -> int:
    return int(np.random.SeedSequence([int(v) & 0xFFFFFFFF for v in values]).generate_state(1)[0])


def resolve_data_root(root: str | os.PathLike | None = None) -> Path:
    """Explicit root, else ``$STITCHLAB_DATA_ROOT``."""
    if root is None:
        root = os.environ.get(DATA_ROOT_ENV)
    if root is None:
        raise IngestionError(f"no data root given and {DATA_ROOT_ENV} is not set")
    return Path(root)


def _batches_dir(root: Path) -> Path:
    nested = root / "cifar-10-batches-bin"
    return nested if nested.is_dir() else root


def _read_batch_file(path: Path, expected_records: int | None) -> tuple[np.ndarray, np.ndarray]:
    if not path.is_file():
        raise IngestionError(f"missing CIFAR-10 file: {path}")
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % RECORD_BYTES:
        raise CorruptRecordError(
            f"{path}: {raw.size} bytes is not a whole number of {RECORD_BYTES}-byte records"
        )
    records = raw.reshape(-1, RECORD_BYTES)
    if expected_records is not None and records.shape[0] != expected_records:
        raise IngestionError(f"{path}: expected {expected_records} records, found {records.shape[0]}")
    labels = records[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= NUM_CLASSES)
    if bad.size:
        raise CorruptRecordError(f"{path}: record {bad[0]} has label byte {labels[bad[0]]} >= {NUM_CLASSES}")
    pixels = records[:, 1:].reshape(-1, *IMAGE_SHAPE)
    return np.ascontiguousarray(pixels), labels


def cifar10_available(root: str | os.PathLike | None = None) -> bool:
    try:
        d = _batches_dir(resolve_data_root(root))
    except IngestionError:
        return False
    return all((d / f).is_file() for f in TRAIN_FILES + TEST_FILES)


def load_cifar10(root: str | os.PathLike | None, role: Role, *, strict: bool = True) -> DatasetSplit:
    """Read the CIFAR-10 binary distribution.

    ``root`` may point at ``cifar-10-batches-bin`` itself or its parent. With
    ``strict`` every file must hold exactly 10000 records.

    Raises:
        IngestionError: a file is missing or has the wrong record count.
        CorruptRecordError: a file is not a whole number of records, or a label byte is >= 10.
    """
    if role not in ("train", "test"):
        raise ValueError(f"unknown role {role!r}")
    d = _batches_dir(resolve_data_root(root))
    names = TRAIN_FILES if role == "train" else TEST_FILES
    parts = [_read_batch_file(d / name, RECORDS_PER_FILE if strict else None) for name in names]
    pixels = np.concatenate([p for p, _ in parts])
    labels = np.concatenate([l for _, l in parts])
    return DatasetSplit(role, "cifar10", pixels, labels, description={"root": str(d)})


# Prototypes are independent of the split seed so that train and test splits
# generated with different seeds share one labelling function.
_PROTOTYPE_SEED = 20240101


def _prototypes() -> np.ndarray:
    rng = np.random.default_rng(_PROTOTYPE_SEED)
    coarse = rng.uniform(20.0, 235.0, size=(NUM_CLASSES, 3, 4, 4))
    return np.repeat(np.repeat(coarse, 8, axis=2), 8, axis=3)


def synthetic_label(pixels: np.ndarray) -> np.ndarray:
    """Labelling function of the synthetic fixture: index of the nearest class prototype."""
    protos = _prototypes().reshape(NUM_CLASSES, -1)
    flat = pixels.reshape(pixels.shape[0], -1).astype(np.float64)
    d = (flat**2).sum(1)[:, None] - 2.0 * flat @ protos.T + (protos**2).sum(1)[None, :]
    return d.argmin(axis=1).astype(np.int64)


def make_synthetic(n: int, seed: int, role: Role = "train", noise: float = 40.0) -> DatasetSplit:
    """Deterministic 32x32 RGB fixture whose labels are a function of pixel content.

    Each image is a noisy copy of one of ten blocky prototypes; the label is
    then recomputed as the nearest prototype, so it depends on pixels only.
    """
    if n < 1:
        raise ValueError(f"synthetic split needs n >= 1, got {n}")
    rng = np.random.default_rng([seed, 0x5EED])
    cls = rng.permutation(np.arange(n) % NUM_CLASSES)
    imgs = _prototypes()[cls] + rng.normal(0.0, noise, size=(n, *IMAGE_SHAPE))
    pixels = np.clip(np.rint(imgs), 0, 255).astype(np.uint8)
    return DatasetSplit(role, "synthetic", pixels, synthetic_label(pixels),
                        description={"n": n, "seed": seed, "noise": noise})


def augment_batch(batch: ImageBatch, policy: AugmentPolicy, seed: int) -> ImageBatch:
    """Apply an augmentation policy; ``crop_flip`` is pad-4 random crop plus horizontal flip."""
    if policy == "none":
        return batch
    if policy != "crop_flip":
        raise ValueError(f"unknown augmentation policy {policy!r}")
    g = torch.Generator().manual_seed(seed)
    x = batch.images
    n = x.shape[0]
    padded = torch.nn.functional.pad(x, (4, 4, 4, 4))
    dy = torch.randint(0, 9, (n,), generator=g)
    dx = torch.randint(0, 9, (n,), generator=g)
    flip = torch.rand(n, generator=g) < 0.5
    rows = (dy[:, None] + torch.arange(32)[None, :])[:, None, :, None]
    cols = (dx[:, None] + torch.arange(32)[None, :])
    cols = torch.where(flip[:, None], cols.flip(1), cols)[:, None, None, :]
    b = torch.arange(n)[:, None, None, None]
    c = torch.arange(3)[None, :, None, None]
    out = padded[b, c, rows, cols]
    return ImageBatch(out.contiguous(), batch.labels)


augment = augment_batch
