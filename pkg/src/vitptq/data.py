"""Image dataset container and the bundled synthetic texture task.

File layout (all integers little-endian)::

    offset  size  field
    0       8     magic  b"VPTQDSET"
    8       4     version (u32, currently 1)
    12      4     channels (u32)
    16      4     height (u32)
    20      4     width (u32)
    24      4     num_classes (u32)
    28      4     split (u32: 0 train, 1 test, 2 calibration)
    32      8     count (u64)
    40      count*C*H*W      images, uint8, row-major (N, C, H, W)
    ...     count*2          labels, u16
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from .errors import BadMagicError, ContractError, DataFormatError, TruncatedFileError

MAGIC = b"VPTQDSET"
VERSION = 1
_HEADER = struct.Struct("<8sIIIIIIQ")
SPLITS = ("train", "test", "calibration")


@dataclass
class Dataset:
    images: np.ndarray  # uint8 (N, C, H, W)
    labels: np.ndarray  # int64 (N,)
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.uint8)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ContractError(f"images must be (N, C, H, W), got shape {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ContractError("labels and images disagree on record count")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ContractError(f"labels must lie in [0, {self.num_classes})")
        if self.split not in SPLITS:
            raise ContractError(f"unknown split {self.split!r}")

    def __len__(self) -> int:
        return self.labels.shape[0]

    def float_images(self, idx=None) -> np.ndarray:
        """Pixels mapped to [-1, 1] as float64."""
        imgs = self.images if idx is None else self.images[idx]
        return imgs.astype(np.float64) / 127.5 - 1.0

    def subset(self, idx, split: str | None = None) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, split or self.split)


def save_dataset(ds: Dataset, path: Union[str, Path]) -> None:
    n, c, h, w = ds.images.shape
    header = _HEADER.pack(MAGIC, VERSION, c, h, w, ds.num_classes, SPLITS.index(ds.split), n)
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(ds.images).tobytes())
        f.write(ds.labels.astype("<u2").tobytes())


def load_dataset(path: Union[str, Path]) -> Dataset:
    """Parse a dataset file.

    Raises ``FileNotFoundError`` for a missing file, ``BadMagicError`` for a
    foreign header and ``TruncatedFileError`` when the payload is short. The
    whole header is validated before any payload is decoded.
    """
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) or raw[: len(MAGIC)] != MAGIC:
        raise BadMagicError(f"{path}: not a dataset file (bad magic)")
    if len(raw) < _HEADER.size:
        raise TruncatedFileError(f"{path}: header truncated ({len(raw)} bytes)")
    _, version, c, h, w, classes, split, n = _HEADER.unpack_from(raw)
    if version != VERSION:
        raise DataFormatError(f"{path}: unsupported version {version}")
    if split >= len(SPLITS) or classes == 0:
        raise DataFormatError(f"{path}: invalid header fields")
    img_bytes = n * c * h * w
    need = _HEADER.size + img_bytes + 2 * n
    if len(raw) < need:
        raise TruncatedFileError(f"{path}: expected {need} bytes, found {len(raw)}")
    if len(raw) > need:
        raise DataFormatError(f"{path}: {len(raw) - need} trailing bytes")
    off = _HEADER.size
    images = np.frombuffer(raw, dtype=np.uint8, count=img_bytes, offset=off).reshape(n, c, h, w).copy()
    labels = np.frombuffer(raw, dtype="<u2", count=n, offset=off + img_bytes).astype(np.int64)
    if n and labels.max() >= classes:
        raise DataFormatError(f"{path}: label {labels.max()} >= num_classes {classes}")
    return Dataset(images, labels, int(classes), SPLITS[split])


def sample_calibration(ds: Dataset, count: int, seed: int) -> Dataset:
    """Uniform sample without replacement, reproducible under ``seed``."""
    if not 0 < count <= len(ds):
        raise ContractError(f"calibration count {count} not in [1, {len(ds)}]")
    idx = np.random.default_rng(seed).choice(len(ds), size=count, replace=False)
    return ds.subset(idx, "calibration")


# ----------------------------------------------------------------------------
# Synthetic texture task
# ----------------------------------------------------------------------------

TOY_TRAIN_SIZE = 5000
TOY_TEST_SIZE = 1000
TOY_CLASSES = 10


def generate_textures(count: int, seed: int, size: int = 32, patch: int = 8, channels: int = 3,
                      num_classes: int = TOY_CLASSES, split: str = "train", jitter: float = 0.05,
                      noise: float = 0.4, target_freq: float = 2.2, distractor_freq: float = 0.8) -> Dataset:
    """Patch-grid texture images whose label lives in a single patch.

    One randomly placed patch holds a high-frequency grating whose
    orientation (``pi * label / num_classes`` plus jitter) is the class. Every
    other patch holds a low-frequency grating at a random orientation. Phase,
    amplitude, colour tint and pixel noise are nuisance variables.
    """
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, num_classes, size=count)
    grid = size // patch
    yy, xx = np.mgrid[0:patch, 0:patch].astype(np.float64)
    img = np.zeros((count, channels, size, size))
    target = rng.integers(0, grid * grid, size=count)
    for p in range(grid * grid):
        is_target = target == p
        theta = np.where(is_target, np.pi * labels / num_classes + rng.normal(0, jitter, count),
                         rng.uniform(0, np.pi, count))
        freq = np.where(is_target, target_freq, distractor_freq) * rng.uniform(0.9, 1.1, count)
        phase = rng.uniform(0, 2 * np.pi, count)
        proj = np.cos(theta)[:, None, None] * xx + np.sin(theta)[:, None, None] * yy
        wave = np.sin(freq[:, None, None] * proj + phase[:, None, None])
        amp = rng.uniform(0.4, 0.9, count)[:, None, None, None]
        tint = rng.uniform(0.5, 1.0, (count, channels))[:, :, None, None]
        r, c = divmod(p, grid)
        img[:, :, r * patch:(r + 1) * patch, c * patch:(c + 1) * patch] = amp * tint * wave[:, None]
    img += rng.normal(0.0, noise, img.shape)
    pixels = np.clip(np.round((img + 1.0) * 127.5), 0, 255).astype(np.uint8)
    return Dataset(pixels, labels, num_classes, split)


def toy_datasets(seed: int = 0) -> tuple[Dataset, Dataset]:
    """The bundled task: 5000 training and 1000 test records."""
    train = generate_textures(TOY_TRAIN_SIZE, seed, split="train")
    test = generate_textures(TOY_TEST_SIZE, seed + 1, split="test")
    return train, test
