"""CIFAR binary ingestion, normalisation, augmentation and subsetting."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PIXELS = 3 * 32 * 32
RECORD_BYTES = {"c10": 1 + PIXELS, "c100": 2 + PIXELS}
NUM_CLASSES = {"c10": 10, "c100": 100}
SPLIT_FILES = {
    ("c10", "train"): [f"data_batch_{i}.bin" for i in range(1, 6)],
    ("c10", "test"): ["test_batch.bin"],
    ("c100", "train"): ["train.bin"],
    ("c100", "test"): ["test.bin"],
}
# nested directory names used by the official archives
ARCHIVE_DIRS = {"c10": "cifar-10-batches-bin", "c100": "cifar-100-binary"}


class DataFormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # uint8, n x 3 x 32 x 32
    labels: np.ndarray  # int64
    variant: str = "c10"
    split: str = "train"
    coarse_labels: np.ndarray | None = None
    provenance: list[tuple[str, str]] = field(default_factory=list)

    def __post_init__(self):
        if self.images.shape[1:] != (3, 32, 32) or len(self.images) != len(self.labels):
            raise DataFormatError(f"images {self.images.shape} / labels {self.labels.shape} mismatch")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return NUM_CLASSES[self.variant]

    def take(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        coarse = None if self.coarse_labels is None else self.coarse_labels[idx]
        return Dataset(self.images[idx], self.labels[idx], self.variant, self.split, coarse,
                       list(self.provenance))


def parse_cifar(path, variant: str = "c10") -> Dataset:
    """Parse one CIFAR binary file (CIFAR-100 keeps the fine label)."""
    if variant not in RECORD_BYTES:
        raise ValueError(f"variant must be 'c10' or 'c100', got {variant!r}")
    path = Path(path)
    raw = path.read_bytes()
    ds = parse_cifar_bytes(raw, variant, source=str(path))
    ds.provenance = [(str(path), hashlib.sha256(raw).hexdigest())]
    return ds


def parse_cifar_bytes(raw: bytes, variant: str = "c10", source: str = "<bytes>") -> Dataset:
    rec = RECORD_BYTES[variant]
    if len(raw) == 0 or len(raw) % rec:
        whole = len(raw) // rec * rec
        raise DataFormatError(
            f"{source}: {len(raw)} bytes is not a whole number of {rec}-byte records "
            f"(truncated record at byte offset {whole})"
        )
    table = np.frombuffer(raw, dtype=np.uint8).reshape(-1, rec)
    header = rec - PIXELS
    images = table[:, header:].reshape(-1, 3, 32, 32).copy()
    labels = table[:, header - 1].astype(np.int64)
    coarse = table[:, 0].astype(np.int64) if variant == "c100" else None
    n_cls = NUM_CLASSES[variant]
    bad = np.flatnonzero(labels >= n_cls)
    if bad.size:
        raise DataFormatError(
            f"{source}: label {labels[bad[0]]} out of range at byte offset {bad[0] * rec + header - 1}"
        )
    return Dataset(images, labels, variant, coarse_labels=coarse)


def serialize_cifar(ds: Dataset) -> bytes:
    """Inverse of :func:`parse_cifar_bytes`."""
    n = len(ds)
    pixels = ds.images.reshape(n, PIXELS).astype(np.uint8)
    if ds.variant == "c100":
        coarse = ds.coarse_labels if ds.coarse_labels is not None else np.zeros(n, np.int64)
        head = np.stack([coarse, ds.labels], axis=1).astype(np.uint8)
    else:
        head = ds.labels.astype(np.uint8)[:, None]
    return np.concatenate([head, pixels], axis=1).tobytes()


def _concat(parts: list[Dataset], split: str) -> Dataset:
    coarse = None
    if parts[0].coarse_labels is not None:
        coarse = np.concatenate([p.coarse_labels for p in parts])
    return Dataset(
        np.concatenate([p.images for p in parts]),
        np.concatenate([p.labels for p in parts]),
        parts[0].variant,
        split,
        coarse,
        [prov for p in parts for prov in p.provenance],
    )


def load_split(root, variant: str = "c10", split: str = "train") -> Dataset:
    """Load a split from an unpacked CIFAR binary directory."""
    root = Path(root)
    if (root / ARCHIVE_DIRS[variant]).is_dir():
        root = root / ARCHIVE_DIRS[variant]
    files = [root / name for name in SPLIT_FILES[(variant, split)]]
    missing = [str(f) for f in files if not f.exists()]
    if missing:
        raise FileNotFoundError(f"missing CIFAR files: {missing}")
    ds = _concat([parse_cifar(f, variant) for f in files], split)
    ds.split = split
    return ds


# ---------------------------------------------------------------- normalisation

def channel_stats(ds: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and standard deviation of the [0, 1]-scaled pixels."""
    x = ds.images.astype(np.float64) / 255.0
    return x.mean(axis=(0, 2, 3)), x.std(axis=(0, 2, 3))


def normalize(images: np.ndarray, mean, std) -> np.ndarray:
    x = images.astype(np.float64) / 255.0
    return (x - np.asarray(mean).reshape(1, 3, 1, 1)) / np.asarray(std).reshape(1, 3, 1, 1)


# ---------------------------------------------------------------- augmentation

def crop_flip(images: np.ndarray, offsets: np.ndarray, flips: np.ndarray, pad: int = 4) -> np.ndarray:
    """Zero-pad by ``pad``, crop 32x32 windows at (row, col) ``offsets``, mirror where ``flips``."""
    b, c, h, w = images.shape
    padded = np.zeros((b, c, h + 2 * pad, w + 2 * pad))
    padded[:, :, pad:pad + h, pad:pad + w] = images
    out = np.empty(images.shape)
    for i in range(b):
        dy, dx = offsets[i]
        crop = padded[i, :, dy:dy + h, dx:dx + w]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out


def augment_batch(images: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    b = len(images)
    offsets = rng.integers(0, 2 * pad + 1, size=(b, 2))
    flips = rng.random(b) < 0.5
    return crop_flip(images, offsets, flips, pad)


def augment(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random 4-pixel-padded crop plus horizontal flip of one 3x32x32 image."""
    if image.shape != (3, 32, 32):
        raise ValueError(f"expected a 3x32x32 image, got {image.shape}")
    return augment_batch(image[None], rng)[0]


# ---------------------------------------------------------------- subsets

def subset(ds: Dataset, n_per_class: int, seed: int) -> Dataset:
    """Class-balanced seeded sample; indices keep their original order."""
    rng = np.random.default_rng(seed)
    picked = []
    for cls in range(ds.num_classes):
        pool = np.flatnonzero(ds.labels == cls)
        if len(pool) == 0:
            continue
        if n_per_class > len(pool):
            raise ValueError(f"class {cls} has {len(pool)} images, {n_per_class} requested")
        picked.append(rng.choice(pool, size=n_per_class, replace=False))
    if not picked:
        raise ValueError("dataset is empty")
    return ds.take(np.sort(np.concatenate(picked)))


def synthetic_cifar(n_per_class: int, seed: int = 0, variant: str = "c10",
                    noise: float = 40.0) -> Dataset:
    """Learnable CIFAR-shaped data: each class is a fixed colour/stripe template plus noise.

    Intended for smoke runs and tests where the real archives are unavailable.
    """
    rng = np.random.default_rng(seed)
    n_cls = NUM_CLASSES[variant]
    template_rng = np.random.default_rng(12345)
    yy, xx = np.mgrid[0:32, 0:32]
    templates = []
    for cls in range(n_cls):
        colour = template_rng.uniform(40, 215, size=3)
        angle = np.pi * cls / n_cls
        freq = 2 + cls % 3
        wave = np.sin(freq * 2 * np.pi * (np.cos(angle) * xx + np.sin(angle) * yy) / 32)
        templates.append(colour[:, None, None] + 35.0 * wave[None])
    labels = np.repeat(np.arange(n_cls), n_per_class)
    rng.shuffle(labels)
    imgs = np.stack([templates[k] for k in labels]) + rng.normal(0, noise, (len(labels), 3, 32, 32))
    images = np.clip(np.rint(imgs), 0, 255).astype(np.uint8)
    coarse = labels // 5 if variant == "c100" else None
    return Dataset(images, labels.astype(np.int64), variant, "synthetic", coarse)
