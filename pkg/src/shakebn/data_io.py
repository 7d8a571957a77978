"""Dataset ingestion and seeded mini-batch iteration.

Real data comes in as big-endian IDX (28x28 grayscale digits) or CIFAR-10
binary records. Synthetic fixtures: Gaussian blob classes and rendered
digit images for desk-scale runs when no IDX files are on disk.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

__all__ = ["Dataset", "DataFormatError", "load_mnist_idx", "load_cifar10_bin",
           "make_blobs", "render_digits", "standardize", "minibatches"]

IDX_IMAGE_MAGIC = 2051
IDX_LABEL_MAGIC = 2049
CIFAR_RECORD = 3073


class DataFormatError(ValueError):
    """Malformed dataset file (bad magic, truncation, count mismatch)."""


@dataclass
class Dataset:
    images: np.ndarray   # (n, c, h, w) float32
    labels: np.ndarray   # (n,) int64
    class_count: int

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataFormatError(
                f"image count {len(self.images)} != label count {len(self.labels)}")
        if len(self.labels) and int(self.labels.max()) >= self.class_count:
            raise DataFormatError(
                f"label {int(self.labels.max())} out of range for {self.class_count} classes")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        return Dataset(self.images[idx], self.labels[idx], self.class_count)


def _read_exact(path, expected_payload, header):
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) != header + expected_payload:
        raise DataFormatError(
            f"{path}: truncated payload, expected {header + expected_payload} bytes, "
            f"got {len(data)}")
    return data


def load_mnist_idx(images_path, labels_path) -> Dataset:
    """Parse big-endian IDX image/label files into a [0,1]-scaled Dataset."""
    with open(images_path, "rb") as fh:
        head = fh.read(16)
    if len(head) < 16:
        raise DataFormatError(f"{images_path}: truncated header")
    magic, n, h, w = struct.unpack(">iiii", head)
    if magic != IDX_IMAGE_MAGIC:
        raise DataFormatError(f"{images_path}: bad magic {magic}, expected {IDX_IMAGE_MAGIC}")
    raw = _read_exact(images_path, n * h * w, 16)
    images = np.frombuffer(raw, dtype=np.uint8, offset=16).reshape(n, 1, h, w)

    with open(labels_path, "rb") as fh:
        lhead = fh.read(8)
    if len(lhead) < 8:
        raise DataFormatError(f"{labels_path}: truncated header")
    lmagic, ln = struct.unpack(">ii", lhead)
    if lmagic != IDX_LABEL_MAGIC:
        raise DataFormatError(f"{labels_path}: bad magic {lmagic}, expected {IDX_LABEL_MAGIC}")
    lraw = _read_exact(labels_path, ln, 8)
    labels = np.frombuffer(lraw, dtype=np.uint8, offset=8).astype(np.int64)
    if n != ln:
        raise DataFormatError(f"count mismatch: {n} images vs {ln} labels")
    return Dataset(images.astype(np.float32) / 255.0, labels, 10)


def load_cifar10_bin(paths) -> Dataset:
    """Parse CIFAR-10 binary batches: 3073-byte records, channel-major pixels."""
    chunks, labels = [], []
    for path in paths:
        with open(path, "rb") as fh:
            data = fh.read()
        if len(data) % CIFAR_RECORD:
            raise DataFormatError(
                f"{path}: size {len(data)} not a multiple of {CIFAR_RECORD}")
        rec = np.frombuffer(data, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        lab = rec[:, 0].astype(np.int64)
        if len(lab) and lab.max() > 9:
            raise DataFormatError(f"{path}: label byte {int(lab.max())} out of range 0..9")
        chunks.append(rec[:, 1:].reshape(-1, 3, 32, 32))
        labels.append(lab)
    images = (np.concatenate(chunks) if chunks else np.zeros((0, 3, 32, 32), np.uint8))
    labels = np.concatenate(labels) if labels else np.zeros(0, np.int64)
    return Dataset(images.astype(np.float32) / 255.0, labels, 10)


def make_blobs(classes, per_class, shape, spread, seed, centers_seed=0) -> Dataset:
    """Gaussian clusters at distinct random centers; fast training fixture.

    Centers depend only on centers_seed so splits drawn with different seeds
    sample the same class distribution.
    """
    if classes < 2:
        raise ValueError("make_blobs: need at least 2 classes")
    rng = np.random.default_rng(seed)
    shape = tuple(shape) if not np.isscalar(shape) else (1, 1, int(shape))
    centers = np.random.default_rng(centers_seed).normal(0.0, 1.0, size=(classes,) + shape)
    images, labels = [], []
    for k in range(classes):
        noise = rng.normal(0.0, spread, size=(per_class,) + shape)
        images.append(centers[k][None] + noise)
        labels.append(np.full(per_class, k, dtype=np.int64))
    return Dataset(np.concatenate(images).astype(np.float32),
                   np.concatenate(labels), classes)


def render_digits(per_class, seed, size=28) -> Dataset:
    """Render jittered digit glyphs 0-9 as grayscale images.

    Stand-in for handwritten digits when no IDX files are available: same
    shapes, 10 classes, intra-class variation from random shift/rotation/scale.
    """
    from PIL import Image, ImageDraw, ImageFont

    rng = np.random.default_rng(seed)
    font = ImageFont.load_default()
    images, labels = [], []
    for digit in range(10):
        for _ in range(per_class):
            img = Image.new("L", (size, size), 0)
            glyph = Image.new("L", (size, size), 0)
            draw = ImageDraw.Draw(glyph)
            draw.text((size // 2 - 4, size // 2 - 6), str(digit), fill=255, font=font)
            scale = 1.6 + 0.5 * rng.random()
            glyph = glyph.resize((int(size * scale), int(size * scale)),
                                 Image.BILINEAR)
            glyph = glyph.rotate(rng.uniform(-20, 20), resample=Image.BILINEAR)
            dx = int(rng.integers(-3, 4))
            dy = int(rng.integers(-3, 4))
            left = (glyph.width - size) // 2 + dx
            top = (glyph.height - size) // 2 + dy
            img.paste(glyph.crop((left, top, left + size, top + size)), (0, 0))
            arr = np.asarray(img, dtype=np.float32) / 255.0
            arr *= 0.7 + 0.3 * rng.random()       # stroke intensity variation
            arr += rng.normal(0.0, 0.02, arr.shape)
            images.append(np.clip(arr, 0.0, 1.0)[None])
            labels.append(digit)
    images = np.stack(images).astype(np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    perm = rng.permutation(len(labels))
    return Dataset(images[perm], labels[perm], 10)


def standardize(train: Dataset, *others):
    """Per-channel standardization using training-split statistics."""
    mean = train.images.mean(axis=(0, 2, 3), keepdims=True)
    std = train.images.std(axis=(0, 2, 3), keepdims=True)
    std = np.where(std == 0, 1.0, std)
    out = [Dataset(((d.images - mean) / std).astype(np.float32), d.labels, d.class_count)
           for d in (train,) + others]
    return out[0] if not others else tuple(out)


def _crop_flip(batch, rng):
    """Pad-4 random crop + horizontal flip."""
    n, c, h, w = batch.shape
    padded = np.pad(batch, ((0, 0), (0, 0), (4, 4), (4, 4)))
    out = np.empty_like(batch)
    offs = rng.integers(0, 9, size=(n, 2))
    flips = rng.random(n) < 0.5
    for i in range(n):
        oy, ox = offs[i]
        crop = padded[i, :, oy:oy + h, ox:ox + w]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out


def minibatches(ds: Dataset, batch, seed, augment="none"):
    """Seeded per-epoch shuffle; yields (images, labels) arrays."""
    if batch < 1:
        raise ValueError("minibatches: batch must be >= 1")
    if batch > len(ds):
        raise ValueError(f"minibatches: batch {batch} exceeds dataset size {len(ds)}")
    if augment not in ("none", "crop_flip"):
        raise ValueError(f"minibatches: unknown augment {augment!r}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ds))
    for start in range(0, len(ds), batch):
        idx = order[start:start + batch]
        images = ds.images[idx]
        if augment == "crop_flip":
            images = _crop_flip(images, rng)
        yield images, ds.labels[idx]
