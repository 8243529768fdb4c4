"""Procedural 10-class glyph corpus in the 28x28 grayscale IDX format.

A self-contained stand-in for digit data when no real dataset is on
disk: ten geometric glyph families rendered with per-sample jitter in
position, scale, intensity, and noise. The families are chosen to be
pairwise distant (different stroke counts, topology, orientation, and
spatial layout), so any known/unknown partition keeps the classes
separable. Written through the IDX writers so the files exercise the
same loader path as real data.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import ImageSet, write_idx_images, write_idx_labels

SIDE = 28
NUM_CLASSES = 10


def _grid(cx: float, cy: float):
    yy, xx = np.mgrid[0:SIDE, 0:SIDE].astype(np.float64)
    return yy - cy, xx - cx


def _render(label: int, rng: np.random.Generator) -> np.ndarray:
    cy = 13.5 + rng.uniform(-2.0, 2.0)
    cx = 13.5 + rng.uniform(-2.0, 2.0)
    scale = rng.uniform(0.85, 1.1)
    radius = 8.5 * scale
    dy, dx = _grid(cx, cy)
    rr = np.hypot(dy, dx)

    if label == 0:      # filled disk
        mask = rr < 0.8 * radius
    elif label == 1:    # thin ring
        mask = (rr < radius) & (rr > 0.7 * radius)
    elif label == 2:    # plus sign, thin arms
        width = 1.3 * scale
        span = np.maximum(np.abs(dy), np.abs(dx)) < radius
        mask = span & ((np.abs(dx) < width) | (np.abs(dy) < width))
    elif label == 3:    # single fat horizontal bar, full width
        mask = (np.abs(dy) < 3.2 * scale) & (np.abs(dx) < 1.45 * radius)
    elif label == 4:    # column of three small disks
        small = 0.3 * radius
        mask = np.zeros_like(rr, dtype=bool)
        for offset in (-0.75 * radius, 0.0, 0.75 * radius):
            mask |= np.hypot(dy - offset, dx) < small
    elif label == 5:    # filled triangle, apex up
        mask = (dy > -radius) & (dy < radius) & (np.abs(dx) < 0.62 * (dy + radius))
    elif label == 6:    # bold square outline
        edge = np.maximum(np.abs(dy), np.abs(dx))
        mask = (edge < radius) & (edge > 0.62 * radius)
    elif label == 7:    # four corner patches
        off = 0.78 * radius
        half = 2.3 * scale
        mask = (np.abs(np.abs(dy) - off) < half) & (np.abs(np.abs(dx) - off) < half)
    elif label == 8:    # single thick diagonal stroke
        mask = (np.abs(dx - dy) < 2.6 * scale) & (rr < 1.3 * radius)
    elif label == 9:    # fine checkerboard
        period = 3.0 * scale
        span = np.maximum(np.abs(dy), np.abs(dx)) < 1.1 * radius
        mask = span & ((np.floor(dy / period) + np.floor(dx / period)) % 2 == 0)
    else:
        raise ValueError(f"glyph class {label} out of range")

    intensity = rng.uniform(0.7, 1.0)
    image = mask.astype(np.float64) * intensity
    image += rng.normal(0.0, rng.uniform(0.02, 0.05), size=image.shape)
    return np.clip(image, 0.0, 1.0)


def make_glyph_set(per_class: int, seed: int) -> ImageSet:
    """Balanced corpus, example order shuffled so files look natural."""
    rng = np.random.default_rng(seed)
    total = per_class * NUM_CLASSES
    images = np.empty((total, SIDE, SIDE, 1), dtype=np.float32)
    labels = np.repeat(np.arange(NUM_CLASSES, dtype=np.int64), per_class)
    order = rng.permutation(total)
    labels = labels[order]
    for i, label in enumerate(labels):
        images[i, :, :, 0] = _render(int(label), rng)
    return ImageSet(images, labels)


def write_glyph_corpus(directory, train_per_class: int, test_per_class: int,
                       seed: int) -> dict[str, Path]:
    """Write train/test IDX files with the canonical digit-corpus names."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {
        "train_images": directory / "train-images-idx3-ubyte",
        "train_labels": directory / "train-labels-idx1-ubyte",
        "test_images": directory / "t10k-images-idx3-ubyte",
        "test_labels": directory / "t10k-labels-idx1-ubyte",
    }
    train = make_glyph_set(train_per_class, seed)
    test = make_glyph_set(test_per_class, seed + 1)
    write_idx_images(paths["train_images"], np.round(train.images[..., 0] * 255))
    write_idx_labels(paths["train_labels"], train.labels)
    write_idx_images(paths["test_images"], np.round(test.images[..., 0] * 255))
    write_idx_labels(paths["test_labels"], test.labels)
    return paths
