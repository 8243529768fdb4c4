"""Dataset ingestion and the open-set split protocol.

Two bit-exact file formats are first-class citizens here:

* IDX (big-endian): bytes 0-1 zero, byte 2 the element type (0x08 =
  unsigned byte), byte 3 the dimension count, then one big-endian u32
  per dimension, then the raw payload. Images use 3 dims (count, rows,
  cols), labels use 1.
* CIFAR10 binary: a flat run of 3073-byte records, 1 label byte then
  3072 pixel bytes stored channel-planar (1024 R, 1024 G, 1024 B),
  row-major inside each plane.

Splits partition a dataset's classes into known and unknown sets as a
deterministic function of (protocol, seed). Training streams only ever
carry known classes with labels remapped to 0..K-1; test streams carry
everything, tagged.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .errors import ConfigError, FormatError, ProtocolError

IDX_UNSIGNED_BYTE = 0x08
CIFAR_RECORD = 3073      # 1 label byte + 32*32*3 pixels
CIFAR100_RECORD = 3074   # coarse + fine label bytes + pixels


@dataclass
class ImageSet:
    """Images as (n, H, W, C) float32 in [0, 1] plus integer labels."""

    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ConfigError(f"images must be (n, H, W, C), got {self.images.shape}")
        if self.labels.shape != (len(self.images),):
            raise ConfigError(
                f"label count {self.labels.shape} does not match {len(self.images)} images"
            )

    def __len__(self) -> int:
        return len(self.images)

    def restricted_to(self, classes) -> "ImageSet":
        mask = np.isin(self.labels, list(classes))
        return ImageSet(self.images[mask], self.labels[mask])


# -- IDX ----------------------------------------------------------------------


def _idx_header(raw: bytes, path, want_ndim: int) -> tuple[tuple[int, ...], int]:
    header_len = 4 + 4 * want_ndim
    if len(raw) < header_len:
        raise FormatError(f"{path}: truncated header, file ends at byte {len(raw)}")
    if raw[0] != 0 or raw[1] != 0:
        raise FormatError(f"{path}: bad magic {raw[:4].hex()} at byte 0")
    if raw[2] != IDX_UNSIGNED_BYTE:
        raise FormatError(f"{path}: unsupported element type 0x{raw[2]:02x} at byte 2")
    if raw[3] != want_ndim:
        raise FormatError(f"{path}: expected {want_ndim} dimensions, got {raw[3]} at byte 3")
    dims = tuple(int.from_bytes(raw[4 + 4 * i:8 + 4 * i], "big") for i in range(want_ndim))
    return dims, header_len


def _idx_payload(raw: bytes, path, dims: tuple[int, ...], header_len: int) -> np.ndarray:
    expected = header_len + int(np.prod(dims))
    if len(raw) != expected:
        raise FormatError(
            f"{path}: payload size mismatch, expected {expected} bytes, "
            f"file has {len(raw)} (divergence at byte {min(len(raw), expected)})"
        )
    return np.frombuffer(raw, dtype=np.uint8, offset=header_len).reshape(dims)


def load_idx_images(path) -> np.ndarray:
    """IDX image file to (n, H, W, 1) float32 scaled into [0, 1]."""
    raw = Path(path).read_bytes()
    dims, header_len = _idx_header(raw, path, want_ndim=3)
    pixels = _idx_payload(raw, path, dims, header_len)
    return (pixels.astype(np.float32) / 255.0)[..., None]


def load_idx_labels(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    dims, header_len = _idx_header(raw, path, want_ndim=1)
    return _idx_payload(raw, path, dims, header_len).astype(np.int64)


def load_idx(images_path, labels_path) -> ImageSet:
    images = load_idx_images(images_path)
    labels = load_idx_labels(labels_path)
    if len(images) != len(labels):
        raise FormatError(
            f"{images_path} holds {len(images)} images but {labels_path} "
            f"holds {len(labels)} labels"
        )
    return ImageSet(images, labels)


def write_idx_images(path, images: np.ndarray) -> None:
    """Inverse of load_idx_images; takes uint8 (n, H, W)."""
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    header = bytes([0, 0, IDX_UNSIGNED_BYTE, 3])
    header += n.to_bytes(4, "big") + rows.to_bytes(4, "big") + cols.to_bytes(4, "big")
    Path(path).write_bytes(header + images.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    header = bytes([0, 0, IDX_UNSIGNED_BYTE, 1]) + len(labels).to_bytes(4, "big")
    Path(path).write_bytes(header + labels.tobytes())


# -- CIFAR binaries -----------------------------------------------------------


def load_cifar_binary(path) -> ImageSet:
    """One CIFAR10 batch file to 32x32 RGB images in [0, 1]."""
    raw = Path(path).read_bytes()
    if len(raw) == 0 or len(raw) % CIFAR_RECORD:
        raise FormatError(
            f"{path}: size {len(raw)} is not a positive multiple of {CIFAR_RECORD}"
        )
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    planes = records[:, 1:].reshape(-1, 3, 32, 32)
    images = planes.transpose(0, 2, 3, 1).astype(np.float32) / 255.0
    return ImageSet(np.ascontiguousarray(images), labels)


def write_cifar_binary(path, images: np.ndarray, labels: np.ndarray) -> None:
    """Inverse of load_cifar_binary; takes uint8 (n, 32, 32, 3) RGB."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    planes = images.transpose(0, 3, 1, 2).reshape(len(images), -1)
    records = np.concatenate([labels[:, None], planes], axis=1)
    Path(path).write_bytes(records.tobytes())


def load_cifar100_binary(path) -> ImageSet:
    """CIFAR100 batch file (3074-byte records); labels are the fine classes."""
    raw = Path(path).read_bytes()
    if len(raw) == 0 or len(raw) % CIFAR100_RECORD:
        raise FormatError(
            f"{path}: size {len(raw)} is not a positive multiple of {CIFAR100_RECORD}"
        )
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR100_RECORD)
    labels = records[:, 1].astype(np.int64)
    planes = records[:, 2:].reshape(-1, 3, 32, 32)
    images = planes.transpose(0, 2, 3, 1).astype(np.float32) / 255.0
    return ImageSet(np.ascontiguousarray(images), labels)


def concat_image_sets(sets) -> ImageSet:
    return ImageSet(np.concatenate([s.images for s in sets], axis=0),
                    np.concatenate([s.labels for s in sets], axis=0))


# -- optional loaders ---------------------------------------------------------


def load_svhn_mat(path) -> ImageSet:
    """Cropped-digits .mat layout: X is (32, 32, 3, n), y is (n, 1) with 10 for digit 0."""
    from scipy.io import loadmat

    blob = loadmat(str(path))
    images = blob["X"].transpose(3, 0, 1, 2).astype(np.float32) / 255.0
    labels = blob["y"].reshape(-1).astype(np.int64) % 10
    return ImageSet(np.ascontiguousarray(images), labels)


def load_image_folders(root) -> ImageSet:
    """Directory of per-class subfolders of same-size images.

    Classes are assigned 0..K-1 in sorted folder-name order. Needs pillow.
    """
    try:
        from PIL import Image
    except ImportError as exc:
        raise ConfigError("loading image folders requires the 'pillow' extra") from exc
    root = Path(root)
    folders = sorted(p for p in root.iterdir() if p.is_dir())
    if not folders:
        raise ConfigError(f"{root} contains no class folders")
    images, labels = [], []
    for index, folder in enumerate(folders):
        for file in sorted(folder.iterdir()):
            arr = np.asarray(Image.open(file).convert("RGB"), dtype=np.float32) / 255.0
            images.append(arr)
            labels.append(index)
    return ImageSet(np.stack(images), np.asarray(labels, dtype=np.int64))


# -- splits -------------------------------------------------------------------

PROTOCOLS = {
    "six-four": {"universe": 10, "known": 6, "plus": None},
    "cifar-plus-10": {"universe": 10, "known": 4, "plus": ("cifar100", 100, 10)},
    "cifar-plus-50": {"universe": 10, "known": 4, "plus": ("cifar100", 100, 50)},
    "tiny-imagenet-20": {"universe": 200, "known": 20, "plus": None},
}


@dataclass(frozen=True)
class SplitSpec:
    """One experimental trial: who is known, who is unknown, and how labels remap."""

    dataset: str
    protocol: str
    seed: int
    known: tuple[int, ...]
    unknown: tuple[int, ...]
    unknown_dataset: Optional[str] = None

    def __post_init__(self):
        # plus-N protocols draw unknowns from another label universe, so
        # only same-universe splits can collide
        if self.unknown_dataset is None and set(self.known) & set(self.unknown):
            raise ConfigError("known and unknown class sets overlap")

    @property
    def num_known(self) -> int:
        return len(self.known)

    @property
    def remap(self) -> dict[int, int]:
        """Original label to dense 0..K-1, ascending original-label order."""
        return {orig: i for i, orig in enumerate(sorted(self.known))}

    def to_json_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "protocol": self.protocol,
            "seed": self.seed,
            "known_classes": list(self.known),
            "unknown_classes": list(self.unknown),
            "unknown_dataset": self.unknown_dataset,
            "remap": {str(k): v for k, v in self.remap.items()},
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "SplitSpec":
        return cls(
            dataset=d["dataset"], protocol=d["protocol"], seed=int(d["seed"]),
            known=tuple(int(c) for c in d["known_classes"]),
            unknown=tuple(int(c) for c in d["unknown_classes"]),
            unknown_dataset=d.get("unknown_dataset"),
        )


def make_split(dataset_id: str, protocol: str, seed: int) -> SplitSpec:
    """Seeded class partition for one trial; same (protocol, seed) in, same split out."""
    if protocol not in PROTOCOLS:
        raise ConfigError(f"unknown protocol {protocol!r}, expected one of {sorted(PROTOCOLS)}")
    rule = PROTOCOLS[protocol]
    rng = np.random.default_rng(seed)
    order = rng.permutation(rule["universe"])
    known = tuple(sorted(int(c) for c in order[: rule["known"]]))
    if rule["plus"] is None:
        unknown = tuple(sorted(int(c) for c in order[rule["known"]:]))
        unknown_dataset = None
    else:
        unknown_dataset, plus_universe, plus_count = rule["plus"]
        unknown = tuple(sorted(int(c) for c in
                               rng.choice(plus_universe, size=plus_count, replace=False)))
    return SplitSpec(dataset=dataset_id, protocol=protocol, seed=seed,
                     known=known, unknown=unknown, unknown_dataset=unknown_dataset)


def save_split(split: SplitSpec, path) -> None:
    Path(path).write_text(json.dumps(split.to_json_dict(), indent=2, sort_keys=True) + "\n")


def load_split(path) -> SplitSpec:
    return SplitSpec.from_json_dict(json.loads(Path(path).read_text()))


# -- normalization and streams -------------------------------------------------


@dataclass(frozen=True)
class NormStats:
    """Scalar pixel mean/std measured on the known-class training images."""

    mean: float
    std: float


def training_stats(images: np.ndarray) -> NormStats:
    mean = float(images.mean())
    std = float(images.std())
    return NormStats(mean=mean, std=max(std, 1e-6))


def standardize(images: np.ndarray, stats: NormStats) -> np.ndarray:
    return ((images - stats.mean) / stats.std).astype(np.float32)


def remap_labels(labels: np.ndarray, split: SplitSpec) -> np.ndarray:
    table = split.remap
    lookup = np.full(int(max(table) + 1), -1, dtype=np.int64)
    for orig, dense in table.items():
        lookup[orig] = dense
    return lookup[labels]


def augment_batch(x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Pad-2 random crop plus coin-flip horizontal mirror, per sample."""
    n, h, w, _ = x.shape
    padded = np.pad(x, ((0, 0), (2, 2), (2, 2), (0, 0)))
    out = np.empty_like(x)
    offsets = rng.integers(0, 5, size=(n, 2))
    flips = rng.random(n) < 0.5
    for i in range(n):
        dy, dx = offsets[i]
        crop = padded[i, dy:dy + h, dx:dx + w]
        out[i] = crop[:, ::-1] if flips[i] else crop
    return out


class TrainStream:
    """Seeded, shuffled minibatches of known-class examples, labels remapped.

    A guard re-checks every batch: nothing outside 0..K-1 can reach a
    training step.
    """

    def __init__(self, data: ImageSet, split: SplitSpec, batch_size: int, seed: int,
                 stats: Optional[NormStats] = None, augment: bool = False):
        known = data.restricted_to(split.known)
        if len(known) == 0:
            raise ProtocolError("training split selects zero examples")
        self.images = known.images
        self.labels = remap_labels(known.labels, split)
        self.num_known = split.num_known
        self.batch_size = batch_size
        self.seed = seed
        self.augment = augment
        self.stats = stats if stats is not None else training_stats(self.images)

    @property
    def n(self) -> int:
        return len(self.images)

    def epoch(self, index: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        rng = np.random.default_rng([self.seed, 104729, index])
        order = rng.permutation(self.n)
        for start in range(0, self.n, self.batch_size):
            idx = order[start:start + self.batch_size]
            y = self.labels[idx]
            if y.min() < 0 or y.max() >= self.num_known:
                raise ProtocolError("unknown-class example reached the training stream")
            x = standardize(self.images[idx], self.stats)
            if self.augment:
                x = augment_batch(x, rng)
            yield x, y

    def full_pass(self, batch_size: Optional[int] = None):
        """Dataset-order batches without shuffling or augmentation."""
        size = batch_size or self.batch_size
        for start in range(0, self.n, size):
            sl = slice(start, start + size)
            yield standardize(self.images[sl], self.stats), self.labels[sl]


@dataclass
class DatasetBundle:
    """Everything one trial consumes: train split, test split, and (for
    plus-N protocols) the foreign test set the unknowns come from."""

    train: ImageSet
    test: ImageSet
    unknown_test: Optional[ImageSet] = None


@dataclass
class TestSet:
    """Every test example with its openness tag.

    ``remapped`` holds the dense label for known examples and -1 for
    unknown ones; ``original`` keeps the source dataset's label either way.
    """

    images: np.ndarray
    original: np.ndarray
    remapped: np.ndarray
    is_unknown: np.ndarray

    def __len__(self) -> int:
        return len(self.images)


def build_test_set(test: ImageSet, split: SplitSpec,
                   unknown_source: Optional[ImageSet] = None) -> TestSet:
    """Known-class test examples plus unknown-class ones, tagged.

    For plus-N protocols the unknown examples come from a second dataset,
    passed as ``unknown_source``; otherwise they come from the same test set.
    """
    known = test.restricted_to(split.known)
    if split.unknown_dataset is not None:
        if unknown_source is None:
            raise ProtocolError(
                f"protocol {split.protocol} draws unknowns from "
                f"{split.unknown_dataset}, but no unknown source was provided"
            )
        unknown = unknown_source.restricted_to(split.unknown)
    else:
        unknown = test.restricted_to(split.unknown)
    images = np.concatenate([known.images, unknown.images], axis=0)
    original = np.concatenate([known.labels, unknown.labels], axis=0)
    remapped = np.concatenate([
        remap_labels(known.labels, split),
        np.full(len(unknown), -1, dtype=np.int64),
    ])
    is_unknown = np.concatenate([
        np.zeros(len(known), dtype=bool),
        np.ones(len(unknown), dtype=bool),
    ])
    return TestSet(images=images, original=original, remapped=remapped, is_unknown=is_unknown)
