"""Binary checkpoint container.

Layout, all integers little-endian:

    bytes 0..7    magic ``OSRCKPT\\x00``
    bytes 8..11   u32 format version (currently 1)
    bytes 12..15  u32 header length in bytes
    header        UTF-8 JSON: model config, seeds, normalization stats,
                  stage tag, and the ordered tensor manifest (name, shape)
    blobs         one per manifest entry, row-major little-endian f32

Saving a loaded checkpoint reproduces the file byte for byte: the header
is serialized with sorted keys and the blobs are written in manifest
order at fixed f32 precision.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .data import NormStats
from .errors import FormatError
from .model import ModelConfig, VitParams, init_vit
from .openset import ClassCenters, DetectionHeadParams, init_detection_head

MAGIC = b"OSRCKPT\x00"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    config: ModelConfig
    vit: VitParams
    head: Optional[DetectionHeadParams]
    centers: Optional[ClassCenters]
    init_seed: int
    head_seed: Optional[int]
    norm_stats: NormStats
    stage: str


def _named_blobs(vit: VitParams, head, centers):
    yield from vit.named_parameters()
    if head is not None:
        yield from head.named_parameters()
    if centers is not None:
        yield "centers", centers


def save_checkpoint(path, config: ModelConfig, vit: VitParams,
                    head: Optional[DetectionHeadParams] = None,
                    centers: Optional[ClassCenters] = None, *,
                    init_seed: int, head_seed: Optional[int] = None,
                    norm_stats: NormStats, stage: str) -> None:
    manifest = []
    payload = []
    for name, item in _named_blobs(vit, head, centers):
        array = item.centers if isinstance(item, ClassCenters) else item.data
        manifest.append([name, list(array.shape)])
        payload.append(np.ascontiguousarray(array, dtype="<f4").tobytes())
    header = {
        "format_version": FORMAT_VERSION,
        "model": config.to_dict(),
        "init_seed": init_seed,
        "head_seed": head_seed,
        "norm_mean": norm_stats.mean,
        "norm_std": norm_stats.std,
        "stage": stage,
        "tensors": manifest,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(FORMAT_VERSION.to_bytes(4, "little"))
        fh.write(len(header_bytes).to_bytes(4, "little"))
        fh.write(header_bytes)
        for blob in payload:
            fh.write(blob)


def load_checkpoint(path, precision: str = "f32") -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:8] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic at byte 0)")
    version = int.from_bytes(raw[8:12], "little")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    header_len = int.from_bytes(raw[12:16], "little")
    if len(raw) < 16 + header_len:
        raise FormatError(f"{path}: truncated header, file ends at byte {len(raw)}")
    try:
        header = json.loads(raw[16:16 + header_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header: {exc}") from exc

    config = ModelConfig.from_dict(header["model"])
    dtype = np.float32 if precision == "f32" else np.float64

    offset = 16 + header_len
    blobs: dict[str, np.ndarray] = {}
    for name, shape in header["tensors"]:
        count = int(np.prod(shape)) if shape else 1
        end = offset + 4 * count
        if end > len(raw):
            raise FormatError(
                f"{path}: blob {name!r} truncated, needs bytes up to {end}, "
                f"file ends at {len(raw)}"
            )
        blobs[name] = np.frombuffer(raw, dtype="<f4", count=count,
                                    offset=offset).reshape(shape)
        offset = end
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes after blobs")

    def fetch(name: str, like: np.ndarray) -> np.ndarray:
        if name not in blobs:
            raise FormatError(f"{path}: missing tensor {name!r}")
        blob = blobs.pop(name)
        if blob.shape != like.shape:
            raise FormatError(
                f"{path}: tensor {name!r} has shape {blob.shape}, "
                f"config implies {like.shape}"
            )
        return blob.astype(dtype)

    vit = init_vit(config, seed=0, dtype=dtype)
    for name, tensor in vit.named_parameters():
        tensor.data = fetch(name, tensor.data)
        tensor.zero_grad()

    head = None
    if "detect.weight" in blobs:
        head = init_detection_head(config, seed=0, dtype=dtype)
        for name, tensor in head.named_parameters():
            tensor.data = fetch(name, tensor.data)
            tensor.zero_grad()

    centers = None
    if "centers" in blobs:
        want = np.empty((config.num_classes, config.embed_dim))
        centers = ClassCenters(fetch("centers", want), frozen=True)

    if blobs:
        raise FormatError(f"{path}: unexpected tensors {sorted(blobs)}")

    return Checkpoint(
        config=config, vit=vit, head=head, centers=centers,
        init_seed=int(header["init_seed"]),
        head_seed=None if header.get("head_seed") is None else int(header["head_seed"]),
        norm_stats=NormStats(mean=float(header["norm_mean"]), std=float(header["norm_std"])),
        stage=str(header["stage"]),
    )
