"""Detection head, class centers, anomaly scoring, and the rejection rule.

The detection head is one linear layer mapping the image feature into a
detection space of the same width. Each known class gets a fixed center:
the mean of its training representations under the freshly initialized
head. Training later pulls representations toward those centers; test
examples far from the center of their predicted class get rejected.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from . import model as M
from . import tensor as T
from .errors import ContractError, ProtocolError
from .model import ModelConfig, VitParams, truncated_normal
from .tensor import Tensor


@dataclass
class DetectionHeadParams:
    weight: Tensor  # (embed_dim, embed_dim)
    bias: Tensor    # (embed_dim,)

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield "detect.weight", self.weight
        yield "detect.bias", self.bias


@dataclass
class ClassCenters:
    """One frozen center per known class, indexed by remapped label."""

    centers: np.ndarray  # (num_classes, embed_dim)
    frozen: bool = True

    def __post_init__(self):
        arr = np.asarray(self.centers)
        arr.setflags(write=False)
        object.__setattr__(self, "centers", arr)

    @property
    def num_classes(self) -> int:
        return self.centers.shape[0]


@dataclass
class OsrDecision:
    verdict: str            # "known" | "unknown"
    label: Optional[int]    # present iff known
    score: float
    threshold: float

    def __post_init__(self):
        if (self.verdict == "unknown") != (self.score > self.threshold):
            raise ContractError(
                f"inconsistent decision: verdict={self.verdict} "
                f"score={self.score} threshold={self.threshold}"
            )


def init_detection_head(config: ModelConfig, seed: int, dtype=np.float32) -> DetectionHeadParams:
    rng = np.random.default_rng(seed)
    d = config.embed_dim
    return DetectionHeadParams(
        weight=Tensor(truncated_normal(rng, (d, d)).astype(dtype), requires_grad=True),
        bias=Tensor(np.zeros(d, dtype=dtype), requires_grad=True),
    )


def detect_embed(feature, head: DetectionHeadParams) -> Tensor:
    """Map a feature (or batch of features) into the detection space."""
    if not isinstance(feature, Tensor):
        feature = T.constant(np.asarray(feature, dtype=head.weight.dtype))
    return T.add(T.matmul(feature, head.weight), head.bias)


def anchor_centers(images: np.ndarray, labels: np.ndarray, vit: VitParams,
                   config: ModelConfig, head: DetectionHeadParams,
                   batch_size: int = 256) -> ClassCenters:
    """Fix each class center at the mean detection-space representation of
    its training examples, computed with the head in its initial state.

    The centers never move again; stage-2 training pulls representations
    toward them instead.
    """
    features = extract_features(images, vit, config, batch_size)
    return anchor_centers_from_features(features, labels, head, config.num_classes)


def anchor_centers_from_features(features: np.ndarray, labels: np.ndarray,
                                 head: DetectionHeadParams, num_classes: int) -> ClassCenters:
    labels = np.asarray(labels)
    with T.no_grad():
        reps = detect_embed(features, head).data
    centers = np.empty((num_classes, reps.shape[-1]), dtype=np.float64)
    for k in range(num_classes):
        mask = labels == k
        if not mask.any():
            raise ProtocolError(f"cannot anchor centers: class {k} has no training examples")
        centers[k] = reps[mask].mean(axis=0, dtype=np.float64)
    return ClassCenters(centers.astype(reps.dtype), frozen=True)


def extract_features(images: np.ndarray, vit: VitParams, config: ModelConfig,
                     batch_size: int = 256) -> np.ndarray:
    """Feature-extractor outputs for a stack of images, graph-free."""
    chunks = []
    with T.no_grad():
        for start in range(0, len(images), batch_size):
            chunks.append(M.forward_features(images[start:start + batch_size], vit, config).data)
    return np.concatenate(chunks, axis=0)


def center_loss(reps: Tensor, labels: np.ndarray, centers: ClassCenters) -> Tensor:
    """Mean squared Euclidean distance from each representation to the
    center of its labeled class. Gradients reach the representations
    only; centers enter as constants."""
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=-1) >= centers.num_classes:
        raise ContractError(
            f"labels must lie in 0..{centers.num_classes - 1}, "
            f"got range [{labels.min()}, {labels.max()}]"
        )
    targets = T.constant(centers.centers[labels].astype(reps.dtype))
    diff = T.sub(reps, targets)
    return (diff * diff).sum(axis=-1).mean()


def anomaly_score(rep: np.ndarray, predicted: np.ndarray, centers: ClassCenters):
    """Squared distance to the predicted class's center."""
    rep = np.asarray(rep, dtype=np.float64)
    diff = rep - centers.centers[predicted]
    return np.sum(diff * diff, axis=-1)


def nearest_center_score(rep: np.ndarray, centers: ClassCenters):
    """Squared distance to the closest center of any class."""
    rep = np.asarray(rep, dtype=np.float64)
    best = None
    for k in range(centers.num_classes):
        diff = rep - centers.centers[k]
        d = np.sum(diff * diff, axis=-1)
        best = d if best is None else np.minimum(best, d)
    return best


def decide(image: np.ndarray, vit: VitParams, config: ModelConfig,
           head: DetectionHeadParams, centers: ClassCenters, tau: float) -> OsrDecision:
    """Score one image and accept or reject it.

    Rejection requires the score to strictly exceed the threshold; a
    score exactly at the threshold is accepted as known.
    """
    if not np.isfinite(tau):
        raise ContractError(f"threshold must be finite, got {tau}")
    with T.no_grad():
        feature = M.forward_features(image, vit, config)
        _, predicted = M.classify(feature, vit.classifier)
        rep = detect_embed(feature, head).data
    label = int(predicted)
    score = float(anomaly_score(rep, label, centers))
    if score > tau:
        return OsrDecision(verdict="unknown", label=None, score=score, threshold=tau)
    return OsrDecision(verdict="known", label=label, score=score, threshold=tau)


def calibrate_threshold(scores, acceptance: float = 0.95) -> float:
    """Empirical quantile (linear interpolation) of known-data scores.

    ``acceptance`` is the fraction of calibration scores that fall at or
    below the returned threshold; 1.0 returns the maximum.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ProtocolError("cannot calibrate a threshold from an empty score list")
    if not 0.0 < acceptance <= 1.0:
        raise ContractError(f"acceptance quantile must lie in (0, 1], got {acceptance}")
    return float(np.quantile(scores, acceptance))
