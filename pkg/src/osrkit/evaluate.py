"""Closed-set accuracy, open-set AUROC, and multi-trial aggregation.

AUROC here is the probability that a known-class test example receives a
lower anomaly score than an unknown-class one, ties counted half. It is
computed from midranks in O(n log n) and must agree exactly with the
quadratic pairwise count, which the test suite enforces.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import model as M
from . import tensor as T
from .checkpoint import Checkpoint
from .data import DatasetBundle, SplitSpec, TrainStream, build_test_set, standardize
from .errors import ConfigError, ProtocolError
from .model import init_vit
from .openset import (ClassCenters, anomaly_score, calibrate_threshold, detect_embed,
                      extract_features, nearest_center_score)

SPACES = ("detection", "feature", "untrained")


@dataclass
class ScoredExample:
    score: float
    is_unknown: bool
    predicted: int
    original_label: int

    def __post_init__(self):
        if not np.isfinite(self.score):
            raise ProtocolError(f"non-finite anomaly score {self.score}")

    @property
    def tag(self) -> str:
        return "unknown" if self.is_unknown else "known"


@dataclass
class TrialReport:
    dataset: str
    protocol: str
    split_seed: int
    space: str
    accuracy: float
    auroc: float
    n_known_test: int
    n_unknown_test: int

    def to_json_dict(self) -> dict:
        return {
            "dataset": self.dataset, "protocol": self.protocol,
            "split_seed": self.split_seed, "space": self.space,
            "accuracy": self.accuracy, "auroc": self.auroc,
            "n_known_test": self.n_known_test, "n_unknown_test": self.n_unknown_test,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "TrialReport":
        return cls(dataset=d["dataset"], protocol=d["protocol"],
                   split_seed=int(d["split_seed"]), space=d["space"],
                   accuracy=float(d["accuracy"]), auroc=float(d["auroc"]),
                   n_known_test=int(d["n_known_test"]),
                   n_unknown_test=int(d["n_unknown_test"]))


def top1_accuracy(predictions, true_labels) -> float:
    predictions = np.asarray(predictions)
    true_labels = np.asarray(true_labels)
    if predictions.size == 0:
        raise ProtocolError("accuracy over an empty prediction list is undefined")
    if predictions.shape != true_labels.shape:
        raise ProtocolError(
            f"prediction/label count mismatch: {predictions.shape} vs {true_labels.shape}"
        )
    return float(np.mean(predictions == true_labels))


def _midranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks; tied values share the mean of their rank range."""
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values), dtype=np.float64)
    ordered = values[order]
    i = 0
    while i < len(ordered):
        j = i
        while j + 1 < len(ordered) and ordered[j + 1] == ordered[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auroc(scored: Sequence[ScoredExample]) -> float:
    """Probability a known example scores below an unknown one, ties at half."""
    scores = np.array([s.score for s in scored], dtype=np.float64)
    unknown = np.array([s.is_unknown for s in scored], dtype=bool)
    n_unknown = int(unknown.sum())
    n_known = len(scored) - n_unknown
    if n_known < 1 or n_unknown < 1:
        raise ProtocolError(
            f"AUROC needs both populations, got {n_known} known / {n_unknown} unknown"
        )
    ranks = _midranks(scores)
    u = ranks[unknown].sum() - n_unknown * (n_unknown + 1) / 2.0
    return float(u / (n_known * n_unknown))


def _feature_space_centers(bundle: DatasetBundle, split: SplitSpec, vit, config,
                           stats, batch_size: int) -> ClassCenters:
    """Per-class mean of the class-token features over the training split."""
    stream = TrainStream(bundle.train, split, batch_size, seed=0, stats=stats)
    feats_parts, label_parts = [], []
    for x, y in stream.full_pass():
        feats_parts.append(extract_features(x, vit, config, batch_size))
        label_parts.append(y)
    feats = np.concatenate(feats_parts)
    labels = np.concatenate(label_parts)
    centers = np.stack([feats[labels == k].mean(axis=0) for k in range(split.num_known)])
    return ClassCenters(centers, frozen=True)


def score_test_set(bundle: DatasetBundle, split: SplitSpec, ckpt: Checkpoint,
                   space: str, batch_size: int = 256):
    """Embed, predict, and score every test example in the chosen space.

    Returns (test_set, embeddings, predictions, scores). "detection" uses
    the trained detection head against the anchored centers; "feature"
    stays in the trained class-token space against training class means;
    "untrained" rebuilds the model at its recorded init seed and scores
    against the nearest untrained-feature class mean.
    """
    if ckpt.config.num_classes != split.num_known:
        raise ProtocolError(
            f"checkpoint was trained for {ckpt.config.num_classes} classes "
            f"but the split has {split.num_known}"
        )
    test_set = build_test_set(bundle.test, split, bundle.unknown_test)
    x = standardize(test_set.images, ckpt.norm_stats)
    embeddings, predictions, scores = score_images(x, bundle, split, ckpt, space,
                                                   batch_size)
    return test_set, embeddings, predictions, scores


def calibrate_tau(bundle: DatasetBundle, split: SplitSpec, ckpt: Checkpoint,
                  space: str = "detection", quantile: float = 0.95,
                  batch_size: int = 256) -> float:
    """Threshold at the given quantile of known training-data scores,
    computed through the same scoring path the trial will use."""
    stream = TrainStream(bundle.train, split, batch_size, seed=0, stats=ckpt.norm_stats)
    images = np.concatenate([x for x, _ in stream.full_pass()])
    scores = score_images(images, bundle, split, ckpt, space, batch_size)[2]
    return calibrate_threshold(scores, quantile)


def score_images(images_std: np.ndarray, bundle: DatasetBundle, split: SplitSpec,
                 ckpt: Checkpoint, space: str, batch_size: int = 256):
    """(embeddings, predictions, scores) for already-standardized images."""
    if space not in SPACES:
        raise ConfigError(f"unknown scoring space {space!r}, expected one of {SPACES}")
    config = ckpt.config
    if space == "untrained":
        vit = init_vit(config, seed=ckpt.init_seed, dtype=ckpt.vit.embedding.proj.dtype)
    else:
        vit = ckpt.vit
    features = extract_features(images_std, vit, config, batch_size)
    _, predictions = M.classify(features, vit.classifier)
    if space == "detection":
        if ckpt.head is None or ckpt.centers is None:
            raise ProtocolError("checkpoint holds no detection head/centers; "
                                "run stage 2 or choose another scoring space")
        with T.no_grad():
            embeddings = detect_embed(features, ckpt.head).data
        scores = anomaly_score(embeddings, predictions, ckpt.centers)
    elif space == "feature":
        centers = _feature_space_centers(bundle, split, vit, config,
                                         ckpt.norm_stats, batch_size)
        embeddings = features
        scores = anomaly_score(embeddings, predictions, centers)
    else:
        centers = _feature_space_centers(bundle, split, vit, config,
                                         ckpt.norm_stats, batch_size)
        embeddings = features
        scores = nearest_center_score(embeddings, centers)
    return embeddings, predictions, np.asarray(scores, dtype=np.float64)


def run_trial(bundle: DatasetBundle, split: SplitSpec, ckpt: Checkpoint,
              space: str = "detection", batch_size: int = 256) -> TrialReport:
    """Score the whole test stream and report accuracy plus AUROC.

    The detection threshold plays no part here; AUROC is threshold-free
    and accuracy is measured on the known-class subset only.
    """
    test_set, _, predictions, scores = score_test_set(bundle, split, ckpt, space,
                                                      batch_size)
    known_mask = ~test_set.is_unknown
    accuracy = top1_accuracy(predictions[known_mask], test_set.remapped[known_mask])
    scored = [ScoredExample(score=float(s), is_unknown=bool(u), predicted=int(p),
                            original_label=int(o))
              for s, u, p, o in zip(scores, test_set.is_unknown, predictions,
                                    test_set.original)]
    return TrialReport(
        dataset=split.dataset, protocol=split.protocol, split_seed=split.seed,
        space=space, accuracy=accuracy, auroc=auroc(scored),
        n_known_test=int(known_mask.sum()),
        n_unknown_test=int(test_set.is_unknown.sum()),
    )


@dataclass
class AggregateReport:
    dataset: str
    protocol: str
    space: str
    trials: list[TrialReport]
    mean_accuracy: float
    mean_auroc: float
    std_accuracy: float
    std_auroc: float


def aggregate(trials: Sequence[TrialReport]) -> AggregateReport:
    """Arithmetic mean over trials plus sample standard deviations."""
    if not trials:
        raise ProtocolError("nothing to aggregate")
    heads = {(t.dataset, t.protocol, t.space) for t in trials}
    if len(heads) > 1:
        raise ProtocolError(f"mixed trial kinds cannot be aggregated: {sorted(heads)}")
    accs = np.array([t.accuracy for t in trials])
    aurocs = np.array([t.auroc for t in trials])

    # identical trials aggregate exactly, without summation rounding
    def mean(v):
        return float(v[0]) if np.all(v == v[0]) else float(v.mean())

    def std(v):
        if len(v) < 2 or np.all(v == v[0]):
            return 0.0
        return float(np.std(v, ddof=1))

    dataset, protocol, space = next(iter(heads))
    return AggregateReport(
        dataset=dataset, protocol=protocol, space=space, trials=list(trials),
        mean_accuracy=mean(accs), mean_auroc=mean(aurocs),
        std_accuracy=std(accs), std_auroc=std(aurocs),
    )


def format_table(agg: AggregateReport) -> str:
    """Human-readable summary; metrics as percentages to one decimal."""
    lines = [
        f"dataset={agg.dataset} protocol={agg.protocol} space={agg.space}",
        f"{'seed':>6} {'accuracy%':>10} {'auroc%':>8}",
    ]
    for t in agg.trials:
        lines.append(f"{t.split_seed:>6} {100 * t.accuracy:>10.1f} {100 * t.auroc:>8.1f}")
    lines.append(
        f"{'mean':>6} {100 * agg.mean_accuracy:>10.1f} {100 * agg.mean_auroc:>8.1f}"
    )
    lines.append(
        f"{'std':>6} {100 * agg.std_accuracy:>10.1f} {100 * agg.std_auroc:>8.1f}"
    )
    return "\n".join(lines) + "\n"


def reports_tsv(agg: AggregateReport) -> str:
    """Machine-readable rows at full precision, one per trial plus a mean row."""
    lines = ["row\tseed\taccuracy\tauroc\tn_known\tn_unknown"]
    for t in agg.trials:
        lines.append(f"trial\t{t.split_seed}\t{t.accuracy!r}\t{t.auroc!r}"
                     f"\t{t.n_known_test}\t{t.n_unknown_test}")
    lines.append(f"mean\t-\t{agg.mean_accuracy!r}\t{agg.mean_auroc!r}\t-\t-")
    return "\n".join(lines) + "\n"


def export_embeddings(bundle: DatasetBundle, split: SplitSpec, ckpt: Checkpoint,
                      space: str, path, n_known: int = 4000, n_unknown: int = 800,
                      seed: int = 0, batch_size: int = 256) -> int:
    """Write sampled test-set embeddings for external plotting.

    One row per sampled example: openness tag, true label, predicted
    label, anomaly score, then the embedding values. Returns the row count.
    """
    test_set, embeddings, predictions, scores = score_test_set(bundle, split, ckpt,
                                                               space, batch_size)
    rng = np.random.default_rng(seed)
    known_idx = np.flatnonzero(~test_set.is_unknown)
    unknown_idx = np.flatnonzero(test_set.is_unknown)
    picked = np.concatenate([
        np.sort(rng.choice(known_idx, size=min(n_known, len(known_idx)), replace=False)),
        np.sort(rng.choice(unknown_idx, size=min(n_unknown, len(unknown_idx)), replace=False)),
    ])
    width = embeddings.shape[1]
    header = "tag\ttrue_label\tpred_label\tscore\t" + "\t".join(
        f"e{j:03d}" for j in range(width))
    lines = [header]
    for i in picked:
        tag = "unknown" if test_set.is_unknown[i] else "known"
        values = "\t".join(repr(float(v)) for v in embeddings[i])
        lines.append(f"{tag}\t{test_set.original[i]}\t{predictions[i]}"
                     f"\t{scores[i]!r}\t{values}")
    Path(path).write_text("\n".join(lines) + "\n")
    return len(picked)


def save_report(report: TrialReport, path, tau: Optional[float] = None) -> None:
    payload = report.to_json_dict()
    if tau is not None:
        payload["tau"] = tau
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def load_report(path) -> TrialReport:
    return TrialReport.from_json_dict(json.loads(Path(path).read_text()))
