"""Open-set image recognition toolkit.

A compact vision transformer is trained for closed-set classification,
then a linear detection head learns to pull known-class representations
toward fixed per-class centers; at test time the squared distance to the
predicted class's center is the anomaly score and a threshold decides
between a known label and rejection.
"""

from .data import (DatasetBundle, ImageSet, NormStats, SplitSpec, TrainStream,
                   build_test_set, load_cifar_binary, load_idx, make_split)
from .errors import (ConfigError, ContractError, FormatError, OsrKitError,
                     ProtocolError, ShapeError)
from .evaluate import (ScoredExample, TrialReport, aggregate, auroc, export_embeddings,
                       run_trial, top1_accuracy)
from .model import ModelConfig, VitParams, classify, forward_features, init_vit
from .openset import (ClassCenters, DetectionHeadParams, OsrDecision, anchor_centers,
                      anomaly_score, calibrate_threshold, center_loss, decide,
                      detect_embed, init_detection_head, nearest_center_score)
from .tensor import Tensor, no_grad, set_deterministic
from .train import TrainConfig, cross_entropy, train_stage1, train_stage2

__version__ = "0.1.0"

__all__ = [
    "ClassCenters", "ConfigError", "ContractError", "DatasetBundle",
    "DetectionHeadParams", "FormatError", "ImageSet", "ModelConfig", "NormStats",
    "OsrDecision", "OsrKitError", "ProtocolError", "ScoredExample", "ShapeError",
    "SplitSpec", "Tensor", "TrainConfig", "TrainStream", "TrialReport", "VitParams",
    "aggregate", "anchor_centers", "anomaly_score", "auroc", "build_test_set",
    "calibrate_threshold", "center_loss", "classify", "cross_entropy", "decide",
    "detect_embed", "export_embeddings", "forward_features", "init_detection_head",
    "init_vit", "load_cifar_binary", "load_idx", "make_split", "no_grad",
    "run_trial", "set_deterministic", "top1_accuracy", "train_stage1", "train_stage2",
]
