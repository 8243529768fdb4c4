"""Two-stage optimization.

Stage 1 trains the whole transformer plus its classifier head with
cross-entropy on the known classes. Stage 2 freezes everything from
stage 1, anchors the class centers, and trains only the detection head
to pull representations toward those centers. Because the feature
extractor is frozen in stage 2, features are computed once over the
training set and the head trains on the cached matrix; the math is
identical and the pass is linear-head cheap.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import model as M
from . import tensor as T
from .errors import ConfigError, ContractError, ProtocolError
from .model import ModelConfig, VitParams
from .openset import ClassCenters, DetectionHeadParams, center_loss, detect_embed
from .tensor import Tensor

_DTYPES = {"f32": np.float32, "f64": np.float64}


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 256
    steps_per_stage: int = 4590
    max_epochs: Optional[int] = None
    plateau_patience: int = 2
    plateau_rel_tol: float = 1e-3
    seed: int = 0
    precision: str = "f32"
    deterministic: bool = False
    augment: bool = False
    # stage 2 runs on cached features and is orders of magnitude cheaper per
    # step, so it usually wants a gentler rate and far more epochs
    stage2_learning_rate: Optional[float] = None
    stage2_max_epochs: Optional[int] = None

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.learning_rate}")
        if self.stage2_learning_rate is not None and self.stage2_learning_rate <= 0:
            raise ConfigError(
                f"stage-2 learning rate must be positive, got {self.stage2_learning_rate}"
            )
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.steps_per_stage < 1:
            raise ConfigError(f"steps_per_stage must be >= 1, got {self.steps_per_stage}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.precision not in _DTYPES:
            raise ConfigError(f"precision must be one of {sorted(_DTYPES)}, got {self.precision!r}")

    @property
    def dtype(self):
        return _DTYPES[self.precision]


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of the true classes, straight from
    logits through log-sum-exp so a confident correct prediction costs
    exactly its vanishing tail and never hits log(0)."""
    if logits.ndim == 1:
        logits = logits.reshape((1,) + logits.shape)
        labels = [labels]
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ContractError(f"expected {n} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise ContractError(f"labels must lie in 0..{k - 1}")
    log_probs = T.log_softmax(logits, axis=-1)
    onehot = np.zeros((n, k), dtype=logits.dtype)
    onehot[np.arange(n), labels] = 1.0
    return T.neg((log_probs * T.constant(onehot)).sum(axis=-1).mean())


def sgd_momentum_step(param: np.ndarray, grad: np.ndarray, velocity: np.ndarray,
                      lr: float, momentum: float) -> None:
    """Classic momentum, in place: v <- momentum*v + g, theta <- theta - lr*v."""
    if not (param.shape == grad.shape == velocity.shape):
        raise ContractError(
            f"mismatched update shapes: param {param.shape}, grad {grad.shape}, "
            f"velocity {velocity.shape}"
        )
    velocity *= momentum
    velocity += grad
    param -= lr * velocity


class SgdMomentum:
    """Per-parameter velocity buffers plus the update rule above."""

    def __init__(self, named_params, lr: float, momentum: float):
        self.named = list(named_params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = {name: np.zeros_like(p.data) for name, p in self.named}

    def zero_grad(self) -> None:
        for _, p in self.named:
            p.zero_grad()

    def step(self) -> None:
        for name, p in self.named:
            sgd_momentum_step(p.data, p.grad, self.velocity[name], self.lr, self.momentum)


def _log_record(log, record: dict) -> None:
    if log is not None:
        log.write(json.dumps(record) + "\n")


class _StageLoop:
    """Step cap plus optional epoch cap plus plateau rule, shared by both stages."""

    def __init__(self, config: TrainConfig):
        self.config = config
        self.step = 0
        self.best = np.inf
        self.stall = 0

    def steps_left(self) -> bool:
        return self.step < self.config.steps_per_stage

    def end_epoch(self, epoch: int, epoch_losses: list[float]) -> bool:
        """True when training should stop."""
        cfg = self.config
        if not self.steps_left():
            return True
        if cfg.max_epochs is not None:
            return epoch + 1 >= cfg.max_epochs
        mean = float(np.mean(epoch_losses)) if epoch_losses else np.inf
        if mean < self.best * (1.0 - cfg.plateau_rel_tol):
            self.best = mean
            self.stall = 0
        else:
            self.stall += 1
        return self.stall >= cfg.plateau_patience


def train_stage1(vit: VitParams, model_config: ModelConfig, stream,
                 config: TrainConfig, log=None) -> list[dict]:
    """Minimize cross-entropy over every transformer and classifier parameter."""
    if config.deterministic:
        T.set_deterministic(True)
    optimizer = SgdMomentum(vit.named_parameters(), config.learning_rate, config.momentum)
    loop = _StageLoop(config)
    history = []
    started = time.time()
    epoch = 0
    while True:
        epoch_losses = []
        for x, y in stream.epoch(epoch):
            optimizer.zero_grad()
            loss = cross_entropy(M.forward_logits(x, vit, model_config), y)
            loss.backward()
            optimizer.step()
            value = loss.item()
            epoch_losses.append(value)
            loop.step += 1
            record = {"stage": 1, "step": loop.step, "epoch": epoch,
                      "loss": value, "wall_time": time.time() - started}
            history.append(record)
            _log_record(log, record)
            if not loop.steps_left():
                break
        if loop.end_epoch(epoch, epoch_losses):
            break
        epoch += 1
    return history


def extract_training_features(stream, vit: VitParams, model_config: ModelConfig):
    """One frozen pass over the training set in dataset order."""
    feats, labels = [], []
    with T.no_grad():
        for x, y in stream.full_pass():
            feats.append(M.forward_features(x, vit, model_config).data)
            labels.append(y)
    return np.concatenate(feats, axis=0), np.concatenate(labels, axis=0)


def train_stage2(vit: VitParams, model_config: ModelConfig, head: DetectionHeadParams,
                 centers: ClassCenters, stream, config: TrainConfig, log=None,
                 features: Optional[np.ndarray] = None,
                 labels: Optional[np.ndarray] = None) -> dict:
    """Minimize the center loss over the detection head only.

    The transformer, classifier, and centers are structurally outside the
    optimizer and outside the computation graph, so they cannot move.
    Returns the mean intra-class squared distance at anchoring time and
    after training.
    """
    if centers is None or not getattr(centers, "frozen", False):
        raise ProtocolError("stage 2 requires anchored (frozen) class centers")
    if config.deterministic:
        T.set_deterministic(True)
    if features is None or labels is None:
        features, labels = extract_training_features(stream, vit, model_config)
    features = np.ascontiguousarray(features)
    labels = np.asarray(labels)

    def full_loss() -> float:
        with T.no_grad():
            return center_loss(detect_embed(features, head), labels, centers).item()

    if config.stage2_learning_rate is not None or config.stage2_max_epochs is not None:
        config = replace(
            config,
            learning_rate=config.stage2_learning_rate or config.learning_rate,
            max_epochs=config.stage2_max_epochs or config.max_epochs,
        )
    loss_start = full_loss()
    optimizer = SgdMomentum(head.named_parameters(), config.learning_rate, config.momentum)
    loop = _StageLoop(config)
    started = time.time()
    n = len(features)
    epoch = 0
    while True:
        order = np.random.default_rng([config.seed, 2, epoch]).permutation(n)
        epoch_losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            optimizer.zero_grad()
            reps = detect_embed(T.constant(features[idx]), head)
            loss = center_loss(reps, labels[idx], centers)
            loss.backward()
            optimizer.step()
            value = loss.item()
            epoch_losses.append(value)
            loop.step += 1
            record = {"stage": 2, "step": loop.step, "epoch": epoch,
                      "loss": value, "wall_time": time.time() - started}
            _log_record(log, record)
            if not loop.steps_left():
                break
        if loop.end_epoch(epoch, epoch_losses):
            break
        epoch += 1
    loss_end = full_loss()
    return {
        "steps": loop.step,
        "intra_class_sq_dist_start": loss_start,
        "intra_class_sq_dist_end": loss_end,
    }
