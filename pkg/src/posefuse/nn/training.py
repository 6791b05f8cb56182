"""Seeded mini-batch training of the pose regressor.

The feature extractor is frozen by default (it stands in for a pretrained
network), so trunk outputs are computed once and only the regressor head and
the two loss log-variances are optimized.
"""

from __future__ import annotations

import logging
import math
import zlib
from dataclasses import asdict, dataclass
from typing import Iterable

import numpy as np

from ..errors import DivergedTraining, EmptyDataset, NaNGradient, ShapeMismatch, ValidationError
from .losses import loss_stable_with_grad
from .model import PoseNetModel
from .optim import AdamState, adam_step

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    batch_size: int = 34
    dropout_rate: float = 0.5
    epochs: int = 200
    seed: int = 0
    norm: str = "l1"
    train_backbone: bool = False

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size <= 0 or self.epochs < 0:
            raise ValidationError(f"invalid training configuration {self}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValidationError(f"dropout rate must be in [0, 1), got {self.dropout_rate}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainingData:
    """Targets plus either raw image batches or cached trunk features."""

    targets: np.ndarray
    images: np.ndarray | None = None
    trunk_features: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.targets)


def extract_trunk_features(model: PoseNetModel, images, chunk: int = 16) -> np.ndarray:
    """Run the frozen conv trunk over an image array or an iterable of image chunks."""
    if isinstance(images, np.ndarray):
        chunks: Iterable[np.ndarray] = (images[i:i + chunk] for i in range(0, len(images), chunk))
    else:
        chunks = images
    out = [model.backbone.trunk_forward(np.asarray(c, dtype=float)) for c in chunks]
    if not out:
        raise EmptyDataset("no images to extract features from")
    return np.concatenate(out, axis=0)


def _rng(seed: int, tag: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(tag.encode())])


def train(model: PoseNetModel, data: TrainingData, config: TrainConfig):
    """Train a copy of ``model``; returns ``(trained_model, history)``.

    ``history[i]`` is the sample-weighted mean loss over epoch ``i``.
    """
    n = len(data)
    if n == 0:
        raise EmptyDataset("training set is empty")
    targets = np.asarray(data.targets, dtype=float)
    if targets.shape != (n, 7):
        raise ShapeMismatch(f"targets must be (N, 7), got {targets.shape}")

    model = model.copy()
    model.head.dropout.rate = config.dropout_rate
    model.head.dropout.rng = _rng(config.seed, "dropout")
    shuffle_rng = _rng(config.seed, "shuffle")
    history: list[float] = []
    if config.epochs == 0:
        return model, history

    full = config.train_backbone
    if full:
        if data.images is None:
            raise ValidationError("train_backbone=True needs raw images")
        inputs = np.asarray(data.images, dtype=float)
    else:
        trunk = data.trunk_features
        if trunk is None:
            if data.images is None:
                raise ValidationError("training data has neither images nor trunk features")
            trunk = extract_trunk_features(model, data.images)
        # frozen top dense layer: cache its activations too
        inputs = model.backbone.top_forward(trunk)

    state = AdamState()
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            model.zero_grad()
            if full:
                pred = model.forward(inputs[idx], mode="train")
            else:
                pred = model.head_forward(inputs[idx], mode="train")
            loss, dpred, ds_x, ds_q = loss_stable_with_grad(
                pred, targets[idx], model.s_x, model.s_q, config.norm)
            if not math.isfinite(loss):
                raise DivergedTraining(f"non-finite loss at epoch {epoch}")
            if full:
                model.backward(dpred, ds_x, ds_q, through_backbone=True)
            else:
                model.grad_s_x += ds_x
                model.grad_s_q += ds_q
                model.head.backward(dpred)
            params = model.parameters(include_backbone=full)
            grads = model.gradients(include_backbone=full)
            for k, g in grads.items():
                if not np.all(np.isfinite(g)):
                    raise NaNGradient(f"non-finite gradient for {k} at epoch {epoch}")
            new, state = adam_step(params, grads, state, config.learning_rate)
            for k, v in new.items():
                model.set_parameter(k, v)
            total += loss * len(idx)
        history.append(total / n)
        if not math.isfinite(history[-1]):
            raise DivergedTraining(f"non-finite epoch loss at epoch {epoch}")
        if epoch % 50 == 0 or epoch == config.epochs - 1:
            log.debug("%s epoch %d loss %.5f", model.name, epoch, history[-1])
    return model, history
