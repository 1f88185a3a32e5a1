"""Plain full-stream gradient descent for small models."""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, NonFiniteError
from ..model import Model, forward_offline
from ..numeric import Tensor, absolute, mean_all, no_grad, square
from ..segmentation import SegmentPlan, TimedSequence

log = logging.getLogger(__name__)


@dataclass
class TrainResult:
    losses: list[float] = field(default_factory=list)
    final_mae: float = math.nan


def stream_loss(prediction: Tensor, labels: np.ndarray, kind: str) -> Tensor:
    residual = prediction - Tensor(np.asarray(labels, dtype=np.float64).reshape(prediction.shape))
    if kind == "l2":
        return mean_all(square(residual))
    if kind == "mae":
        return mean_all(absolute(residual))
    raise ConfigError(f"unknown loss {kind!r}; use 'l2' or 'mae'")


def predict(model: Model, streams: Sequence[TimedSequence], plan: SegmentPlan, times: np.ndarray) -> np.ndarray:
    with no_grad():
        _, values = forward_offline(model, streams, plan, times)
    return values.data[:, 0]


def train_toy(
    model: Model,
    streams: Sequence[TimedSequence],
    plan: SegmentPlan,
    label_times: np.ndarray,
    labels: np.ndarray,
    lr: float = 0.03,
    epochs: int = 100,
    loss: str = "l2",
) -> TrainResult:
    """One SGD step per epoch on the whole stream (batch of one stream), truncation-free."""
    if model.config.out_dim != 1:
        raise ConfigError("toy training regresses a scalar; set out_dim=1")
    result = TrainResult()
    params = list(model.params.items())
    for epoch in range(epochs):
        model.params.zero_grad()
        try:
            _, prediction = forward_offline(model, streams, plan, label_times)
            value = stream_loss(prediction, labels, loss)
        except NonFiniteError as exc:
            raise NonFiniteError(f"training diverged at epoch {epoch}: {exc}") from None
        current = value.item()
        if not math.isfinite(current):
            raise NonFiniteError(f"loss became non-finite at epoch {epoch}")
        value.backward()
        for _, param in params:
            param.data -= lr * param.grad
        result.losses.append(current)
        log.debug("epoch %d loss %.6f", epoch, current)
    result.final_mae = float(np.mean(np.abs(predict(model, streams, plan, label_times) - labels)))
    return result
