"""Training loop: MSE on scaled targets, ADAM, step learning-rate drops."""

import logging
import time
from dataclasses import dataclass

import numpy as np

from . import ops
from .optim import Adam, step_schedule

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters.

    ``target_scale`` multiplies the ground-truth parameters before the
    loss (diffusivities by 1/3, fractions by 1); predictions are divided
    by it again at inference.
    """

    batches: int = 100_000
    batch_size: int = 1000
    lr: float = 1e-3
    milestones: tuple = (0.5, 0.75)
    lr_factor: float = 0.1
    seed: int = 0
    snr: float = 30.0
    target_scale: tuple = (1 / 3, 1.0)
    rotate: bool = False

    def __post_init__(self):
        if self.batches < 1 or self.batch_size < 2:
            raise ValueError("need at least one batch of at least two samples")
        ms = tuple(float(m) for m in self.milestones)
        if any(b <= a for a, b in zip(ms, ms[1:])) or any(not 0 < m < 1 for m in ms):
            raise ValueError("milestones must be strictly increasing fractions in (0, 1)")
        if any(s <= 0 for s in self.target_scale):
            raise ValueError("target scale entries must be positive")
        object.__setattr__(self, "milestones", ms)
        object.__setattr__(self, "target_scale", tuple(float(s) for s in self.target_scale))


class TrainingError(RuntimeError):
    """Raised when the loss or a gradient becomes non-finite."""


@dataclass
class TrainResult:
    network: object
    losses: np.ndarray
    seconds: float


def train_step(network, optimizer, x, y, lr):
    """One forward/backward/update; returns the batch loss."""
    graph, out = network.forward(x, training=True)
    loss = ops.mse(graph, out, np.asarray(y, dtype=network.dtype))
    graph.backward(loss)
    optimizer.step(lr)
    return float(loss.value)


def train(network, batch_fn, config, log_every=0):
    """Train ``network`` on ``batch_fn(i) -> (inputs, scaled targets)``.

    Batch norm runs in training mode. The loss of every batch is
    recorded; a non-finite loss or gradient aborts with the batch index
    and offending parameter names.
    """
    optimizer = Adam(network.parameters(), lr=config.lr)
    losses = np.empty(config.batches)
    start = time.perf_counter()
    for i in range(config.batches):
        x, y = batch_fn(i)
        lr = step_schedule(i, config.batches, config.lr, config.milestones, config.lr_factor)
        try:
            graph, out = network.forward(x, training=True)
        except FloatingPointError as exc:
            raise TrainingError(f"batch {i}: {exc}") from exc
        loss = ops.mse(graph, out, np.asarray(y, dtype=network.dtype))
        if not np.isfinite(loss.value):
            raise TrainingError(f"batch {i}: non-finite loss {loss.value}")
        graph.backward(loss)
        bad = [p.name for p in network.parameters() if not np.all(np.isfinite(p.grad))]
        if bad:
            raise TrainingError(f"batch {i}: non-finite gradient in {', '.join(bad)}")
        optimizer.step(lr)
        losses[i] = float(loss.value)
        if log_every and (i + 1) % log_every == 0:
            log.info("batch %d/%d  loss %.5g  lr %.1e", i + 1, config.batches, losses[i], lr)
    return TrainResult(network=network, losses=losses, seconds=time.perf_counter() - start)
