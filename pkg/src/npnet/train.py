from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import ops
from .checkpoint import save_checkpoint
from .data import DataError
from .optim import adam_step

log = logging.getLogger(__name__)


class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 100
    learning_rate: float = 1e-3
    batch_size: int = 2
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    checkpoint_path: Optional[str] = None
    checkpoint_every: int = 0  # 0 = only at the end
    log_path: Optional[str] = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1 (got {self.epochs})")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be >= 1 (got {self.batch_size})")
        if not self.learning_rate > 0:
            raise ValueError(f"learning rate must be > 0 (got {self.learning_rate})")


@dataclass
class EpochLog:
    epoch: int
    mean_loss: float
    seconds: float

    def line(self) -> str:
        return f"{self.epoch}\t{self.mean_loss:.6f}\t{self.seconds:.3f}"


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def train_step(model, images: np.ndarray, masks: np.ndarray, step: int, config: TrainConfig) -> float:
    model.set_mode("train")
    logits = model.forward(images)
    loss = ops.softmax_cross_entropy(logits, masks)
    if not math.isfinite(loss):
        return loss
    model.backward(ops.softmax_cross_entropy_backward(logits, masks))
    adam_step(
        list(model.parameters()),
        step,
        lr=config.learning_rate,
        beta1=config.adam_beta1,
        beta2=config.adam_beta2,
        eps=config.adam_epsilon,
    )
    return loss


def train(model, dataset, config: TrainConfig) -> list[EpochLog]:
    """Fit ``model`` on ``dataset``, a sequence of ``(image (c,h,w), mask (h,w))``.

    Batch order is a fresh permutation per epoch derived from
    ``(config.seed, epoch)``. Returns one log entry per epoch.
    """
    if len(dataset) == 0:
        raise DataError("training set is empty")
    images = [np.asarray(img, dtype=ops.DTYPE) for img, _ in dataset]
    masks = [np.asarray(m, dtype=np.int64) for _, m in dataset]
    for i, (img, m) in enumerate(zip(images, masks)):
        if img.shape[1:] != m.shape:
            raise DataError(f"sample {i}: image size {img.shape[1:]} does not match mask size {m.shape}")
        if img.shape != images[0].shape:
            raise DataError(f"sample {i}: image shape {img.shape} differs from sample 0 {images[0].shape}")

    history: list[EpochLog] = []
    log_file = open(config.log_path, "a") if config.log_path else None
    step = 0
    try:
        for epoch in range(1, config.epochs + 1):
            start = time.perf_counter()
            order = epoch_order(len(images), config.seed, epoch)
            losses = []
            for b in range(0, len(order), config.batch_size):
                idx = order[b : b + config.batch_size]
                step += 1
                loss = train_step(
                    model, np.stack([images[i] for i in idx]), np.stack([masks[i] for i in idx]), step, config
                )
                if not math.isfinite(loss):
                    raise NonFiniteLossError(
                        f"non-finite loss {loss} at epoch {epoch}, batch {b // config.batch_size} "
                        f"(samples {idx.tolist()})"
                    )
                losses.append(loss)
            entry = EpochLog(epoch, float(np.mean(losses)), time.perf_counter() - start)
            history.append(entry)
            log.info("epoch %d loss %.6f (%.2fs)", entry.epoch, entry.mean_loss, entry.seconds)
            if log_file:
                log_file.write(entry.line() + "\n")
                log_file.flush()
            if config.checkpoint_path and config.checkpoint_every and epoch % config.checkpoint_every == 0:
                save_checkpoint(model, config.checkpoint_path)
    finally:
        if log_file:
            log_file.close()
    if config.checkpoint_path:
        Path(config.checkpoint_path).parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(model, config.checkpoint_path)
    return history
