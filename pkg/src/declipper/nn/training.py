"""Mini-batch Adam training and inference over spectrum images."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from ..signal_core import LogMagImage
from .layers import adam_step, mse_loss
from .unet import UNet

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-4
    batch_size: int = 5
    epochs: int = 50
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    loss_mask: bool = True  # exclude padded frames from the loss

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("learning_rate, batch_size and epochs must be positive")


def _stack(images: list[LogMagImage]) -> np.ndarray:
    return np.stack([im.pixels for im in images])[:, None]


def _valid_masks(images: list[LogMagImage]) -> np.ndarray:
    return np.stack([im.valid_mask() for im in images])[:, None]


def train_step(model: UNet, x: np.ndarray, target: np.ndarray, mask, cfg: TrainConfig) -> float:
    model.zero_grad()
    pred = model.forward(x)
    loss, grad = mse_loss(pred, target, mask)
    model.backward(grad)
    for conv in model.layers():
        conv.step += 1
        adam_step(conv.weight, conv.grad_weight, conv.m_weight, conv.v_weight, conv.step,
                  cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
        adam_step(conv.bias, conv.grad_bias, conv.m_bias, conv.v_bias, conv.step,
                  cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    return loss


def train(model: UNet, pairs: list[tuple[LogMagImage, LogMagImage]],
          cfg: TrainConfig = TrainConfig(), step_callback=None) -> list[float]:
    """Train on (clipped, clean) image pairs; returns the mean loss of every epoch.

    Every epoch visits the pairs once in a fresh random order, in batches of
    ``cfg.batch_size`` (the last batch may be smaller).
    """
    if not pairs:
        raise ValueError("training set is empty")
    size = model.config.image_size
    for inp, tgt in pairs:
        if inp.pixels.shape != (size, size) or tgt.pixels.shape != (size, size):
            raise ValueError(
                f"image shape {inp.pixels.shape}/{tgt.pixels.shape} does not match "
                f"model size {size}"
            )
    inputs = _stack([p[0] for p in pairs])
    targets = _stack([p[1] for p in pairs])
    masks = _valid_masks([p[0] for p in pairs]) if cfg.loss_mask else None
    rng = np.random.default_rng(cfg.seed)
    n = len(pairs)
    trace = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        losses, weights = [], []
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss = train_step(model, inputs[idx], targets[idx],
                              None if masks is None else masks[idx], cfg)
            if not math.isfinite(loss):
                raise FloatingPointError(f"loss diverged at epoch {epoch}")
            losses.append(loss)
            weights.append(idx.size)
            if step_callback is not None:
                step_callback(loss)
        trace.append(float(np.average(losses, weights=weights)))
        log.info("epoch %d/%d loss %.6f", epoch + 1, cfg.epochs, trace[-1])
    return trace


def enhance(model: UNet, images: list[LogMagImage], batch_size: int = 5) -> list[LogMagImage]:
    """Run the network on each image; outputs are on the clean (unnormalised) scale."""
    out = []
    for start in range(0, len(images), batch_size):
        chunk = images[start : start + batch_size]
        pred = model.forward(_stack(chunk), keep_cache=False)[:, 0]
        for im, p in zip(chunk, pred):
            out.append(LogMagImage(p.copy(), 0.0, 1.0, im.segment_index, im.valid_frames))
    return out
