"""SGD with classical momentum and the per-image training loop."""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .model import DESK_BASE_CHANNELS, backward, forward, init_model, predict

log = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    """Training produced a NaN or infinite loss."""


class DatasetError(ValueError):
    """Training data is empty or heterogeneous."""


@dataclass
class TrainConfig:
    learning_rate: float = 1e-5
    momentum: float = 0.9
    epochs: int = 200
    batch_size: int = 1
    rng_seed: int = 0
    base_channels: int = DESK_BASE_CHANNELS
    # optional hard stop, counted in single-image iterations
    max_iterations: Optional[int] = None

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size != 1:
            raise ValueError("only batch_size = 1 is supported")
        if self.max_iterations is not None and self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


def sgd_step(params, grads, velocity, lr, momentum):
    """In-place classical momentum update on every array present in `grads`.

    ``v <- momentum * v - lr * g``; ``p <- p + v``. Missing velocity slots
    are created as zeros.
    """
    for name, g in grads.items():
        v = velocity.get(name)
        if v is None:
            v = velocity[name] = np.zeros_like(params[name])
        v *= momentum
        v -= lr * g.astype(v.dtype, copy=False)
        params[name] += v
    return params


def apply_update(model, grads, velocity, lr, momentum):
    sgd_step(model.params, grads, velocity, lr, momentum)
    model.steps += 1
    model.version += 1


def _stack_dataset(dataset):
    if len(dataset) == 0:
        raise DatasetError("empty training set")
    shape = np.shape(dataset[0][0])
    for img, mask in dataset:
        if np.shape(img) != shape or np.shape(mask) != shape:
            raise DatasetError("all training images and masks must share one shape")
    if len(shape) != 2 or shape[0] % 16 or shape[1] % 16:
        raise DatasetError(f"training images must be 2D with sides divisible by 16, got {shape}")
    images = np.stack([np.asarray(i, dtype=np.float32) for i, _ in dataset])
    targets = np.stack([(np.asarray(m) > 0).astype(np.uint8) for _, m in dataset])
    return images, targets


def train(dataset, cfg, model=None, callback=None):
    """Train on ``(image, mask)`` pairs, one image per iteration.

    Each epoch visits the pairs in a fresh seeded permutation. Everything is
    derived from ``cfg.rng_seed``, so a fixed seed gives an identical loss
    curve and identical parameters.

    Returns
    -------
    model : ModelParams
    losses : list of float, one per iteration
    """
    images, targets = _stack_dataset(dataset)
    init_seq, order_seq = np.random.SeedSequence(cfg.rng_seed).spawn(2)
    if model is None:
        model = init_model(cfg.base_channels, np.random.default_rng(init_seq))
    order_rng = np.random.default_rng(order_seq)
    velocity = {}
    losses = []
    total = cfg.epochs * len(images)
    if cfg.max_iterations is not None:
        total = min(total, cfg.max_iterations)
    it = 0
    while it < total:
        for k in order_rng.permutation(len(images)):
            if it >= total:
                break
            _, cache = forward(model, images[k][None, None], mode="train")
            loss, grads = backward(model, cache, targets[k])
            if not np.isfinite(loss):
                raise NonFiniteLossError(f"loss became {loss} at iteration {it}")
            apply_update(model, grads, velocity, cfg.learning_rate, cfg.momentum)
            losses.append(loss)
            if callback is not None:
                callback(it, loss, model)
            it += 1
        log.debug("iteration %d, recent loss %.4f", it, np.mean(losses[-len(images):]))
    return model, losses


def pixel_accuracy(model, dataset):
    """Inference-mode pixel accuracy over ``(image, mask)`` pairs."""
    hits = 0
    total = 0
    for img, mask in dataset:
        pred = predict(model, img)
        hits += int((pred == (np.asarray(mask) > 0)).sum())
        total += pred.size
    return hits / total
