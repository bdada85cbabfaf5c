"""Residual-learning training loop: MSE loss, Adam, per-epoch LR decay,
early stopping on validation loss, best-snapshot selection."""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from ..grids import ImageGrid, UNIT_NORMALIZED
from .optim import adam_init, adam_step
from .unet import ShapeError, UNetConfig, unet_backward, unet_forward


class TrainingDiverged(FloatingPointError):
    """Loss went non-finite; aborted with diagnostics."""


@dataclass(frozen=True)
class ResidualPair:
    """One training example: sparse-view input and its pure-artifact label.

    The label is sparse - full in the normalized domain, so
    input - label reproduces the full-view image.
    """

    input: np.ndarray
    label: np.ndarray
    views: int

    def __post_init__(self):
        object.__setattr__(self, "input", np.asarray(self.input, dtype=np.float32))
        object.__setattr__(self, "label", np.asarray(self.label, dtype=np.float32))
        if self.input.shape != self.label.shape:
            raise ShapeError(
                f"input {self.input.shape} != label {self.label.shape}")
        if self.views < 1:
            raise ValueError("views must be positive")


def make_residual_pair(sparse: ImageGrid, full: ImageGrid, views: int) -> ResidualPair:
    if sparse.unit_tag != UNIT_NORMALIZED or full.unit_tag != UNIT_NORMALIZED:
        raise ShapeError("residual pairs are built from normalized images")
    s = sparse.values.astype(np.float32)
    f = full.values.astype(np.float32)
    return ResidualPair(s, s - f, views)


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 30
    batch_size: int = 6
    lr0: float = 0.001
    lr_decay: float = 0.1  # lr(n) = lr0 * exp(-lr_decay * n), n = 0-based epoch
    patience: int | None = 5
    seed: int = 0
    # Optimizer steps per epoch. None = one pass over the training set.
    # Tiny datasets can take several (re-shuffled) passes per epoch, so the
    # per-epoch LR decay is not tied to the dataset size.
    steps_per_epoch: int | None = None

    def __post_init__(self):
        if self.max_epochs < 1 or self.batch_size < 1 or self.lr0 < 0:
            raise ValueError("max_epochs, batch_size must be >= 1 and lr0 >= 0")
        if self.patience is not None and not 1 <= self.patience <= self.max_epochs:
            raise ValueError("patience must be in [1, max_epochs] or None")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ValueError("steps_per_epoch must be >= 1 or None")


def mse_loss(pred, label):
    """Mean squared error over all elements and its gradient wrt pred."""
    pred = np.asarray(pred)
    label = np.asarray(label)
    if pred.shape != label.shape:
        raise ShapeError(f"pred {pred.shape} != label {label.shape}")
    diff = pred - label
    n = diff.size
    loss = float(np.mean(diff.astype(np.float64) ** 2))
    return loss, (2.0 / n) * diff


def _stack(pairs):
    x = np.stack([p.input for p in pairs])[:, None]
    y = np.stack([p.label for p in pairs])[:, None]
    return x, y


def _eval_loss(params, cfg, pairs, batch_size):
    total = 0.0
    for lo in range(0, len(pairs), batch_size):
        chunk = pairs[lo:lo + batch_size]
        x, y = _stack(chunk)
        pred, _ = unet_forward(params, cfg, x, mode="eval")
        loss, _ = mse_loss(pred, y)
        total += loss * len(chunk)
    return total / len(pairs)


def train(train_pairs, val_pairs, tcfg: TrainConfig, cfg: UNetConfig, params,
          log=None):
    """Optimize `params` on residual pairs; returns (best_params, history).

    Each epoch shuffles the training pairs with the seeded RNG, runs Adam
    at lr0 * exp(-lr_decay * epoch), then measures validation loss in eval
    mode. Training stops early after `patience` consecutive epochs without
    a strictly better validation loss; the returned parameters are the
    snapshot with the smallest validation loss seen.

    History rows: {"epoch", "train_loss", "val_loss", "lr"} per epoch.
    """
    if not train_pairs or not val_pairs:
        raise ValueError("train and validation splits must both be non-empty")
    rng = np.random.default_rng(tcfg.seed)
    state = adam_init(params)
    history = []
    best_val = np.inf
    best_params = copy.deepcopy(params)
    stale = 0

    steps_per_pass = -(-len(train_pairs) // tcfg.batch_size)
    steps_per_epoch = tcfg.steps_per_epoch or steps_per_pass

    def batches():
        while True:
            order = rng.permutation(len(train_pairs))
            for lo in range(0, len(order), tcfg.batch_size):
                yield [train_pairs[i] for i in order[lo:lo + tcfg.batch_size]]

    batch_stream = batches()
    for epoch in range(tcfg.max_epochs):
        lr = tcfg.lr0 * np.exp(-tcfg.lr_decay * epoch)
        epoch_loss = 0.0
        epoch_count = 0
        for _ in range(steps_per_epoch):
            batch = next(batch_stream)
            x, y = _stack(batch)
            try:
                pred, cache = unet_forward(params, cfg, x, mode="train")
            except FloatingPointError as exc:
                raise TrainingDiverged(
                    f"activations exploded at epoch {epoch}, lr {lr:g}: {exc}"
                ) from exc
            loss, dpred = mse_loss(pred, y)
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite training loss at epoch {epoch}, lr {lr:g}")
            grads = unet_backward(params, cfg, cache, dpred)
            params, state = adam_step(params, grads, state, lr)
            epoch_loss += loss * len(batch)
            epoch_count += len(batch)
        train_loss = epoch_loss / epoch_count
        try:
            val_loss = _eval_loss(params, cfg, val_pairs, tcfg.batch_size)
        except FloatingPointError as exc:
            raise TrainingDiverged(
                f"activations exploded in validation at epoch {epoch}: {exc}"
            ) from exc
        if not np.isfinite(val_loss):
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}")
        history.append({"epoch": epoch, "train_loss": train_loss,
                        "val_loss": val_loss, "lr": float(lr)})
        if log is not None:
            log(history[-1])
        if val_loss < best_val:
            best_val = val_loss
            best_params = copy.deepcopy(params)
            stale = 0
        else:
            stale += 1
            if tcfg.patience is not None and stale >= tcfg.patience:
                break
    return best_params, history


def postprocess(sparse_norm: ImageGrid, params, cfg: UNetConfig) -> ImageGrid:
    """Subtract the predicted pure-artifact residual; clamp into [0, 1]."""
    if sparse_norm.unit_tag != UNIT_NORMALIZED:
        raise ShapeError("postprocess expects a normalized image")
    if sparse_norm.width != cfg.input_size:
        raise ShapeError(
            f"image size {sparse_norm.width} != cfg.input_size {cfg.input_size}")
    x = sparse_norm.values.astype(np.float32)[None, None]
    residual, _ = unet_forward(params, cfg, x, mode="eval")
    out = np.clip(x[0, 0] - residual[0, 0], 0.0, 1.0)
    return ImageGrid(out, sparse_norm.pixel_size, UNIT_NORMALIZED)
