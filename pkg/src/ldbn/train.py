"""Supervised source-domain pretraining and frozen-model evaluation."""

import logging
from dataclasses import dataclass, field

import numpy as np

from .lane import cell_accuracy, decode_cells, pretrain_loss
from .nn import BN_STAT, INFERENCE, TRAIN, build_reference_model

log = logging.getLogger(__name__)

VAL_INDEX_OFFSET = 1_000_000


@dataclass
class PretrainConfig:
    seed: int = 7
    lanes: int = 2
    train_frames: int = 2000
    val_frames: int = 500
    batch_size: int = 32
    learning_rate: float = 0.02
    momentum: float = 0.9
    max_epochs: int = 20
    target_accuracy: float = 0.90


@dataclass
class PretrainResult:
    model: object
    val_accuracy: float
    epochs: int
    converged: bool
    history: list = field(default_factory=list)


def predict_cells(model, images, grid, mode=INFERENCE, chunk=50):
    """Decoded cells for every image; inference mode is batched in chunks."""
    out = []
    step = 1 if mode != INFERENCE else chunk
    for i in range(0, len(images), step):
        out.append(decode_cells(model.forward(images[i:i + step], mode), grid))
    return np.concatenate(out)


def evaluate(model, images, labels, grid):
    """Per-frame accuracy of the frozen model (running statistics)."""
    return cell_accuracy(predict_cells(model, images, grid), labels, grid)


def pretrain(cfg, train_x, train_y, val_x, val_y, grid, on_epoch=None):
    """Train every parameter with SGD+momentum until val accuracy reaches the target.

    BN layers run in train mode (batch statistics, running-stat EMA). The
    learning rate is constant. Validation runs after each epoch in inference
    mode; training stops at the first epoch meeting ``cfg.target_accuracy``.
    """
    model = build_reference_model(cfg.seed, grid.grid_cells, grid.row_anchors, grid.lanes,
                                  input_shape=(3, grid.height, grid.width))
    trainable = {n: a for n, a, lab in model.named_params() if lab != BN_STAT}
    velocity = {n: np.zeros_like(a) for n, a in trainable.items()}
    rng = np.random.default_rng(cfg.seed)
    n = len(train_x)
    bs = min(cfg.batch_size, n)
    history = []
    acc = 0.0
    for epoch in range(1, cfg.max_epochs + 1):
        perm = rng.permutation(n)
        losses = []
        for s in range(0, n - bs + 1, bs):
            idx = np.sort(perm[s:s + bs])
            logits = model.forward(train_x[idx], TRAIN)
            loss, dlogits = pretrain_loss(logits, train_y[idx], grid)
            grads = model.backward(dlogits, scope="all")
            for name, g in grads.items():
                v = velocity[name]
                v *= cfg.momentum
                v += g
                trainable[name] -= cfg.learning_rate * v
            losses.append(loss)
        model.clear_cache()
        acc = float(evaluate(model, val_x, val_y, grid).mean())
        row = {"epoch": epoch, "loss": float(np.mean(losses)), "val_accuracy": acc}
        history.append(row)
        log.info("epoch %d loss %.4f val_accuracy %.4f", epoch, row["loss"], acc)
        if on_epoch is not None:
            on_epoch(row)
        if acc >= cfg.target_accuracy:
            return PretrainResult(model, acc, epoch, True, history)
    return PretrainResult(model, acc, cfg.max_epochs, False, history)
