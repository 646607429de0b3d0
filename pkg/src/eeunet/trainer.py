"""Dual-path SGD training with per-epoch exponential learning-rate decay."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import netgraph as ng
from .netgraph import ConfigError, Layer, ModelConfig, ParameterSet, PathKind
from .tensorkit import ce_loss

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class Hyperparams:
    epochs: int = 25
    lr0: float = 3e-4
    decay: float = 0.98
    batch_size: int = 4
    momentum: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not self.lr0 > 0:
            raise ConfigError(f"lr0 must be positive, got {self.lr0}")
        if not 0 < self.decay <= 1:
            raise ConfigError(f"decay must lie in (0, 1], got {self.decay}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")


def lr_schedule(h: Hyperparams, epoch: int) -> float:
    if not 0 <= epoch < h.epochs:
        raise ValueError(f"epoch {epoch} outside 0..{h.epochs - 1}")
    return h.lr0 * h.decay ** epoch


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    test_iou_full: float
    test_iou_early: float


@dataclass
class TrainHistory:
    rows: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    diverged: bool = False

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "lr", "train_loss", "test_iou_full", "test_iou_early"])
            for r in self.rows:
                w.writerow([r.epoch, repr(r.lr), repr(r.train_loss), repr(r.test_iou_full), repr(r.test_iou_early)])


def best_epoch_index(full_ious: list[float]) -> int:
    """Argmax with ties going to the earliest epoch."""
    return int(np.argmax(np.asarray(full_ious)))


def dual_loss(params: ParameterSet, x: np.ndarray, y: np.ndarray) -> tuple[float, ParameterSet]:
    """Mean of early and full cross-entropy, and its gradient for every layer."""
    cache: dict = {}
    early, full = ng.forward(params, x, PathKind.DUAL, cache=cache)
    l_early, g_early = ce_loss(early, y)
    l_full, g_full = ce_loss(full, y)
    grads = ng.backward(params, cache, 0.5 * g_early, 0.5 * g_full)
    return 0.5 * (l_early + l_full), grads


class SGD:
    """Plain SGD with optional heavy-ball momentum; updates ``params`` in place."""

    def __init__(self, params: ParameterSet, momentum: float = 0.0):
        self.params = params
        self.momentum = momentum
        self.velocity = None
        if momentum:
            self.velocity = {n: Layer(np.zeros_like(l.kernel), np.zeros_like(l.bias)) for n, l in params.items()}

    def step(self, grads: ParameterSet, lr: float) -> None:
        lr32 = np.float32(lr)
        for name, g in grads.items():
            layer = self.params[name]
            if self.velocity is not None:
                v = self.velocity[name]
                v.kernel[...] = self.momentum * v.kernel + g.kernel
                v.bias[...] = self.momentum * v.bias + g.bias
                g = v
            layer.kernel[...] -= lr32 * g.kernel
            layer.bias[...] -= lr32 * g.bias


def train_step(params: ParameterSet, x: np.ndarray, y: np.ndarray, lr: float,
               optimizer: SGD | None = None) -> float:
    """One dual-path update on a batch; returns the loss before the update."""
    loss, grads = dual_loss(params, x, y)
    if not math.isfinite(loss):
        raise DivergenceError(f"non-finite loss {loss}")
    (optimizer or SGD(params)).step(grads, lr)
    return loss


def evaluate_paths(params: ParameterSet, xs: np.ndarray, ys: np.ndarray,
                   classes: int) -> tuple[float, float]:
    """Dataset mean IoU of (full path, early path)."""
    from .evalbench import dataset_iou
    from .gate import argmax_classes

    full_pairs, early_pairs = [], []
    for x, y in zip(xs, ys):
        early, full = ng.forward(params, x, PathKind.DUAL)
        full_pairs.append((argmax_classes(full), y))
        early_pairs.append((argmax_classes(early), y))
    return dataset_iou(full_pairs, classes), dataset_iou(early_pairs, classes)


def fit(config: ModelConfig, train_x: np.ndarray, train_y: np.ndarray,
        test_x: np.ndarray, test_y: np.ndarray, h: Hyperparams,
        init: ParameterSet | None = None) -> tuple[ParameterSet, TrainHistory]:
    """Train both heads; return the parameters of the best full-path test epoch."""
    if len(train_x) < 1 or len(test_x) < 1:
        raise ConfigError("need at least one train and one test scene")
    params = ng.copy_params(init) if init is not None else ng.build(config, h.seed)
    opt = SGD(params, h.momentum)
    rng = np.random.default_rng(h.seed)
    history = TrainHistory()
    best = ng.copy_params(params)
    best_iou = -math.inf
    for epoch in range(h.epochs):
        lr = lr_schedule(h, epoch)
        order = rng.permutation(len(train_x))
        losses = []
        try:
            for start in range(0, len(order), h.batch_size):
                idx = order[start:start + h.batch_size]
                losses.append(train_step(params, train_x[idx], train_y[idx], lr, opt))
        except DivergenceError as exc:
            log.warning("epoch %d diverged: %s", epoch, exc)
            history.diverged = True
            break
        iou_full, iou_early = evaluate_paths(params, test_x, test_y, config.classes)
        history.rows.append(EpochRecord(epoch, lr, float(np.mean(losses)), iou_full, iou_early))
        log.info("epoch %2d lr %.3e loss %.4f iou full %.4f early %.4f",
                 epoch, lr, history.rows[-1].train_loss, iou_full, iou_early)
        if iou_full > best_iou:
            best_iou = iou_full
            best = ng.copy_params(params)
            history.best_epoch = epoch
    return best, history
