"""Mini-batch training with Adam, cosine schedule and early stopping."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from neural_mcmc.errors import ContractError
from neural_mcmc.nn.autograd import Tensor, square
from neural_mcmc.nn.layers import ParameterSet
from neural_mcmc.nn.optim import AdamState, adam_step, lr_schedule

log = logging.getLogger(__name__)

# loss_fn(batch_arrays, rng, training) -> scalar Tensor
LossFn = Callable[[tuple, np.random.Generator, bool], Tensor]


@dataclass
class TrainConfig:
    batch_size: int = 32
    max_epochs: int = 250
    initial_lr: float = 1e-3
    decay_fraction: float = 0.8
    weight_decay: float = 0.05
    l2_rate: float = 1e-3
    patience: int = 25
    split_fraction: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")
        if self.patience < 1:
            raise ContractError("patience must be >= 1")
        if not 0 < self.split_fraction < 1:
            raise ContractError("split_fraction must lie in (0, 1)")
        if not 0 < self.decay_fraction <= 1:
            raise ContractError("decay_fraction must lie in (0, 1]")
        if self.initial_lr <= 0:
            raise ContractError("initial_lr must be positive")


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    epochs_run: int = 0
    train_indices: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    val_indices: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))


def split_indices(n: int, split_fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    perm = rng.permutation(n)
    n_train = min(max(int(round(split_fraction * n)), 1), n - 1)
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def _take(data: Sequence[np.ndarray], idx: np.ndarray) -> tuple:
    return tuple(a[idx] for a in data)


def train_loop(
    params: ParameterSet,
    data: Sequence[np.ndarray],
    loss_fn: LossFn,
    cfg: TrainConfig,
) -> TrainResult:
    """Train ``params`` in place and leave them at the best validation epoch.

    ``data`` is a tuple of arrays sharing their first dimension.  Shuffling,
    the train/validation split and every stochastic draw inside ``loss_fn``
    are driven by ``cfg.seed``.
    """
    n = len(data[0]) if data else 0
    if n < 2:
        raise ContractError("training needs at least two samples (train + validation)")
    if any(len(a) != n for a in data):
        raise ContractError("all data arrays must share their first dimension")

    rng = np.random.default_rng(cfg.seed)
    train_idx, val_idx = split_indices(n, cfg.split_fraction, rng)
    result = TrainResult(train_indices=train_idx, val_indices=val_idx)
    if cfg.max_epochs == 0:
        return result

    tensors = params.tensors()
    weights = params.weights()
    state = AdamState.zeros_like(tensors)
    steps_per_epoch = math.ceil(len(train_idx) / cfg.batch_size)
    total_steps = cfg.max_epochs * steps_per_epoch
    val_data = _take(data, val_idx)

    best_loss = math.inf
    best_params = params.snapshot()
    since_best = 0
    step = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(train_idx)
        running = 0.0
        lr = cfg.initial_lr
        for start in range(0, len(order), cfg.batch_size):
            batch = _take(data, order[start : start + cfg.batch_size])
            loss = loss_fn(batch, rng, True)
            if cfg.l2_rate:
                for w in weights:
                    loss = loss + cfg.l2_rate * square(w).sum()
            for t in tensors:
                t.zero_grad()
            loss.backward()
            lr = lr_schedule(step, total_steps, cfg.initial_lr, cfg.decay_fraction)
            grads = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]
            adam_step(tensors, grads, state, lr, cfg.weight_decay)
            running += loss.item() * len(batch[0])
            step += 1

        # a fixed stream keeps stochastic validation losses comparable across epochs
        val_rng = np.random.default_rng([cfg.seed, 1])
        val_loss = loss_fn(val_data, val_rng, False).item()
        train_loss = running / len(train_idx)
        result.history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "lr": lr})
        log.debug("epoch %d train %.6g val %.6g", epoch, train_loss, val_loss)

        if val_loss < best_loss:
            best_loss = val_loss
            best_params = params.snapshot()
            result.best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
        result.epochs_run = epoch
        if since_best >= cfg.patience:
            log.info("early stop at epoch %d (best %d)", epoch, result.best_epoch)
            break

    params.restore(best_params)
    for t in tensors:
        t.zero_grad()
    return result
