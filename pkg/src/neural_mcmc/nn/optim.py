"""Adam with decoupled weight decay and the plateau-then-cosine schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from neural_mcmc.errors import ContractError, DimensionError
from neural_mcmc.nn.autograd import Tensor


@dataclass
class AdamState:
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Sequence[Tensor], **kwargs) -> "AdamState":
        return cls(
            [np.zeros_like(p.data) for p in params],
            [np.zeros_like(p.data) for p in params],
            **kwargs,
        )


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float,
    weight_decay: float = 0.0,
) -> None:
    """One in-place Adam update.

    Weight decay is decoupled: ``p <- p - lr * weight_decay * p`` is applied
    before the bias-corrected Adam delta.
    """
    if lr < 0:
        raise ContractError("learning rate must be nonnegative")
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise DimensionError("params, grads and optimizer state differ in length")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if g.shape != p.data.shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape {p.data.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if weight_decay:
            p.data = p.data - lr * weight_decay * p.data
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def lr_schedule(step: int, total_steps: int, initial_lr: float, decay_fraction: float) -> float:
    """Constant ``initial_lr``, then cosine decay to 0 over the last ``decay_fraction`` of steps."""
    if total_steps <= 0:
        raise ContractError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    if not 0 < decay_fraction <= 1:
        raise ContractError("decay_fraction must lie in (0, 1]")
    start = (1.0 - decay_fraction) * total_steps
    if step < start:
        return initial_lr
    u = (step - start) / (total_steps - start)
    return initial_lr * 0.5 * (1.0 + math.cos(math.pi * u))
