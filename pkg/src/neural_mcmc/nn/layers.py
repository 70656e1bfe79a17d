"""Dense layers and multilayer perceptrons.

Every layer works on both :class:`~neural_mcmc.nn.autograd.Tensor` inputs
(builds a graph for training) and plain ``ndarray`` inputs (fast, graph-free
evaluation).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from neural_mcmc.errors import ContractError, DimensionError
from neural_mcmc.nn.autograd import ACTIVATIONS, Tensor, value


def xavier_uniform(fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class DenseLayer:
    """``activation(x @ W + b)`` with ``W`` of shape (in, out)."""

    def __init__(self, weights: np.ndarray, bias: np.ndarray, activation: str = "linear"):
        weights = np.asarray(weights, dtype=np.float64)
        bias = np.asarray(bias, dtype=np.float64).reshape(1, -1)
        if weights.ndim != 2 or bias.shape[1] != weights.shape[1]:
            raise DimensionError(f"weights {weights.shape} and bias {bias.shape} disagree")
        if activation not in ACTIVATIONS:
            raise ContractError(f"unknown activation {activation!r}")
        self.weights = Tensor(weights, requires_grad=True)
        self.bias = Tensor(bias, requires_grad=True)
        self.activation = activation

    @classmethod
    def init(cls, n_in: int, n_out: int, activation: str, rng: np.random.Generator) -> "DenseLayer":
        return cls(xavier_uniform(n_in, n_out, rng), np.zeros((1, n_out)), activation)

    @property
    def n_in(self) -> int:
        return self.weights.shape[0]

    @property
    def n_out(self) -> int:
        return self.weights.shape[1]

    def parameters(self) -> list[Tensor]:
        return [self.weights, self.bias]

    def __call__(self, x):
        act = ACTIVATIONS[self.activation]
        if isinstance(x, Tensor):
            if x.shape[-1] != self.n_in:
                raise DimensionError(f"expected {self.n_in} input columns, got {x.shape[-1]}")
            return act(x @ self.weights + self.bias)
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.n_in:
            raise DimensionError(f"expected {self.n_in} input columns, got {x.shape[-1]}")
        return act(x @ self.weights.data + self.bias.data)


def dense_forward(layer: DenseLayer, x):
    return layer(x)


@dataclass
class Mlp:
    layers: list[DenseLayer]
    dropout: float = 0.0

    def __post_init__(self):
        for a, b in zip(self.layers, self.layers[1:]):
            if a.n_out != b.n_in:
                raise DimensionError(f"layer widths do not chain: {a.n_out} -> {b.n_in}")

    @classmethod
    def build(
        cls,
        widths: Sequence[int],
        activation: str,
        rng: np.random.Generator,
        final_activation: str = "linear",
        dropout: float = 0.0,
    ) -> "Mlp":
        """Layers ``widths[0] -> widths[1] -> ... -> widths[-1]``."""
        if len(widths) < 2:
            raise ContractError("an MLP needs at least input and output widths")
        layers = []
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            last = i == len(widths) - 2
            layers.append(DenseLayer.init(a, b, final_activation if last else activation, rng))
        return cls(layers, dropout)

    @property
    def n_in(self) -> int:
        return self.layers[0].n_in

    @property
    def n_out(self) -> int:
        return self.layers[-1].n_out

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]

    def weight_matrices(self) -> list[Tensor]:
        return [layer.weights for layer in self.layers]

    def __call__(self, x, rng: np.random.Generator | None = None):
        """Forward pass; inverted dropout after hidden layers when ``rng`` is given."""
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if rng is not None and self.dropout > 0 and i < len(self.layers) - 1:
                keep = 1.0 - self.dropout
                mask = (rng.random(value(x).shape) < keep) / keep
                x = x * mask
        return x

    def spec(self) -> list[dict]:
        return [{"in": l.n_in, "out": l.n_out, "activation": l.activation} for l in self.layers]


@dataclass
class ParameterSet:
    """Ordered, named collection of trainable tensors of one model."""

    named: list[tuple[str, Tensor]] = field(default_factory=list)

    def add_mlp(self, prefix: str, mlp: Mlp) -> None:
        for i, layer in enumerate(mlp.layers):
            self.named.append((f"{prefix}.{i}.weights", layer.weights))
            self.named.append((f"{prefix}.{i}.bias", layer.bias))

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named]

    def weights(self) -> list[Tensor]:
        return [t for name, t in self.named if name.endswith(".weights")]

    def snapshot(self) -> list[np.ndarray]:
        return [t.data.copy() for _, t in self.named]

    def restore(self, arrays: Sequence[np.ndarray]) -> None:
        for (_, t), a in zip(self.named, arrays):
            t.data = np.array(a, dtype=np.float64, copy=True)
