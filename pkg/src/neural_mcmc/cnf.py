"""Conditional RealNVP: affine coupling layers whose scale and shift see the parameters.

Each coupling layer keeps a frozen subset of the latent coordinates and
transforms the rest as ``h_a * exp(s) + t``, where ``s`` and ``t`` are
functions of the frozen coordinates and of a per-layer embedding of the
conditioning parameters.  Consecutive layers freeze complementary halves
(even indices first, then odd).  The base density is a standard normal.
"""

from __future__ import annotations

import math
import os
from dataclasses import asdict, dataclass

import numpy as np

from neural_mcmc.errors import CheckpointError, ContractError, DimensionError, EvaluationError
from neural_mcmc.nn import autograd as ag
from neural_mcmc.nn.autograd import Tensor, value
from neural_mcmc.nn.checkpoint import load_arrays, save_arrays
from neural_mcmc.nn.layers import DenseLayer, Mlp, ParameterSet
from neural_mcmc.nn.train import TrainConfig, TrainResult, train_loop

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class CnfArch:
    n_flows: int = 12
    cond_widths: tuple[int, ...] = (32, 64)
    hidden_width: int = 32
    merge_width: int = 32
    activation: str = "elu"
    dropout: float = 0.0


def frozen_mask(n_h: int, layer_index: int) -> np.ndarray:
    """Boolean frozen-set mask: even coordinates for even ``layer_index``, odd ones otherwise."""
    idx = np.arange(n_h)
    return (idx % 2) == (layer_index % 2)


class Branch:
    """Scale or shift network: embed frozen coords and conditioner output, concatenate, regress."""

    def __init__(self, h_net: DenseLayer, c_net: DenseLayer, head: Mlp, dropout: float = 0.0):
        if head.n_in != h_net.n_out + c_net.n_out:
            raise DimensionError("branch head width does not match the concatenated embedding")
        self.h_net = h_net
        self.c_net = c_net
        self.head = head
        self.dropout = dropout

    @classmethod
    def build(cls, n_frozen, n_cond, n_active, arch: CnfArch, final: str, rng) -> "Branch":
        h_net = DenseLayer.init(n_frozen, arch.hidden_width, arch.activation, rng)
        c_net = DenseLayer.init(n_cond, arch.hidden_width, arch.activation, rng)
        head = Mlp.build((2 * arch.hidden_width, arch.merge_width, n_active), arch.activation, rng, final)
        return cls(h_net, c_net, head, arch.dropout)

    def __call__(self, hb, cond, rng=None):
        eh = self.h_net(hb)
        if rng is not None and self.dropout > 0:
            keep = 1.0 - self.dropout
            eh = eh * ((rng.random(value(eh).shape) < keep) / keep)
        return self.head(ag.concat([eh, self.c_net(cond)], axis=1), rng)

    def mlps(self) -> dict[str, Mlp]:
        return {"h": Mlp([self.h_net]), "c": Mlp([self.c_net]), "head": self.head}


class CouplingLayer:
    def __init__(self, mask: np.ndarray, conditioner: Mlp, scale: Branch, translate: Branch):
        mask = np.asarray(mask, dtype=bool)
        self.mask = mask
        self.frozen = np.nonzero(mask)[0]
        self.active = np.nonzero(~mask)[0]
        if self.frozen.size == 0 or self.active.size == 0:
            raise ContractError("coupling mask must leave both subsets nonempty")
        self.conditioner = conditioner
        self.scale = scale
        self.translate = translate
        order = np.concatenate([self.active, self.frozen])
        self._unpermute = np.argsort(order)

    @classmethod
    def build(cls, n_h: int, n_par: int, layer_index: int, arch: CnfArch, rng) -> "CouplingLayer":
        mask = frozen_mask(n_h, layer_index)
        n_frozen = int(mask.sum())
        n_active = n_h - n_frozen
        conditioner = Mlp.build(
            (n_par, *arch.cond_widths), arch.activation, rng, final_activation=arch.activation, dropout=arch.dropout
        )
        c_out = conditioner.n_out
        scale = Branch.build(n_frozen, c_out, n_active, arch, "tanh", rng)
        translate = Branch.build(n_frozen, c_out, n_active, arch, "linear", rng)
        return cls(mask, conditioner, scale, translate)

    @property
    def n_h(self) -> int:
        return self.mask.size

    @property
    def n_par(self) -> int:
        return self.conditioner.n_in

    def scale_shift(self, hb, lam, rng=None):
        cond = self.conditioner(lam, rng)
        return self.scale(hb, cond, rng), self.translate(hb, cond, rng)

    def _check(self, h, lam):
        if value(h).shape[-1] != self.n_h or value(lam).shape[-1] != self.n_par:
            raise DimensionError(
                f"coupling expects h of size {self.n_h} and lambda of size {self.n_par}, "
                f"got {value(h).shape} and {value(lam).shape}"
            )

    def forward(self, h, lam, rng=None):
        """(h_next, log|det J|) per row."""
        self._check(h, lam)
        if isinstance(h, Tensor):
            hb = h[:, self.frozen]
            s, t = self.scale_shift(hb, lam, rng)
            new_active = h[:, self.active] * ag.exp(s) + t
            h_next = ag.concat([new_active, hb], axis=1)[:, self._unpermute]
            return h_next, s.sum(axis=1)
        hb = h[:, self.frozen]
        s, t = self.scale_shift(hb, lam)
        h_next = h.copy()
        h_next[:, self.active] = h[:, self.active] * np.exp(s) + t
        return h_next, s.sum(axis=1)

    def inverse(self, h_next, lam):
        self._check(h_next, lam)
        h_next = np.asarray(h_next, dtype=np.float64)
        hb = h_next[:, self.frozen]
        s, t = self.scale_shift(hb, lam)
        h = h_next.copy()
        h[:, self.active] = (h_next[:, self.active] - t) * np.exp(-s)
        return h

    def named_mlps(self) -> dict[str, Mlp]:
        out = {"cond": self.conditioner}
        for tag, br in (("s", self.scale), ("t", self.translate)):
            for k, m in br.mlps().items():
                out[f"{tag}_{k}"] = m
        return out


def coupling_forward(layer: CouplingLayer, h, lam):
    h2, ld = layer.forward(np.atleast_2d(h), np.atleast_2d(lam))
    if np.ndim(h) == 1:
        return h2[0], float(ld[0])
    return h2, ld


def coupling_inverse(layer: CouplingLayer, h_next, lam):
    h = layer.inverse(np.atleast_2d(h_next), np.atleast_2d(lam))
    return h[0] if np.ndim(h_next) == 1 else h


class FlowStack:
    def __init__(self, layers: list[CouplingLayer]):
        if not layers:
            raise ContractError("a flow needs at least one coupling layer")
        n_h, n_par = layers[0].n_h, layers[0].n_par
        if any(l.n_h != n_h or l.n_par != n_par for l in layers):
            raise DimensionError("coupling layers disagree on dimensions")
        self.layers = layers

    @classmethod
    def build(cls, n_h: int, n_par: int, arch: CnfArch, rng: np.random.Generator) -> "FlowStack":
        if n_h < 2:
            raise ContractError("coupling flows need a latent dimension of at least 2")
        return cls([CouplingLayer.build(n_h, n_par, k, arch, rng) for k in range(arch.n_flows)])

    @property
    def n_h(self) -> int:
        return self.layers[0].n_h

    @property
    def n_par(self) -> int:
        return self.layers[0].n_par

    def parameter_set(self) -> ParameterSet:
        ps = ParameterSet()
        for k, layer in enumerate(self.layers):
            for name, mlp in layer.named_mlps().items():
                ps.add_mlp(f"layer{k}.{name}", mlp)
        return ps

    def forward(self, h, lam, rng=None):
        total = 0.0
        for layer in self.layers:
            h, ld = layer.forward(h, lam, rng)
            total = ld + total
        return h, total

    def inverse(self, z, lam):
        for layer in reversed(self.layers):
            z = layer.inverse(z, lam)
        return z

    def log_prob(self, h, lam, rng=None):
        """Per-row log density of ``h`` given ``lam`` (batched 2-D inputs)."""
        z, log_det = self.forward(h, lam, rng)
        n = self.n_h
        if isinstance(z, Tensor):
            return ag.square(z).sum(axis=1) * -0.5 + log_det - 0.5 * n * LOG_2PI
        out = -0.5 * n * LOG_2PI - 0.5 * np.sum(z * z, axis=1) + log_det
        if not np.all(np.isfinite(out)):
            raise EvaluationError("flow log-density is not finite")
        return out

    def header(self, arch: CnfArch | None = None) -> dict:
        return {
            "kind": "cnf",
            "n_h": self.n_h,
            "n_par": self.n_par,
            "n_flows": len(self.layers),
            "masks": [l.mask.astype(int).tolist() for l in self.layers],
            "layers": [{k: m.spec() for k, m in l.named_mlps().items()} for l in self.layers],
            "arch": asdict(arch) if arch is not None else None,
        }


def flow_forward(stack: FlowStack, h, lam):
    z, ld = stack.forward(np.atleast_2d(np.asarray(h, dtype=np.float64)), np.atleast_2d(lam))
    if np.ndim(h) == 1:
        return z[0], float(ld[0])
    return z, ld


def flow_inverse(stack: FlowStack, z, lam):
    h = stack.inverse(np.atleast_2d(np.asarray(z, dtype=np.float64)), np.atleast_2d(lam))
    return h[0] if np.ndim(z) == 1 else h


def log_prob(stack: FlowStack, h, lam):
    out = stack.log_prob(np.atleast_2d(np.asarray(h, dtype=np.float64)), np.atleast_2d(lam))
    return float(out[0]) if np.ndim(h) == 1 else out


def nll_loss(stack: FlowStack, h, lam, rng=None):
    """Mean negative conditional log-likelihood as a differentiable scalar."""
    h = np.atleast_2d(np.asarray(h, dtype=np.float64))
    if h.shape[0] == 0:
        raise ContractError("empty batch")
    lam = np.atleast_2d(np.asarray(lam, dtype=np.float64))
    return -stack.log_prob(Tensor(h), Tensor(lam), rng).mean()


def flow_sample(stack: FlowStack, lam, rng: np.random.Generator):
    lam2 = np.atleast_2d(np.asarray(lam, dtype=np.float64))
    z = rng.standard_normal((lam2.shape[0], stack.n_h))
    h = stack.inverse(z, lam2)
    return h[0] if np.ndim(lam) == 1 else h


def train_cnf(
    h: np.ndarray,
    lam: np.ndarray,
    cfg: TrainConfig,
    arch: CnfArch | None = None,
    h_log_variance: np.ndarray | None = None,
) -> tuple[FlowStack, TrainResult]:
    """Fit a flow to (h, lam) pairs.

    With ``h_log_variance`` the rows of ``h`` are encoder means and each
    evaluation draws a fresh ``h + exp(logvar/2) * eps``; otherwise ``h`` is
    used as given.
    """
    arch = arch or CnfArch()
    h = np.asarray(h, dtype=np.float64)
    lam = np.asarray(lam, dtype=np.float64)
    stack = FlowStack.build(h.shape[1], lam.shape[1], arch, np.random.default_rng([cfg.seed, 0]))
    if h_log_variance is None:
        data = (h, lam)

        def loss_fn(batch, rng, training):
            return nll_loss(stack, batch[0], batch[1], rng if training else None)

    else:
        data = (h, np.asarray(h_log_variance, dtype=np.float64), lam)

        def loss_fn(batch, rng, training):
            mu, logvar, lb = batch
            draw = mu + np.exp(0.5 * logvar) * rng.standard_normal(mu.shape)
            return nll_loss(stack, draw, lb, rng if training else None)

    result = train_loop(stack.parameter_set(), data, loss_fn, cfg)
    return stack, result


def save_flow(path: str | os.PathLike, stack: FlowStack, arch: CnfArch | None = None, extra: dict | None = None) -> None:
    header = stack.header(arch)
    if extra:
        header["meta"] = extra
    save_arrays(path, header, {name: t.data for name, t in stack.parameter_set().named})


def load_flow(path: str | os.PathLike) -> FlowStack:
    header, arrays = load_arrays(path)
    if header.get("kind") != "cnf":
        raise CheckpointError(f"{path}: not a flow checkpoint")
    dropout = (header.get("arch") or {}).get("dropout", 0.0)

    def mlp(prefix, specs):
        layers = []
        for i, s in enumerate(specs):
            w, b = arrays[f"{prefix}.{i}.weights"], arrays[f"{prefix}.{i}.bias"]
            if w.shape != (s["in"], s["out"]) or b.shape != (1, s["out"]):
                raise CheckpointError(f"{prefix}.{i}: stored shapes disagree with header")
            layers.append(DenseLayer(w, b, s["activation"]))
        return Mlp(layers)

    layers = []
    try:
        for k, (mask, spec) in enumerate(zip(header["masks"], header["layers"])):
            m = {name: mlp(f"layer{k}.{name}", s) for name, s in spec.items()}
            cond = m["cond"]
            cond.dropout = dropout
            scale = Branch(m["s_h"].layers[0], m["s_c"].layers[0], m["s_head"], dropout)
            translate = Branch(m["t_h"].layers[0], m["t_c"].layers[0], m["t_head"], dropout)
            layers.append(CouplingLayer(np.asarray(mask, dtype=bool), cond, scale, translate))
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing array {exc}") from exc
    if len(layers) != header["n_flows"]:
        raise CheckpointError(f"{path}: header promises {header['n_flows']} layers, found {len(layers)}")
    return FlowStack(layers)
