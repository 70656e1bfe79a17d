"""Informed variational autoencoder: Gaussian encoder, decoder and latent predictor.

The encoder trunk feeds two linear heads (mean and log-variance).  A latent
draw goes both to the decoder, which reconstructs the standardized
observation, and to a dense predictor that regresses the physical
parameters.  Training minimizes

    reconstruction + beta_kl * KL + beta_pred * prediction.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from neural_mcmc.errors import CheckpointError, ContractError, DimensionError
from neural_mcmc.nn import autograd as ag
from neural_mcmc.nn.autograd import Tensor
from neural_mcmc.nn.checkpoint import load_arrays, save_arrays
from neural_mcmc.nn.layers import DenseLayer, Mlp, ParameterSet
from neural_mcmc.nn.train import TrainConfig, TrainResult, train_loop


@dataclass
class LatentGaussian:
    mean: np.ndarray
    log_variance: np.ndarray

    @property
    def variance(self) -> np.ndarray:
        return np.exp(self.log_variance)

    @property
    def std(self) -> np.ndarray:
        return np.exp(0.5 * self.log_variance)


@dataclass
class VaeArch:
    latent_dim: int = 8
    encoder_widths: tuple[int, ...] = (64, 32)
    decoder_widths: tuple[int, ...] = (32, 64)
    predictor_widths: tuple[int, ...] = (64, 32)
    activation: str = "tanh"
    dropout: float = 0.0


class IVaeModel:
    def __init__(
        self,
        trunk: Mlp,
        mu_head: DenseLayer,
        logvar_head: DenseLayer,
        decoder: Mlp,
        predictor: Mlp,
        beta_kl: float = 2.5e-4,
        beta_pred: float = 1e-4,
        sigma_x: float = 1.0,
        x_mean: np.ndarray | None = None,
        x_std: np.ndarray | None = None,
    ):
        self.trunk = trunk
        self.mu_head = mu_head
        self.logvar_head = logvar_head
        self.decoder = decoder
        self.predictor = predictor
        self.beta_kl = float(beta_kl)
        self.beta_pred = float(beta_pred)
        if not sigma_x > 0:
            raise ContractError("sigma_x must be positive")
        self.sigma_x = float(sigma_x)
        n_x = trunk.n_in
        self.x_mean = np.zeros(n_x) if x_mean is None else np.asarray(x_mean, dtype=np.float64)
        self.x_std = np.ones(n_x) if x_std is None else np.asarray(x_std, dtype=np.float64)
        if (
            mu_head.n_in != trunk.n_out
            or logvar_head.n_in != trunk.n_out
            or mu_head.n_out != logvar_head.n_out
            or decoder.n_in != mu_head.n_out
            or predictor.n_in != mu_head.n_out
            or decoder.n_out != n_x
        ):
            raise DimensionError("encoder, decoder and predictor dimensions disagree")

    @classmethod
    def build(
        cls,
        n_x: int,
        n_par: int,
        arch: VaeArch,
        rng: np.random.Generator,
        beta_kl: float = 2.5e-4,
        beta_pred: float = 1e-4,
        sigma_x: float = 1.0,
    ) -> "IVaeModel":
        act = arch.activation
        trunk = Mlp.build((n_x, *arch.encoder_widths), act, rng, final_activation=act, dropout=arch.dropout)
        width = trunk.n_out
        mu_head = DenseLayer.init(width, arch.latent_dim, "linear", rng)
        logvar_head = DenseLayer.init(width, arch.latent_dim, "linear", rng)
        decoder = Mlp.build((arch.latent_dim, *arch.decoder_widths, n_x), act, rng, dropout=arch.dropout)
        predictor = Mlp.build((arch.latent_dim, *arch.predictor_widths, n_par), act, rng, dropout=arch.dropout)
        return cls(trunk, mu_head, logvar_head, decoder, predictor, beta_kl, beta_pred, sigma_x)

    @property
    def n_x(self) -> int:
        return self.trunk.n_in

    @property
    def n_h(self) -> int:
        return self.mu_head.n_out

    @property
    def n_par(self) -> int:
        return self.predictor.n_out

    def parameter_set(self) -> ParameterSet:
        ps = ParameterSet()
        ps.add_mlp("trunk", self.trunk)
        ps.add_mlp("mu_head", Mlp([self.mu_head]))
        ps.add_mlp("logvar_head", Mlp([self.logvar_head]))
        ps.add_mlp("decoder", self.decoder)
        ps.add_mlp("predictor", self.predictor)
        return ps

    def fit_standardization(self, x: np.ndarray) -> None:
        x = np.asarray(x, dtype=np.float64)
        self.x_mean = x.mean(axis=0)
        std = x.std(axis=0)
        self.x_std = np.where(std > 0, std, 1.0)

    def standardize(self, x):
        return (x - self.x_mean) / self.x_std

    def _encode(self, xs, rng=None):
        feats = self.trunk(xs, rng)
        return self.mu_head(feats), self.logvar_head(feats)

    def encode(self, x) -> LatentGaussian:
        """Latent Gaussian of one observation (1-D) or a batch (2-D)."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        xb = np.atleast_2d(x)
        if xb.shape[1] != self.n_x:
            raise DimensionError(f"expected {self.n_x} observation entries, got {xb.shape[1]}")
        mu, logvar = self._encode(self.standardize(xb))
        if single:
            return LatentGaussian(mu[0], logvar[0])
        return LatentGaussian(mu, logvar)

    def decode(self, h) -> np.ndarray:
        h = np.asarray(h, dtype=np.float64)
        if h.shape[-1] != self.n_h:
            raise DimensionError(f"expected latent of size {self.n_h}, got {h.shape[-1]}")
        out = self.decoder(np.atleast_2d(h)) * self.x_std + self.x_mean
        return out[0] if h.ndim == 1 else out

    def predict(self, h) -> np.ndarray:
        h = np.asarray(h, dtype=np.float64)
        if h.shape[-1] != self.n_h:
            raise DimensionError(f"expected latent of size {self.n_h}, got {h.shape[-1]}")
        out = self.predictor(np.atleast_2d(h))
        return out[0] if h.ndim == 1 else out

    def header(self) -> dict:
        return {
            "kind": "ivae",
            "n_x": self.n_x,
            "n_h": self.n_h,
            "n_par": self.n_par,
            "beta_kl": self.beta_kl,
            "beta_pred": self.beta_pred,
            "sigma_x": self.sigma_x,
            "layers": {
                "trunk": self.trunk.spec(),
                "mu_head": Mlp([self.mu_head]).spec(),
                "logvar_head": Mlp([self.logvar_head]).spec(),
                "decoder": self.decoder.spec(),
                "predictor": self.predictor.spec(),
            },
            "dropout": self.trunk.dropout,
        }


def reparameterize(latent: LatentGaussian, eps):
    """``mean + exp(log_variance / 2) * eps``; graph-aware when the latent holds Tensors."""
    return latent.mean + ag.exp(latent.log_variance * 0.5) * eps


def kl_term(latent: LatentGaussian):
    """KL(N(mean, var) || N(0, I)) summed over latent dimensions (per row for batches)."""
    mu, logvar = latent.mean, latent.log_variance
    if isinstance(mu, Tensor) or isinstance(logvar, Tensor):
        terms = ag.square(mu) + ag.exp(logvar) - 1.0 - logvar
        return terms.sum(axis=-1) * 0.5
    logvar = np.asarray(logvar, dtype=np.float64)
    # expm1 avoids cancellation near logvar = 0; the term is nonnegative by convexity
    spread = np.maximum(np.expm1(logvar) - logvar, 0.0)
    return 0.5 * np.sum(np.square(mu) + spread, axis=-1)


def ivae_loss(
    model: IVaeModel,
    x: np.ndarray,
    lam: np.ndarray,
    rng: np.random.Generator | None = None,
    eps: np.ndarray | None = None,
    training: bool = False,
) -> tuple[Tensor, dict]:
    """Composite loss on a batch; ``x`` is in raw (unstandardized) units.

    One reparameterized draw per sample; pass ``eps`` to fix it.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    lam = np.atleast_2d(np.asarray(lam, dtype=np.float64))
    if x.shape[0] == 0:
        raise ContractError("empty batch")
    if eps is None:
        if rng is None:
            raise ContractError("need rng or eps for the reparameterized draw")
        eps = rng.standard_normal((x.shape[0], model.n_h))
    drop_rng = rng if training else None
    xs = Tensor(model.standardize(x))
    mu, logvar = model._encode(xs, drop_rng)
    latent = LatentGaussian(mu, logvar)
    h = reparameterize(latent, eps)
    recon = model.decoder(h, drop_rng)
    l_mse = ag.square(recon - xs).sum(axis=1).mean() * (1.0 / (2.0 * model.sigma_x**2))
    l_kl = kl_term(latent).mean()
    l_pred = ag.square(model.predictor(h, drop_rng) - lam).sum(axis=1).mean()
    total = l_mse + model.beta_kl * l_kl + model.beta_pred * l_pred
    parts = {"mse": l_mse.item(), "kl": l_kl.item(), "pred": l_pred.item(), "total": total.item()}
    return total, parts


def train_ivae(
    x: np.ndarray,
    lam: np.ndarray,
    cfg: TrainConfig,
    arch: VaeArch | None = None,
    beta_kl: float = 2.5e-4,
    beta_pred: float = 1e-4,
    sigma_x: float = 1.0,
) -> tuple[IVaeModel, TrainResult]:
    arch = arch or VaeArch()
    x = np.asarray(x, dtype=np.float64)
    lam = np.asarray(lam, dtype=np.float64)
    init_rng = np.random.default_rng([cfg.seed, 0])
    model = IVaeModel.build(x.shape[1], lam.shape[1], arch, init_rng, beta_kl, beta_pred, sigma_x)
    model.fit_standardization(x)

    def loss_fn(batch, rng, training):
        return ivae_loss(model, batch[0], batch[1], rng=rng, training=training)[0]

    result = train_loop(model.parameter_set(), (x, lam), loss_fn, cfg)
    return model, result


def save_ivae(path: str | os.PathLike, model: IVaeModel, extra: dict | None = None) -> None:
    header = model.header()
    if extra:
        header["meta"] = extra
    arrays = {name: t.data for name, t in model.parameter_set().named}
    arrays["x_mean"] = model.x_mean
    arrays["x_std"] = model.x_std
    save_arrays(path, header, arrays)


def _mlp_from(specs: list[dict], arrays: dict, prefix: str, dropout: float = 0.0) -> Mlp:
    layers = []
    for i, s in enumerate(specs):
        w = arrays[f"{prefix}.{i}.weights"]
        b = arrays[f"{prefix}.{i}.bias"]
        if w.shape != (s["in"], s["out"]) or b.shape != (1, s["out"]):
            raise CheckpointError(f"{prefix}.{i}: stored shapes disagree with header")
        layers.append(DenseLayer(w, b, s["activation"]))
    return Mlp(layers, dropout)


def load_ivae(path: str | os.PathLike) -> IVaeModel:
    header, arrays = load_arrays(path)
    if header.get("kind") != "ivae":
        raise CheckpointError(f"{path}: not an i-VAE checkpoint")
    try:
        spec = header["layers"]
        drop = header.get("dropout", 0.0)
        model = IVaeModel(
            _mlp_from(spec["trunk"], arrays, "trunk", drop),
            _mlp_from(spec["mu_head"], arrays, "mu_head").layers[0],
            _mlp_from(spec["logvar_head"], arrays, "logvar_head").layers[0],
            _mlp_from(spec["decoder"], arrays, "decoder", drop),
            _mlp_from(spec["predictor"], arrays, "predictor", drop),
            header["beta_kl"],
            header["beta_pred"],
            header["sigma_x"],
            arrays["x_mean"],
            arrays["x_std"],
        )
    except (KeyError, DimensionError) as exc:
        raise CheckpointError(f"{path}: inconsistent i-VAE checkpoint ({exc})") from exc
    return model


__all__ = [
    "IVaeModel",
    "LatentGaussian",
    "VaeArch",
    "ivae_loss",
    "kl_term",
    "load_ivae",
    "reparameterize",
    "save_ivae",
    "train_ivae",
]
