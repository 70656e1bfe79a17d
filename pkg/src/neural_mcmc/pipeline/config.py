"""Flat ``key = value`` run configuration.

One setting per line, ``#`` starts a comment, keys are namespaced by
section (``mesh.n``, ``vae.latent_dim``, ``sampler.chain_length`` ...).
Unknown keys are rejected.  Lists are comma separated.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path

from neural_mcmc.cnf import CnfArch
from neural_mcmc.errors import ConfigError, ContractError
from neural_mcmc.nn.train import TrainConfig
from neural_mcmc.sampler import SamplerConfig
from neural_mcmc.vae import VaeArch


@dataclass
class MeshSection:
    n: int = 21


@dataclass
class FieldSection:
    lengthscale: float = 0.25
    n_modes: int = 8
    mean: float = 1.0
    marginal_std: float = 1.0


@dataclass
class DataSection:
    n_train: int = 4000
    n_test: int = 1000
    snr: float = 0.0  # 0 disables observation noise


@dataclass
class VaeSection:
    latent_dim: int = 8
    encoder_widths: tuple = (64, 32)
    decoder_widths: tuple = (32, 64)
    predictor_widths: tuple = (64, 32)
    activation: str = "tanh"
    dropout: float = 0.0
    beta_kl: float = 2.5e-4
    beta_pred: float = 1e-4
    sigma_x: float = 1.0
    batch_size: int = 32
    max_epochs: int = 250
    initial_lr: float = 1e-3
    decay_fraction: float = 0.8
    weight_decay: float = 0.05
    l2_rate: float = 1e-3
    patience: int = 25
    split_fraction: float = 0.8

    def arch(self) -> VaeArch:
        return VaeArch(
            self.latent_dim,
            tuple(self.encoder_widths),
            tuple(self.decoder_widths),
            tuple(self.predictor_widths),
            self.activation,
            self.dropout,
        )


@dataclass
class CnfSection:
    n_flows: int = 12
    cond_widths: tuple = (32, 64)
    hidden_width: int = 32
    merge_width: int = 32
    activation: str = "elu"
    dropout: float = 0.0
    train_on: str = "draws"
    batch_size: int = 32
    max_epochs: int = 250
    initial_lr: float = 1e-3
    decay_fraction: float = 0.8
    weight_decay: float = 0.05
    l2_rate: float = 1e-3
    patience: int = 25
    split_fraction: float = 0.8

    def arch(self) -> CnfArch:
        return CnfArch(
            self.n_flows, tuple(self.cond_widths), self.hidden_width, self.merge_width, self.activation, self.dropout
        )


@dataclass
class SamplerSection:
    chain_length: int = 10_000
    n_chains: int = 2
    n_observations: int = 20
    gamma: str = "auto"
    epsilon_std: float = 1e-3
    archive_period: int = 10
    archive_init_size: int = 2
    burn_in: int = -1  # negative: a quarter of the chain
    thin: int = 5
    proposal_kind: str = "differential_evolution"
    baseline_std: float = 0.1
    tune_steps: int = 0
    tune_target: str = "gamma"
    tune_interval: int = 100
    tune_drop_fraction: float = 0.9
    tune_keep: bool = True


@dataclass
class IoSection:
    out: str = "run"
    threads: int = 0  # 0: NEURAL_MCMC_THREADS or the CPU count


_TRAIN_KEYS = ("batch_size", "max_epochs", "initial_lr", "decay_fraction", "weight_decay", "l2_rate", "patience", "split_fraction")


@dataclass
class RunConfig:
    seed: int = 0
    mesh: MeshSection = dataclasses.field(default_factory=MeshSection)
    field: FieldSection = dataclasses.field(default_factory=FieldSection)
    data: DataSection = dataclasses.field(default_factory=DataSection)
    vae: VaeSection = dataclasses.field(default_factory=VaeSection)
    cnf: CnfSection = dataclasses.field(default_factory=CnfSection)
    sampler: SamplerSection = dataclasses.field(default_factory=SamplerSection)
    io: IoSection = dataclasses.field(default_factory=IoSection)

    # derived settings ------------------------------------------------------

    def vae_train(self) -> TrainConfig:
        return TrainConfig(seed=self.seed + 101, **{k: getattr(self.vae, k) for k in _TRAIN_KEYS})

    def cnf_train(self) -> TrainConfig:
        return TrainConfig(seed=self.seed + 202, **{k: getattr(self.cnf, k) for k in _TRAIN_KEYS})

    def sampler_config(self) -> SamplerConfig:
        s = self.sampler
        gamma: float | str = "auto" if str(s.gamma) == "auto" else float(s.gamma)
        return SamplerConfig(
            chain_length=s.chain_length,
            gamma=gamma,
            epsilon_std=s.epsilon_std,
            archive_period=s.archive_period,
            archive_init_size=s.archive_init_size,
            burn_in=None if s.burn_in < 0 else s.burn_in,
            thin=s.thin,
            seed=self.seed + 303,
            proposal_kind=s.proposal_kind,
            baseline_std=s.baseline_std,
            tune_steps=s.tune_steps,
            tune_target=s.tune_target,
            tune_interval=s.tune_interval,
            tune_drop_fraction=s.tune_drop_fraction,
            tune_keep=s.tune_keep,
        )

    def threads(self) -> int:
        if self.io.threads > 0:
            return self.io.threads
        env = os.environ.get("NEURAL_MCMC_THREADS")
        if env:
            try:
                return max(1, int(env))
            except ValueError as exc:
                raise ConfigError(f"NEURAL_MCMC_THREADS must be an integer, got {env!r}") from exc
        return os.cpu_count() or 1

    def validate(self) -> "RunConfig":
        n = self.mesh.n
        if n < 11 or (n - 1) % 10:
            raise ConfigError(f"mesh.n = {n}: sensors at multiples of 0.1 need n - 1 divisible by 10")
        if not 1 <= self.field.n_modes <= n * n:
            raise ConfigError("field.n_modes must lie in [1, mesh.n^2]")
        if self.field.lengthscale <= 0 or self.field.marginal_std <= 0:
            raise ConfigError("field.lengthscale and field.marginal_std must be positive")
        if self.data.n_train < 10 or self.data.n_test < 1:
            raise ConfigError("data.n_train >= 10 and data.n_test >= 1 required")
        if self.data.snr < 0:
            raise ConfigError("data.snr must be nonnegative")
        if self.vae.latent_dim < 2:
            raise ConfigError("vae.latent_dim must be at least 2 (coupling layers split it)")
        if self.cnf.n_flows < 2:
            raise ConfigError("cnf.n_flows must be at least 2 so alternating masks cover every component")
        if self.cnf.train_on not in ("draws", "mean"):
            raise ConfigError("cnf.train_on must be 'draws' or 'mean'")
        if self.sampler.n_chains < 2:
            raise ConfigError("sampler.n_chains must be at least 2 for R-hat")
        if not 1 <= self.sampler.n_observations <= self.data.n_test:
            raise ConfigError("sampler.n_observations must lie in [1, data.n_test]")
        try:
            self.vae_train()
            self.cnf_train()
            self.sampler_config()
            self.vae.arch()
            self.cnf.arch()
        except (ContractError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        return self

    # serialization ---------------------------------------------------------

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def fingerprint(self, *sections: str) -> str:
        d = self.to_dict()
        d.pop("io")
        blob = {"seed": d["seed"], **{s: d[s] for s in sections}}
        return hashlib.sha256(json.dumps(blob, sort_keys=True).encode()).hexdigest()[:16]

    def dumps(self) -> str:
        lines = [f"seed = {self.seed}"]
        for section in ("mesh", "field", "data", "vae", "cnf", "sampler", "io"):
            obj = getattr(self, section)
            for f in dataclasses.fields(obj):
                v = getattr(obj, f.name)
                text = ",".join(str(x) for x in v) if isinstance(v, tuple) else str(v)
                lines.append(f"{section}.{f.name} = {text}")
        return "\n".join(lines) + "\n"


def _convert(raw: str, default, key: str):
    try:
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(p) for p in raw.split(",") if p.strip())
        return raw
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from exc


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (p.strip() for p in line.split("=", 1))
        if key == "seed":
            cfg.seed = _convert(raw, 0, key)
            continue
        section, _, name = key.partition(".")
        obj = getattr(cfg, section, None)
        if not dataclasses.is_dataclass(obj) or not name or name not in {f.name for f in dataclasses.fields(obj)}:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if section == "sampler" and name == "gamma":
            value = raw if raw == "auto" else str(_convert(raw, 0.0, key))
        else:
            value = _convert(raw, getattr(obj, name), key)
        setattr(obj, name, value)
    return cfg


def load_config(path: str | os.PathLike | None) -> RunConfig:
    if path is None:
        return RunConfig().validate()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text).validate()


def smoke_config() -> RunConfig:
    """11x11 mesh, 4 modes, 500 training samples and tiny networks."""
    cfg = RunConfig()
    cfg.mesh.n = 11
    cfg.field.n_modes = 4
    cfg.data.n_train = 500
    cfg.data.n_test = 50
    cfg.vae = VaeSection(latent_dim=4, encoder_widths=(32, 16), decoder_widths=(16, 32), predictor_widths=(16,),
                         batch_size=64, max_epochs=30, patience=10)
    cfg.cnf = CnfSection(n_flows=4, cond_widths=(16,), hidden_width=16, merge_width=16,
                         batch_size=64, max_epochs=30, patience=10)
    cfg.sampler.chain_length = 2000
    cfg.sampler.n_observations = 4
    return cfg
