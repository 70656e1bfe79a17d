"""Differential-evolution Metropolis sampling against a learned likelihood.

At every iteration a fresh latent draw ``h'`` is taken from the encoder's
Gaussian for the observation, and the same draw scores both the proposed
and the current parameters.  Proposals are ``current + gamma * (a - b) + eps``
with ``a``, ``b`` two distinct states from an archive of past states that
grows every ``archive_period`` iterations.

Several independent chains can be advanced together (one vectorized flow
evaluation per iteration); each chain owns its random stream, derived from
``(seed, chain_id)``.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from neural_mcmc.errors import ContractError, InitializationError

LOG_2PI = math.log(2.0 * math.pi)


class Encoder(Protocol):
    def encode(self, x): ...


class LikelihoodModel(Protocol):
    def log_prob(self, h: np.ndarray, lam: np.ndarray) -> np.ndarray: ...


@dataclass
class PriorSpec:
    kind: str = "standard_normal"
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("standard_normal", "uniform_box"):
            raise ContractError(f"unknown prior kind {self.kind!r}")
        if self.kind == "uniform_box":
            lo = np.asarray(self.lower, dtype=np.float64)
            hi = np.asarray(self.upper, dtype=np.float64)
            if lo.shape != hi.shape or not np.all(np.isfinite(lo)) or not np.all(np.isfinite(hi)) or np.any(lo >= hi):
                raise ContractError("uniform prior needs finite bounds with lower < upper")
            self.lower, self.upper = lo, hi

    def sample(self, rng: np.random.Generator, n_par: int, size: int | None = None) -> np.ndarray:
        shape = (n_par,) if size is None else (size, n_par)
        if self.kind == "standard_normal":
            return rng.standard_normal(shape)
        return rng.uniform(self.lower, self.upper, size=shape)

    def log_density(self, lam: np.ndarray) -> np.ndarray:
        lam = np.asarray(lam, dtype=np.float64)
        if self.kind == "standard_normal":
            return -0.5 * lam.shape[-1] * LOG_2PI - 0.5 * np.sum(lam * lam, axis=-1)
        inside = np.all((lam >= self.lower) & (lam <= self.upper), axis=-1)
        log_vol = np.sum(np.log(self.upper - self.lower))
        return np.where(inside, -log_vol, -np.inf)


@dataclass
class SamplerConfig:
    chain_length: int = 10_000
    gamma: float | str = "auto"
    epsilon_std: float = 1e-3
    archive_period: int = 10
    archive_init_size: int = 2
    burn_in: int | None = None
    thin: int = 5
    seed: int = 0
    proposal_kind: str = "differential_evolution"
    baseline_std: float = 0.1
    tune_steps: int = 0
    tune_target: str = "gamma"
    tune_interval: int = 100
    tune_drop_fraction: float = 0.9
    tune_keep: bool = True

    def __post_init__(self):
        if self.chain_length < 1:
            raise ContractError("chain_length must be positive")
        if self.burn_in is None:
            self.burn_in = self.chain_length // 4
        if not 0 <= self.burn_in < self.chain_length:
            raise ContractError("burn_in must lie in [0, chain_length)")
        if self.thin < 1 or self.archive_period < 1 or self.archive_init_size < 2:
            raise ContractError("thin, archive_period >= 1 and archive_init_size >= 2 required")
        if self.epsilon_std < 0:
            raise ContractError("epsilon_std must be nonnegative")
        if self.gamma != "auto" and not float(self.gamma) >= 0:
            raise ContractError("gamma must be nonnegative or 'auto'")
        if self.proposal_kind not in ("differential_evolution", "gaussian_baseline"):
            raise ContractError(f"unknown proposal_kind {self.proposal_kind!r}")
        if not 0 <= self.tune_steps <= self.burn_in:
            raise ContractError("tune_steps must lie in [0, burn_in]")
        if self.tune_target not in ("gamma", "epsilon"):
            raise ContractError(f"unknown tune_target {self.tune_target!r}")
        if self.tune_interval < 1 or not 0 <= self.tune_drop_fraction < 1:
            raise ContractError("tune_interval >= 1 and tune_drop_fraction in [0, 1) required")

    def resolved_gamma(self, n_par: int) -> float:
        return default_gamma(n_par) if self.gamma == "auto" else float(self.gamma)


@dataclass
class Archive:
    states: np.ndarray  # preallocated buffer
    size: int = 0

    @classmethod
    def with_capacity(cls, capacity: int, n_par: int) -> "Archive":
        return cls(np.empty((capacity, n_par)))

    def append(self, state: np.ndarray) -> None:
        if self.size == len(self.states):
            grown = np.empty((2 * len(self.states) + 1, self.states.shape[1]))
            grown[: self.size] = self.states[: self.size]
            self.states = grown
        self.states[self.size] = state
        self.size += 1

    def drop_oldest(self, fraction: float) -> None:
        """Discard the oldest ``fraction`` of states, always keeping two."""
        keep = max(2, self.size - int(fraction * self.size))
        self.states[:keep] = self.states[self.size - keep : self.size].copy()
        self.size = keep

    def __len__(self) -> int:
        return self.size

    def view(self) -> np.ndarray:
        return self.states[: self.size]


@dataclass
class Chain:
    states: np.ndarray
    log_posteriors: np.ndarray
    accepted: np.ndarray
    archive_size: int = 0
    gamma: float = 0.0  # proposal scales in force at the end of the run
    epsilon_std: float = 0.0

    @property
    def acceptance_rate(self) -> float:
        return float(np.mean(self.accepted)) if len(self.accepted) else 0.0

    def __len__(self) -> int:
        return len(self.states)


def default_gamma(n_par: int) -> float:
    if n_par < 1:
        raise ContractError("n_par must be at least 1")
    return 2.38 / math.sqrt(2 * n_par)


def tune_scale(scale: float, acceptance: float) -> float:
    """Step-size update from the acceptance rate of the last tuning window."""
    if acceptance < 0.001:
        return scale * 0.1
    if acceptance < 0.05:
        return scale * 0.5
    if acceptance < 0.2:
        return scale * 0.9
    if acceptance > 0.95:
        return scale * 10.0
    if acceptance > 0.75:
        return scale * 2.0
    if acceptance > 0.5:
        return scale * 1.1
    return scale


def _draw_pair(n: int, rng: np.random.Generator) -> tuple[int, int]:
    r1 = int(rng.integers(n))
    r2 = int(rng.integers(n - 1))
    if r2 >= r1:
        r2 += 1
    return r1, r2


def propose(current: np.ndarray, archive: Archive | np.ndarray, gamma: float, epsilon_std: float, rng: np.random.Generator) -> np.ndarray:
    states = archive.view() if isinstance(archive, Archive) else np.asarray(archive)
    if len(states) < 2:
        raise ContractError("the archive needs at least two states")
    r1, r2 = _draw_pair(len(states), rng)
    eps = epsilon_std * rng.standard_normal(current.shape)
    return current + gamma * (states[r1] - states[r2]) + eps


def acceptance_prob(log_post_proposed: float, log_post_current: float) -> float:
    if log_post_proposed == -np.inf and log_post_current == -np.inf:
        raise ContractError("both states have zero posterior density")
    if math.isnan(log_post_proposed) or math.isnan(log_post_current):
        raise ContractError("log posterior is NaN")
    delta = log_post_proposed - log_post_current
    return 1.0 if delta >= 0 else math.exp(delta)


def _chain_rng(seed: int, chain_id: int) -> np.random.Generator:
    return np.random.default_rng([seed, chain_id])


def run_chains(
    encoder: Encoder,
    flow: LikelihoodModel,
    prior: PriorSpec,
    observations: np.ndarray,
    cfg: SamplerConfig,
    chain_ids: Sequence[int] | None = None,
) -> list[Chain]:
    """Advance one chain per row of ``observations`` in lockstep.

    Rows may repeat (several chains on one observation); ``chain_ids`` picks
    each chain's random stream and defaults to ``0..n-1``.

    With ``cfg.tune_steps > 0`` the first iterations form a tuning phase:
    every state enters the archive, and every ``tune_interval`` iterations
    each chain rescales gamma (or epsilon) from its recent acceptance rate.
    At the end of tuning the oldest ``tune_drop_fraction`` of each archive is
    discarded, and with ``tune_keep`` false the scale is reset.
    """
    obs = np.atleast_2d(np.asarray(observations, dtype=np.float64))
    n_chains = obs.shape[0]
    ids = list(range(n_chains)) if chain_ids is None else list(chain_ids)
    if len(ids) != n_chains:
        raise ContractError("need one chain id per observation row")
    latent = encoder.encode(obs)
    mu = np.atleast_2d(latent.mean)
    sd = np.atleast_2d(np.exp(0.5 * np.asarray(latent.log_variance)))
    n_h = mu.shape[1]
    rngs = [_chain_rng(cfg.seed, c) for c in ids]
    n_s = cfg.chain_length

    # initial states; redraw until the surrogate posterior is finite
    h = np.stack([mu[c] + sd[c] * rngs[c].standard_normal(n_h) for c in range(n_chains)])
    current = None
    cur_lp = None
    for c in range(n_chains):
        for _ in range(100):
            lam0 = prior.sample(rngs[c], _n_par(flow, prior))
            lp = _log_post(flow, prior, h[c : c + 1], lam0[None, :])[0]
            if np.isfinite(lp):
                break
        else:
            raise InitializationError(f"chain {ids[c]}: no finite log-posterior after 100 prior draws")
        if current is None:
            current = np.empty((n_chains, lam0.size))
            cur_lp = np.empty(n_chains)
        current[c] = lam0
        cur_lp[c] = lp
    n_par = current.shape[1]
    gamma = np.full(n_chains, cfg.resolved_gamma(n_par))
    eps_std = np.full(n_chains, float(cfg.epsilon_std))
    window_acc = np.zeros(n_chains)

    init_count = max(2 * n_par + 2, cfg.archive_init_size)
    capacity = init_count + 1 + cfg.tune_steps + n_s // cfg.archive_period + 1
    archives = []
    for c in range(n_chains):
        arc = Archive.with_capacity(capacity, n_par)
        for row in prior.sample(rngs[c], n_par, size=init_count):
            arc.append(row)
        arc.append(current[c])
        archives.append(arc)

    states = np.empty((n_chains, n_s, n_par))
    log_posts = np.empty((n_chains, n_s))
    accepted = np.zeros((n_chains, n_s), dtype=bool)
    states[:, 0] = current
    log_posts[:, 0] = cur_lp
    accepted[:, 0] = True

    proposal = np.empty_like(current)
    uniforms = np.empty(n_chains)
    for n in range(1, n_s):
        for c in range(n_chains):
            rng = rngs[c]
            h[c] = mu[c] + sd[c] * rng.standard_normal(n_h)
            if cfg.proposal_kind == "differential_evolution":
                proposal[c] = propose(current[c], archives[c], gamma[c], eps_std[c], rng)
            else:
                proposal[c] = current[c] + cfg.baseline_std * rng.standard_normal(n_par)
            uniforms[c] = rng.random()
        lp = _log_post(flow, prior, np.concatenate([h, h]), np.concatenate([proposal, current]))
        lp_prop, lp_cur = lp[:n_chains], lp[n_chains:]
        for c in range(n_chains):
            alpha = acceptance_prob(lp_prop[c], lp_cur[c])
            if uniforms[c] < alpha:
                current[c] = proposal[c]
                lp_cur[c] = lp_prop[c]
                accepted[c, n] = True
        states[:, n] = current
        log_posts[:, n] = lp_cur
        tuning = n < cfg.tune_steps
        # iteration n here is n+1 in one-based counting
        if tuning or (n + 1) % cfg.archive_period == 0:
            for c in range(n_chains):
                archives[c].append(current[c])
        if tuning:
            window_acc += accepted[:, n]
            if (n + 1) % cfg.tune_interval == 0:
                scales = gamma if cfg.tune_target == "gamma" else eps_std
                for c in range(n_chains):
                    scales[c] = tune_scale(scales[c], window_acc[c] / cfg.tune_interval)
                window_acc[:] = 0
            if n == cfg.tune_steps - 1:
                for c in range(n_chains):
                    archives[c].drop_oldest(cfg.tune_drop_fraction)
                if not cfg.tune_keep:
                    gamma[:] = cfg.resolved_gamma(n_par)
                    eps_std[:] = cfg.epsilon_std

    return [
        Chain(states[c], log_posts[c], accepted[c], len(archives[c]), float(gamma[c]), float(eps_std[c]))
        for c in range(n_chains)
    ]


def run_chain(encoder: Encoder, flow: LikelihoodModel, prior: PriorSpec, x, cfg: SamplerConfig, chain_id: int = 0) -> Chain:
    return run_chains(encoder, flow, prior, np.asarray(x)[None, :], cfg, [chain_id])[0]


def _n_par(flow, prior: PriorSpec) -> int:
    n = getattr(flow, "n_par", None)
    if n is None and prior.lower is not None:
        n = len(prior.lower)
    if n is None:
        raise ContractError("cannot infer the parameter dimension from the likelihood model")
    return int(n)


def _log_post(flow, prior: PriorSpec, h: np.ndarray, lam: np.ndarray) -> np.ndarray:
    lp_prior = prior.log_density(lam)
    out = np.full(len(lam), -np.inf)
    ok = np.isfinite(lp_prior)
    if np.any(ok):
        out[ok] = np.asarray(flow.log_prob(h[ok], lam[ok])) + lp_prior[ok]
    return out


def gelman_rubin(chains: Sequence[np.ndarray | Chain], index: int | None = None) -> float | np.ndarray:
    """Potential scale reduction factor.

    ``chains`` are equal-length post-burn-in sample arrays (or Chains).  With
    ``index`` a single float is returned; otherwise one value per dimension.
    """
    arrs = [np.asarray(c.states if isinstance(c, Chain) else c, dtype=np.float64) for c in chains]
    if len(arrs) < 2:
        raise ContractError("R-hat needs at least two chains")
    arrs = [a[:, None] if a.ndim == 1 else a for a in arrs]
    length = arrs[0].shape[0]
    if any(a.shape != arrs[0].shape for a in arrs) or length < 10:
        raise ContractError("chains must have equal length of at least 10")
    data = np.stack(arrs)  # (m, L, d)
    if index is not None:
        data = data[:, :, [index]]
    chain_means = data.mean(axis=1)
    w = data.var(axis=1, ddof=1).mean(axis=0)
    b = length * chain_means.var(axis=0, ddof=1)
    if np.any(w <= 0):
        raise ContractError("zero within-chain variance (degenerate chains)")
    r_hat = np.sqrt(((length - 1) / length * w + b / length) / w)
    return float(r_hat[0]) if index is not None else r_hat


def burn_and_thin(chain: Chain | np.ndarray, burn_in: int, thin: int = 1):
    length = len(chain)
    if not 0 <= burn_in < length:
        raise ContractError(f"burn_in {burn_in} must lie in [0, {length})")
    if thin < 1:
        raise ContractError("thin must be >= 1")
    sl = slice(burn_in, None, thin)
    if isinstance(chain, Chain):
        return Chain(chain.states[sl], chain.log_posteriors[sl], chain.accepted[sl], chain.archive_size, chain.gamma, chain.epsilon_std)
    return np.asarray(chain)[sl]


@dataclass
class PosteriorSummary:
    mean: np.ndarray
    std: np.ndarray
    map: np.ndarray
    n_samples: int = 0

    def as_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "map": self.map.tolist(), "n_samples": self.n_samples}


def summarize(samples: np.ndarray, log_posteriors: np.ndarray) -> PosteriorSummary:
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    lp = np.asarray(log_posteriors, dtype=np.float64)
    if samples.shape[0] == 0:
        raise ContractError("no samples to summarize")
    if lp.shape[0] != samples.shape[0]:
        raise ContractError("one log-posterior per sample required")
    return PosteriorSummary(
        mean=samples.mean(axis=0),
        std=samples.std(axis=0),
        map=samples[int(np.argmax(lp))].copy(),
        n_samples=samples.shape[0],
    )


def write_chain_csv(path: str | os.PathLike, chain: Chain) -> None:
    n_par = chain.states.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "accepted", "log_post"] + [f"lambda_{i}" for i in range(n_par)])
        for i in range(len(chain)):
            w.writerow([i, int(chain.accepted[i]), repr(float(chain.log_posteriors[i]))] + [repr(float(v)) for v in chain.states[i]])


def read_chain_csv(path: str | os.PathLike) -> Chain:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    body = np.array([[float(v) for v in r] for r in rows[1:]])
    return Chain(body[:, 3:], body[:, 2], body[:, 1].astype(bool))
