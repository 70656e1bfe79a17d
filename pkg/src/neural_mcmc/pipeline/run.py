"""Staged, resumable end-to-end run: simulate, train, sample, diagnose.

Every stage writes its outputs into the run directory and a marker file
holding a fingerprint of the configuration it depends on.  A stage whose
marker matches and whose outputs exist is skipped and logged as ``cached``.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from neural_mcmc.cnf import load_flow, save_flow, train_cnf
from neural_mcmc.darcy import StructuredMesh
from neural_mcmc.errors import CheckpointError, NeuralMCMCError
from neural_mcmc.field import KLBasis, cached_basis, sample_log_field
from neural_mcmc.nn.checkpoint import load_arrays, save_arrays
from neural_mcmc.pipeline.config import RunConfig
from neural_mcmc.pipeline.dataset import add_noise, generate_dataset, load_dataset, save_dataset
from neural_mcmc.pipeline.metrics import pca_project, relative_error
from neural_mcmc.sampler import (
    PriorSpec,
    burn_and_thin,
    gelman_rubin,
    read_chain_csv,
    run_chains,
    summarize,
    write_chain_csv,
)
from neural_mcmc.vae import load_ivae, save_ivae, train_ivae

log = logging.getLogger(__name__)

STAGES = ("generate", "train-vae", "encode", "train-cnf", "sample", "diagnose")
R_HAT_GATE = 1.01

_DEPENDS = {
    "generate": ("mesh", "field", "data"),
    "train-vae": ("mesh", "field", "data", "vae"),
    "encode": ("mesh", "field", "data", "vae"),
    "train-cnf": ("mesh", "field", "data", "vae", "cnf"),
    "sample": ("mesh", "field", "data", "vae", "cnf", "sampler"),
    "diagnose": ("mesh", "field", "data", "vae", "cnf", "sampler"),
}


class StageError(NeuralMCMCError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def _write_history(path: Path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_loss", "lr"])
        for row in history:
            w.writerow([row["epoch"], repr(row["train_loss"]), repr(row["val_loss"]), repr(row["lr"])])


class Pipeline:
    def __init__(self, cfg: RunConfig, out_dir: str | Path | None = None):
        self.cfg = cfg
        self.out = Path(out_dir if out_dir is not None else cfg.io.out)
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / "stages").mkdir(exist_ok=True)
        self.mesh = StructuredMesh.unit_square(cfg.mesh.n)
        self._basis: KLBasis | None = None

    # paths -----------------------------------------------------------------

    def path(self, name: str) -> Path:
        return self.out / name

    @property
    def chains_dir(self) -> Path:
        return self.out / "chains"

    def chain_path(self, obs: int, chain: int) -> Path:
        return self.chains_dir / f"obs{obs:04d}_chain{chain}.csv"

    _OUTPUTS = {
        "generate": ("basis.kl", "train.ds", "test.ds"),
        "train-vae": ("vae.ckpt", "vae_history.csv"),
        "encode": ("latent_train.bin",),
        "train-cnf": ("cnf.ckpt", "cnf_history.csv"),
        "sample": (),
        "diagnose": ("summary.json", "diagnostics.json"),
    }

    # bookkeeping -----------------------------------------------------------

    def _marker(self, stage: str) -> Path:
        return self.out / "stages" / f"{stage}.json"

    def is_cached(self, stage: str) -> bool:
        marker = self._marker(stage)
        if not marker.exists():
            return False
        try:
            info = json.loads(marker.read_text())
        except json.JSONDecodeError:
            return False
        if info.get("fingerprint") != self.cfg.fingerprint(*_DEPENDS[stage]):
            return False
        outputs = list(self._OUTPUTS[stage])
        if stage == "sample":
            outputs += [str(p.relative_to(self.out)) for p in self._chain_paths()]
        return all((self.out / o).exists() for o in outputs)

    def _mark(self, stage: str, seconds: float) -> None:
        info = {"stage": stage, "fingerprint": self.cfg.fingerprint(*_DEPENDS[stage]), "seconds": seconds}
        self._marker(stage).write_text(json.dumps(info, indent=1))
        timings_path = self.out / "timings.json"
        timings = json.loads(timings_path.read_text()) if timings_path.exists() else {}
        timings[stage] = seconds
        timings_path.write_text(json.dumps(timings, indent=1, sort_keys=True))

    def _log_stage(self, stage: str, status: str) -> None:
        with open(self.out / "stage_log.txt", "a") as fh:
            fh.write(f"{time.strftime('%Y-%m-%dT%H:%M:%S')} {stage}: {status}\n")

    def run(self, stages: tuple[str, ...] = STAGES, force: bool = False) -> dict | None:
        summary = None
        for stage in stages:
            if not force and self.is_cached(stage):
                log.info("stage %s: cached", stage)
                self._log_stage(stage, "cached")
                continue
            log.info("stage %s: running", stage)
            t0 = time.perf_counter()
            try:
                result = getattr(self, "stage_" + stage.replace("-", "_"))()
            except StageError:
                raise
            except Exception as exc:
                self._log_stage(stage, f"failed: {exc}")
                raise StageError(stage, exc) from exc
            elapsed = time.perf_counter() - t0
            self._mark(stage, elapsed)
            self._log_stage(stage, f"done in {elapsed:.1f}s")
            if stage == "diagnose":
                summary = result
        if summary is None and "diagnose" in stages and self.path("summary.json").exists():
            summary = json.loads(self.path("summary.json").read_text())
        return summary

    # shared artifacts ------------------------------------------------------

    @property
    def basis(self) -> KLBasis:
        if self._basis is None:
            f = self.cfg.field
            self._basis = cached_basis(
                self.path("basis.kl"), self.mesh.coordinates, self.mesh.n, f.lengthscale, f.n_modes, f.mean, f.marginal_std
            )
        return self._basis

    def _require(self, name: str, stage: str) -> Path:
        p = self.path(name)
        if not p.exists():
            raise CheckpointError(f"{p} is missing; run the {stage!r} stage first")
        return p

    def _require_chain(self, obs: int, chain: int) -> Path:
        p = self.chain_path(obs, chain)
        if not p.exists():
            raise CheckpointError(f"{p} is missing; run the 'sample' stage first")
        return p

    def _chain_paths(self) -> list[Path]:
        s = self.cfg.sampler
        return [self.chain_path(o, c) for o in range(s.n_observations) for c in range(s.n_chains)]

    # stages ----------------------------------------------------------------

    def stage_generate(self) -> None:
        cfg = self.cfg
        basis = self.basis
        threads = cfg.threads()
        for name, n, stream in (("train.ds", cfg.data.n_train, 1), ("test.ds", cfg.data.n_test, 2)):
            rng = np.random.default_rng([cfg.seed, stream])
            ds = generate_dataset(basis, self.mesh, n, rng, threads)
            if cfg.data.snr > 0:
                ds = add_noise(ds, cfg.data.snr, np.random.default_rng([cfg.seed, stream, 1]))
            ds.metadata["seed"] = [cfg.seed, stream]
            save_dataset(self.path(name), ds)

    def stage_train_vae(self) -> None:
        train = load_dataset(self._require("train.ds", "generate"))
        v = self.cfg.vae
        model, result = train_ivae(
            train.inputs, train.labels, self.cfg.vae_train(), v.arch(), v.beta_kl, v.beta_pred, v.sigma_x
        )
        save_ivae(self.path("vae.ckpt"), model, {"seed": self.cfg.vae_train().seed, "best_epoch": result.best_epoch})
        _write_history(self.path("vae_history.csv"), result.history)
        np.savetxt(self.path("vae_split.txt"), result.val_indices, fmt="%d")

    def stage_encode(self) -> None:
        train = load_dataset(self._require("train.ds", "generate"))
        model = load_ivae(self._require("vae.ckpt", "train-vae"))
        latent = model.encode(train.inputs)
        save_arrays(
            self.path("latent_train.bin"),
            {"kind": "latent_dataset", "n_rows": len(train)},
            {"mean": latent.mean, "log_variance": latent.log_variance, "labels": train.labels},
        )

    def stage_train_cnf(self) -> None:
        _, arrays = load_arrays(self._require("latent_train.bin", "encode"))
        c = self.cfg.cnf
        logvar = arrays["log_variance"] if c.train_on == "draws" else None
        stack, result = train_cnf(arrays["mean"], arrays["labels"], self.cfg.cnf_train(), c.arch(), logvar)
        save_flow(self.path("cnf.ckpt"), stack, c.arch(), {"seed": self.cfg.cnf_train().seed, "best_epoch": result.best_epoch})
        _write_history(self.path("cnf_history.csv"), result.history)

    def stage_sample(self) -> None:
        test = load_dataset(self._require("test.ds", "generate"))
        encoder = load_ivae(self._require("vae.ckpt", "train-vae"))
        flow = load_flow(self._require("cnf.ckpt", "train-cnf"))
        s = self.cfg.sampler
        obs_rows = np.repeat(np.arange(s.n_observations), s.n_chains)
        chain_ids = list(range(len(obs_rows)))
        chains = run_chains(encoder, flow, PriorSpec(), test.inputs[obs_rows], self.cfg.sampler_config(), chain_ids)
        self.chains_dir.mkdir(exist_ok=True)
        for k, chain in enumerate(chains):
            write_chain_csv(self.chain_path(int(obs_rows[k]), k % s.n_chains), chain)

    def stage_diagnose(self) -> dict:
        cfg = self.cfg
        s = cfg.sampler
        scfg = cfg.sampler_config()
        test = load_dataset(self._require("test.ds", "generate"))
        encoder = load_ivae(self._require("vae.ckpt", "train-vae"))
        flow = load_flow(self._require("cnf.ckpt", "train-cnf"))
        basis = self.basis
        n_par = basis.n_modes

        per_obs = []
        r_hats = []
        acc = []
        stds = []
        for o in range(s.n_observations):
            chains = [read_chain_csv(self._require_chain(o, c)) for c in range(s.n_chains)]
            kept = [burn_and_thin(ch, scfg.burn_in, scfg.thin) for ch in chains]
            r_hat = gelman_rubin([k.states for k in kept])
            samples = np.concatenate([k.states for k in kept])
            lps = np.concatenate([k.log_posteriors for k in kept])
            post = summarize(samples, lps)
            _, t_true = sample_log_field(basis, test.labels[o])
            _, t_mean = sample_log_field(basis, post.mean)
            _, t_map = sample_log_field(basis, post.map)
            per_obs.append({
                "index": o,
                "r_hat": r_hat.tolist(),
                "acceptance_rates": [ch.acceptance_rate for ch in chains],
                "error_mean": relative_error(t_true, t_mean),
                "error_map": relative_error(t_true, t_map),
                "posterior": post.as_dict(),
                "truth": test.labels[o].tolist(),
            })
            r_hats.append(r_hat)
            acc.extend(ch.acceptance_rate for ch in chains)
            stds.append(post.std)

        r_hats = np.array(r_hats)
        worst_r_hat = r_hats.max(axis=0)
        mean_std = np.mean(stds, axis=0)
        rho = float(spearmanr(np.arange(n_par), mean_std).statistic) if n_par > 1 else 0.0
        err_mean = np.array([p["error_mean"] for p in per_obs])
        err_map = np.array([p["error_map"] for p in per_obs])

        # log-likelihood separation on the whole test set
        rng = np.random.default_rng([cfg.seed, 7])
        latent = encoder.encode(test.inputs)
        h = latent.mean + latent.std * rng.standard_normal(latent.mean.shape)
        perm = rng.permutation(len(test))
        ll_true = flow.log_prob(h, test.labels)
        ll_perm = flow.log_prob(h, test.labels[perm])

        with open(self.path("separation.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "loglik_correct", "loglik_permuted"])
            for i in range(len(test)):
                w.writerow([i, repr(float(ll_true[i])), repr(float(ll_perm[i]))])
        with open(self.path("errors.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "error_mean", "error_map"])
            for p in per_obs:
                w.writerow([p["index"], repr(p["error_mean"]), repr(p["error_map"])])
        with open(self.path("posterior_std.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["mode", "mean_posterior_std"])
            for i, v in enumerate(mean_std):
                w.writerow([i, repr(float(v))])
        n_comp = min(3, encoder.n_h)
        coords, explained = pca_project(latent.mean, n_comp)
        with open(self.path("pca.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            k = min(3, n_par)
            w.writerow([f"pc{i}" for i in range(n_comp)] + [f"lambda_{i}" for i in range(k)])
            for row, lab in zip(coords, test.labels):
                w.writerow([repr(float(v)) for v in row] + [repr(float(v)) for v in lab[:k]])

        converged = bool(np.all(worst_r_hat < R_HAT_GATE))
        summary = {
            "n_observations": s.n_observations,
            "n_chains": s.n_chains,
            "chain_length": s.chain_length,
            "burn_in": scfg.burn_in,
            "thin": scfg.thin,
            "captured_fraction": basis.captured_fraction,
            "r_hat": worst_r_hat.tolist(),
            "converged": converged,
            "status": "converged" if converged else "not converged",
            "acceptance_rate_mean": float(np.mean(acc)),
            "relative_error": {
                "mean": {"median": float(np.median(err_mean)), "average": float(err_mean.mean())},
                "map": {"median": float(np.median(err_map)), "average": float(err_map.mean())},
            },
            "posterior_std_by_mode": mean_std.tolist(),
            "spearman_mode_vs_std": rho,
            "separation": {
                "correct_mean": float(ll_true.mean()),
                "permuted_mean": float(ll_perm.mean()),
                "gap": float(ll_true.mean() - ll_perm.mean()),
            },
            "latent_pca_explained": explained.tolist(),
        }
        diagnostics = {
            "acceptance_rate": float(np.mean(acc)),
            "r_hat": worst_r_hat.tolist(),
            "n_kept": per_obs[0]["posterior"]["n_samples"],
            "observations": per_obs,
        }
        self.path("summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
        self.path("diagnostics.json").write_text(json.dumps(diagnostics, indent=1, sort_keys=True))
        return summary


def run_pipeline(cfg: RunConfig, out_dir: str | Path | None = None, stages: tuple[str, ...] = STAGES) -> dict | None:
    return Pipeline(cfg, out_dir).run(stages)
