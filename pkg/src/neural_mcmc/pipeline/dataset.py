"""Simulated (observation, parameter) datasets for the groundwater problem."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from neural_mcmc.darcy import StructuredMesh, observe, sensor_indices, solve_head
from neural_mcmc.errors import CheckpointError, ContractError, ConvergenceError
from neural_mcmc.field import KLBasis, sample_log_field
from neural_mcmc.nn.checkpoint import load_arrays, save_arrays


@dataclass
class Dataset:
    inputs: np.ndarray  # (N, N_x)
    labels: np.ndarray  # (N, N_par)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.inputs) != len(self.labels):
            raise ContractError("inputs and labels differ in row count")

    def __len__(self) -> int:
        return len(self.inputs)


def simulate(basis: KLBasis, mesh: StructuredMesh, lam: np.ndarray) -> np.ndarray:
    """Sensor heads for one coefficient vector."""
    _, t = sample_log_field(basis, lam)
    return observe(solve_head(mesh, t), mesh)


def generate_dataset(
    basis: KLBasis,
    mesh: StructuredMesh,
    count: int,
    rng: np.random.Generator,
    threads: int = 1,
    labels: np.ndarray | None = None,
) -> Dataset:
    """Draw ``lambda ~ N(0, I)`` (unless ``labels`` is given) and simulate each row.

    All random numbers are drawn before the solves start, so the result does
    not depend on ``threads``.
    """
    if count < 0:
        raise ContractError("count must be nonnegative")
    lam = rng.standard_normal((count, basis.n_modes)) if labels is None else np.asarray(labels, dtype=np.float64)
    if lam.shape != (count, basis.n_modes):
        raise ContractError(f"labels must have shape ({count}, {basis.n_modes})")
    n_x = len(sensor_indices(mesh))
    x = np.empty((count, n_x))

    def work(i: int) -> None:
        try:
            x[i] = simulate(basis, mesh, lam[i])
        except ConvergenceError as exc:
            raise ConvergenceError(f"sample {i}: {exc}") from exc

    if threads > 1 and count > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(work, range(count)))
    else:
        for i in range(count):
            work(i)
    meta = {
        "forward_model": "darcy",
        "mesh_n": mesh.n,
        "lengthscale": basis.lengthscale,
        "n_modes": basis.n_modes,
        "noise": None,
    }
    return Dataset(x, lam, meta)


def add_noise(dataset: Dataset, snr: float, rng: np.random.Generator) -> Dataset:
    """Additive Gaussian noise per channel with std ``RMS(channel) / snr``."""
    if not snr > 0:
        raise ContractError("snr must be positive")
    rms = np.sqrt(np.mean(dataset.inputs**2, axis=0))
    sigma = rms / snr
    noisy = dataset.inputs + rng.standard_normal(dataset.inputs.shape) * sigma
    meta = dict(dataset.metadata, noise={"kind": "gaussian", "snr": snr})
    return Dataset(noisy, dataset.labels.copy(), meta)


def save_dataset(path: str | os.PathLike, dataset: Dataset) -> None:
    n_x = dataset.inputs.shape[1] if dataset.inputs.ndim == 2 else 0
    n_par = dataset.labels.shape[1] if dataset.labels.ndim == 2 else 0
    records = np.hstack([dataset.inputs.reshape(len(dataset), n_x), dataset.labels.reshape(len(dataset), n_par)])
    header = {"kind": "dataset", "n_rows": len(dataset), "n_x": n_x, "n_par": n_par, "metadata": dataset.metadata}
    save_arrays(path, header, {"records": records})


def load_dataset(path: str | os.PathLike) -> Dataset:
    header, arrays = load_arrays(path)
    if header.get("kind") != "dataset":
        raise CheckpointError(f"{path}: not a dataset file")
    rec = arrays["records"]
    n_x, n_par = header["n_x"], header["n_par"]
    if rec.shape != (header["n_rows"], n_x + n_par):
        raise CheckpointError(f"{path}: record block shape {rec.shape} disagrees with header")
    return Dataset(rec[:, :n_x].copy(), rec[:, n_x:].copy(), header.get("metadata", {}))
