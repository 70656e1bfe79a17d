"""Squared-exponential covariance and truncated Karhunen-Loeve log-fields."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from neural_mcmc.errors import CheckpointError, ContractError, DimensionError
from neural_mcmc.nn.checkpoint import load_arrays, read_header, save_arrays

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class KernelConfig:
    lengthscale: float = 0.25

    def __post_init__(self):
        if not self.lengthscale > 0:
            raise ContractError("lengthscale must be positive")


def kernel_eval(x, x_prime, lengthscale: float) -> float:
    if not lengthscale > 0:
        raise ContractError("lengthscale must be positive")
    d = (np.asarray(x, dtype=np.float64) - np.asarray(x_prime, dtype=np.float64)) / lengthscale
    return float(np.exp(-0.5 * np.dot(d, d)))


def build_covariance(nodes: np.ndarray, lengthscale: float) -> np.ndarray:
    """Dense kernel matrix over ``nodes`` (shape N x D)."""
    if not lengthscale > 0:
        raise ContractError("lengthscale must be positive")
    nodes = np.atleast_2d(np.asarray(nodes, dtype=np.float64))
    if nodes.shape[0] == 0:
        raise ContractError("need at least one node")
    scaled = nodes / lengthscale
    sq = np.sum(scaled**2, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * scaled @ scaled.T
    np.maximum(d2, 0.0, out=d2)
    np.fill_diagonal(d2, 0.0)
    cov = np.exp(-0.5 * d2)
    return 0.5 * (cov + cov.T)


def _fix_signs(vectors: np.ndarray) -> np.ndarray:
    # largest-magnitude entry of every eigenvector made positive, for reproducibility
    idx = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[idx, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


def eigendecompose_descending(cov: np.ndarray, count: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Eigenpairs of a symmetric matrix, largest eigenvalue first.

    With ``count`` only the leading ``count`` pairs are computed.
    """
    cov = np.asarray(cov, dtype=np.float64)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise DimensionError(f"expected a square matrix, got {cov.shape}")
    scale = max(np.max(np.abs(cov)), 1.0)
    if np.max(np.abs(cov - cov.T)) > 1e-12 * scale:
        raise ContractError("matrix is not symmetric")
    n = cov.shape[0]
    if count is None or count >= n:
        vals, vecs = np.linalg.eigh(cov)
    else:
        vals, vecs = scipy.linalg.eigh(cov, subset_by_index=[n - count, n - 1])
    order = np.argsort(vals)[::-1]
    return vals[order], _fix_signs(vecs[:, order])


@dataclass
class KLBasis:
    modes: np.ndarray  # (N_N, N_M), orthonormal columns
    eigenvalues: np.ndarray  # (N_M,), descending, clamped >= 0
    mean: np.ndarray  # (N_N,)
    marginal_std: float
    captured_fraction: float
    total_variance: float
    lengthscale: float = 0.25

    @property
    def n_modes(self) -> int:
        return self.modes.shape[1]

    @property
    def n_nodes(self) -> int:
        return self.modes.shape[0]


def truncate_basis(
    eigenvalues: np.ndarray,
    eigenvectors: np.ndarray,
    n_modes: int | None = None,
    energy_target: float | None = None,
    total_variance: float | None = None,
    mean: np.ndarray | float = 1.0,
    marginal_std: float = 1.0,
    lengthscale: float = 0.25,
) -> KLBasis:
    """Keep the dominant modes, by count or by captured-variance target.

    ``total_variance`` defaults to the sum of the supplied eigenvalues; pass
    the matrix trace when only a leading subset was computed.
    """
    vals = np.maximum(np.asarray(eigenvalues, dtype=np.float64), 0.0)
    vecs = np.asarray(eigenvectors, dtype=np.float64)
    available = vals.shape[0]
    n_nodes = vecs.shape[0]
    total = float(vals.sum()) if total_variance is None else float(total_variance)
    if (n_modes is None) == (energy_target is None):
        raise ContractError("give exactly one of n_modes and energy_target")
    if energy_target is not None:
        if not 0 < energy_target < 1:
            raise ContractError("energy_target must lie in (0, 1)")
        cumulative = np.cumsum(vals) / total
        hits = np.nonzero(cumulative >= energy_target - 1e-15)[0]
        if hits.size == 0:
            raise ContractError("energy target not reachable with the supplied eigenpairs")
        n_modes = int(hits[0]) + 1
    if not 1 <= n_modes <= n_nodes:
        raise ContractError(f"n_modes must lie in [1, {n_nodes}], got {n_modes}")
    if n_modes > available:
        raise ContractError(f"only {available} eigenpairs supplied, {n_modes} requested")
    if not marginal_std > 0:
        raise ContractError("marginal_std must be positive")
    kept = vals[:n_modes]
    mean_vec = np.broadcast_to(np.asarray(mean, dtype=np.float64), (n_nodes,)).copy()
    return KLBasis(
        modes=np.ascontiguousarray(vecs[:, :n_modes]),
        eigenvalues=kept.copy(),
        mean=mean_vec,
        marginal_std=float(marginal_std),
        captured_fraction=float(min(kept.sum() / total, 1.0)),
        total_variance=total,
        lengthscale=lengthscale,
    )


def build_basis(
    nodes: np.ndarray,
    lengthscale: float,
    n_modes: int,
    mean: float = 1.0,
    marginal_std: float = 1.0,
) -> KLBasis:
    cov = build_covariance(nodes, lengthscale)
    vals, vecs = eigendecompose_descending(cov, count=n_modes)
    return truncate_basis(
        vals,
        vecs,
        n_modes=n_modes,
        total_variance=float(np.trace(cov)),
        mean=mean,
        marginal_std=marginal_std,
        lengthscale=lengthscale,
    )


def sample_log_field(basis: KLBasis, coefficients) -> tuple[np.ndarray, np.ndarray]:
    """``log t = mean + std * modes @ (sqrt(eigenvalues) * coefficients)``.

    ``coefficients`` may be a single vector or a (B, N_M) batch.
    """
    lam = np.asarray(coefficients, dtype=np.float64)
    if lam.shape[-1] != basis.n_modes:
        raise DimensionError(f"expected {basis.n_modes} coefficients, got {lam.shape[-1]}")
    weighted = lam * np.sqrt(basis.eigenvalues)
    log_t = basis.mean + basis.marginal_std * (weighted @ basis.modes.T)
    return log_t, np.exp(log_t)


def save_basis(path: str | os.PathLike, basis: KLBasis, mesh_n: int) -> None:
    header = {
        "kind": "kl_basis",
        "mesh_n": mesh_n,
        "lengthscale": basis.lengthscale,
        "n_modes": basis.n_modes,
        "marginal_std": basis.marginal_std,
        "captured_fraction": basis.captured_fraction,
        "total_variance": basis.total_variance,
    }
    save_arrays(path, header, {"mean": basis.mean, "eigenvalues": basis.eigenvalues, "modes": basis.modes})


def load_basis(path: str | os.PathLike) -> tuple[KLBasis, dict]:
    header, arrays = load_arrays(path)
    if header.get("kind") != "kl_basis":
        raise CheckpointError(f"{path}: not a KL basis file")
    basis = KLBasis(
        modes=arrays["modes"],
        eigenvalues=arrays["eigenvalues"],
        mean=arrays["mean"],
        marginal_std=header["marginal_std"],
        captured_fraction=header["captured_fraction"],
        total_variance=header["total_variance"],
        lengthscale=header["lengthscale"],
    )
    return basis, header


def cached_basis(
    path: str | os.PathLike,
    nodes: np.ndarray,
    mesh_n: int,
    lengthscale: float,
    n_modes: int,
    mean: float = 1.0,
    marginal_std: float = 1.0,
) -> KLBasis:
    """Load ``path`` if its header matches the request, otherwise rebuild and store it."""
    if os.path.exists(path):
        try:
            head = read_header(path)
            if (
                head.get("mesh_n") == mesh_n
                and head.get("lengthscale") == lengthscale
                and head.get("n_modes") == n_modes
                and head.get("marginal_std") == marginal_std
            ):
                basis, _ = load_basis(path)
                if np.all(basis.mean == mean):
                    return basis
        except CheckpointError:
            log.warning("ignoring unreadable basis cache %s", path)
    log.info("building KL basis: %d nodes, l=%g, %d modes", len(nodes), lengthscale, n_modes)
    basis = build_basis(nodes, lengthscale, n_modes, mean, marginal_std)
    save_basis(path, basis, mesh_n)
    return basis
