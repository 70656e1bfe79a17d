"""Reconstruction error and latent-space projections."""

from __future__ import annotations

import numpy as np

from neural_mcmc.errors import ContractError


def relative_error(t_true, t_pred) -> float:
    t_true = np.asarray(t_true, dtype=np.float64)
    denom = np.linalg.norm(t_true)
    if denom == 0:
        raise ContractError("reference field is identically zero")
    return float(np.linalg.norm(t_true - np.asarray(t_pred, dtype=np.float64)) / denom)


def pca_project(vectors, components: int) -> tuple[np.ndarray, np.ndarray]:
    """Project centered rows onto the leading principal axes.

    Returns the coordinates and the fraction of variance explained by each
    retained component.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ContractError("need at least two row vectors")
    if not 1 <= components <= x.shape[1]:
        raise ContractError(f"components must lie in [1, {x.shape[1]}]")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / (x.shape[0] - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    vals, vecs = np.maximum(vals[order], 0.0), vecs[:, order]
    total = vals.sum()
    explained = vals[:components] / total if total > 0 else np.zeros(components)
    return centered @ vecs[:, :components], explained
