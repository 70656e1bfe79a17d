"""Steady groundwater flow on the unit square with linear triangles.

Head is fixed to 1 on the left edge and 0 on the right edge; top and bottom
are no-flow.  The transmissivity is given per node and averaged over the
three vertices of each element.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from neural_mcmc.errors import ContractError, ConvergenceError, DimensionError

SENSOR_COORDS = np.round(np.arange(1, 10) * 0.1, 12)


@dataclass(frozen=True)
class StructuredMesh:
    """``n x n`` nodes on [0,1]^2, node ``(i, j)`` at ``(i, j) / (n - 1)``, index ``j*n + i``.

    Each cell is split along its lower-left to upper-right diagonal.
    """

    n: int
    coordinates: np.ndarray = field(repr=False)
    triangles: np.ndarray = field(repr=False)

    @classmethod
    def unit_square(cls, n: int) -> "StructuredMesh":
        if n < 2:
            raise ContractError("mesh needs at least 2 nodes per side")
        g = np.linspace(0.0, 1.0, n)
        xx, yy = np.meshgrid(g, g)
        coords = np.column_stack([xx.ravel(), yy.ravel()])
        i, j = np.meshgrid(np.arange(n - 1), np.arange(n - 1))
        n0 = (j * n + i).ravel()
        n1, n2, n3 = n0 + 1, n0 + n, n0 + n + 1
        tris = np.concatenate([np.column_stack([n0, n1, n3]), np.column_stack([n0, n3, n2])])
        return cls(n, coords, tris)

    @property
    def n_nodes(self) -> int:
        return self.n * self.n

    @property
    def element_size(self) -> float:
        return 1.0 / (self.n - 1)

    def node(self, i: int, j: int) -> int:
        return j * self.n + i

    @property
    def left(self) -> np.ndarray:
        return np.arange(self.n) * self.n

    @property
    def right(self) -> np.ndarray:
        return np.arange(self.n) * self.n + self.n - 1


@dataclass
class SparseSystem:
    matrix: sp.csr_matrix  # free-free block after Dirichlet elimination
    rhs: np.ndarray
    free: np.ndarray
    fixed: np.ndarray
    fixed_values: np.ndarray
    stiffness: sp.csr_matrix  # full matrix, before elimination
    n_nodes: int

    @property
    def row_offsets(self) -> np.ndarray:
        return self.matrix.indptr

    @property
    def column_indices(self) -> np.ndarray:
        return self.matrix.indices

    @property
    def values(self) -> np.ndarray:
        return self.matrix.data


@dataclass
class HeadSolution:
    head: np.ndarray
    iterations: int = 0
    relative_residual: float = 0.0


def _local_stiffness(mesh: StructuredMesh) -> np.ndarray:
    """Per-element 3x3 stiffness for unit transmissivity, shape (E, 3, 3)."""
    p = mesh.coordinates[mesh.triangles]  # (E, 3, 2)
    x, y = p[..., 0], p[..., 1]
    b = np.stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]], axis=1)
    c = np.stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]], axis=1)
    area2 = b[:, 0] * c[:, 1] - b[:, 1] * c[:, 0]
    if np.any(area2 <= 0):
        raise ContractError("mesh has non-positively oriented triangles")
    return (b[:, :, None] * b[:, None, :] + c[:, :, None] * c[:, None, :]) / (2.0 * area2[:, None, None])


def assemble_system(mesh: StructuredMesh, transmissivity: np.ndarray) -> SparseSystem:
    t = np.asarray(transmissivity, dtype=np.float64)
    if t.shape != (mesh.n_nodes,):
        raise DimensionError(f"expected {mesh.n_nodes} nodal values, got {t.shape}")
    if not np.all(t > 0) or not np.all(np.isfinite(t)):
        raise ContractError("transmissivity must be finite and strictly positive")

    t_elem = t[mesh.triangles].mean(axis=1)
    local = _local_stiffness(mesh) * t_elem[:, None, None]
    rows = np.repeat(mesh.triangles, 3, axis=1).ravel()
    cols = np.tile(mesh.triangles, (1, 3)).ravel()
    full = sp.csr_matrix((local.ravel(), (rows, cols)), shape=(mesh.n_nodes, mesh.n_nodes))
    full.sum_duplicates()

    fixed = np.concatenate([mesh.left, mesh.right])
    fixed_values = np.concatenate([np.ones(mesh.n), np.zeros(mesh.n)])
    is_free = np.ones(mesh.n_nodes, dtype=bool)
    is_free[fixed] = False
    free = np.nonzero(is_free)[0]
    a_ff = full[free][:, free].tocsr()
    rhs = -(full[free][:, fixed] @ fixed_values)
    return SparseSystem(a_ff, rhs, free, fixed, fixed_values, full, mesh.n_nodes)


def conjugate_gradient(
    matrix: sp.csr_matrix, rhs: np.ndarray, tol: float = 1e-10, max_iter: int | None = None
) -> tuple[np.ndarray, int, float]:
    n = rhs.shape[0]
    max_iter = 10 * n if max_iter is None else max_iter
    x = np.zeros(n)
    b_norm = np.linalg.norm(rhs)
    if b_norm == 0.0:
        return x, 0, 0.0
    r = rhs.copy()
    p = r.copy()
    rr = r @ r
    for it in range(1, max_iter + 1):
        ap = matrix @ p
        alpha = rr / (p @ ap)
        x += alpha * p
        r -= alpha * ap
        rr_new = r @ r
        rel = np.sqrt(rr_new) / b_norm
        if rel <= tol:
            return x, it, rel
        p = r + (rr_new / rr) * p
        rr = rr_new
    raise ConvergenceError(f"CG did not reach tol {tol:g} in {max_iter} iterations (rel. residual {rel:.3g})")


def solve_system(system: SparseSystem, tol: float = 1e-10) -> HeadSolution:
    x, iterations, rel = conjugate_gradient(system.matrix, system.rhs, tol)
    head = np.empty(system.n_nodes)
    head[system.free] = x
    head[system.fixed] = system.fixed_values
    return HeadSolution(head, iterations, rel)


def solve_head(mesh: StructuredMesh, transmissivity: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    return solve_system(assemble_system(mesh, transmissivity), tol).head


def sensor_indices(mesh: StructuredMesh) -> np.ndarray:
    """Node indices of the 9x9 sensor grid at {0.1..0.9}^2, row-major from the bottom row."""
    if (mesh.n - 1) % 10 != 0:
        raise ContractError(f"sensors at multiples of 0.1 are not nodal on a {mesh.n}x{mesh.n} mesh")
    step = (mesh.n - 1) // 10
    k = np.arange(1, 10) * step
    jj, ii = np.meshgrid(k, k, indexing="ij")
    return (jj * mesh.n + ii).ravel()


def observe(solution: HeadSolution | np.ndarray, mesh: StructuredMesh) -> np.ndarray:
    head = solution.head if isinstance(solution, HeadSolution) else np.asarray(solution)
    return head[sensor_indices(mesh)]


def boundary_flux(system: SparseSystem, head: np.ndarray) -> tuple[float, float]:
    """(inflow through the left edge, outflow through the right edge)."""
    reaction = system.stiffness @ head
    n = int(round(np.sqrt(system.n_nodes)))
    left = np.arange(n) * n
    right = left + n - 1
    return float(reaction[left].sum()), float(-reaction[right].sum())
