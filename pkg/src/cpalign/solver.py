"""Proximal operators and the per-iteration transform update.

The augmented-Lagrangian loops in align/learn repeatedly solve a quadratic
subproblem in the stacked transform increments: per-part Gauss-Newton blocks
coupled by the tree shape term. Eliminating leaf blocks into their parents
and back-substituting solves it exactly while touching only the tree's
nonzero blocks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from cpalign.shapemodel import DIM, TreeShapeModel, shape_cost_gradient

__all__ = [
    "AlmSettings",
    "BlockSystem",
    "soft_threshold",
    "solve_delta_system",
    "svd_shrink",
]


@dataclass(frozen=True)
class AlmSettings:
    """Knobs for the inexact augmented-Lagrangian solvers.

    ``beta0`` of None scales the initial penalty to 1.25 over the mean
    absolute intensity of the stacked observation, following the usual
    sparse-alignment heuristic.
    """

    beta0: Optional[float] = None
    rho: float = 1.25
    beta_max: float = 1e7
    inner_tol: float = 1e-6
    max_inner_iters: int = 500
    outer_tol: float = 1e-4
    max_outer_iters: int = 50

    def __post_init__(self):
        if self.beta0 is not None and self.beta0 <= 0:
            raise ValueError(f"beta0 must be positive, got {self.beta0}")
        if self.rho <= 1.0:
            raise ValueError(f"rho must exceed 1, got {self.rho}")
        if self.beta_max <= 0 or self.inner_tol <= 0 or self.outer_tol <= 0:
            raise ValueError("beta_max and tolerances must be positive")
        if self.max_inner_iters < 1 or self.max_outer_iters < 1:
            raise ValueError("iteration caps must be at least 1")


def soft_threshold(x: np.ndarray, alpha: float) -> np.ndarray:
    """Elementwise shrinkage: the proximal operator of alpha * l1."""
    x = np.asarray(x, dtype=float)
    return np.sign(x) * np.maximum(np.abs(x) - alpha, 0.0)


def svd_shrink(mat: np.ndarray, alpha: float) -> np.ndarray:
    """Singular-value shrinkage: the proximal operator of alpha * nuclear norm."""
    mat = np.asarray(mat, dtype=float)
    if not np.all(np.isfinite(mat)):
        raise ValueError("decomposition failed: non-finite input")
    try:
        u, sigma, vt = np.linalg.svd(mat, full_matrices=False)
    except np.linalg.LinAlgError:
        raise ValueError("decomposition failed") from None
    kept = np.maximum(sigma - alpha, 0.0)
    return (u * kept) @ vt


@dataclass
class BlockSystem:
    """Quadratic subproblem data for the stacked transform increment.

    Minimizes, over per-part 4-vectors dn_i,

        sum_i [ 0.5 dn_i' G_i dn_i - q_i' dn_i ] + eta * shape_quadratic(nu + dn)

    where G_i is the (scaled) Gauss-Newton block of part i and q_i collects
    the matching linear term.
    """

    g_blocks: Sequence[np.ndarray]
    q: np.ndarray
    model: TreeShapeModel
    eta: float

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float)
        m = self.model.m
        if self.q.shape != (DIM, m):
            raise ValueError(f"q must be {DIM} x {m}, got {self.q.shape}")
        if len(self.g_blocks) != m:
            raise ValueError(f"expected {m} G blocks, got {len(self.g_blocks)}")
        self.g_blocks = [np.asarray(g, dtype=float) for g in self.g_blocks]


def solve_delta_system(sys: BlockSystem, nu: np.ndarray) -> np.ndarray:
    """Solve the coupled normal equations exactly via tree elimination.

    The stationarity system is block-sparse on the part tree: diagonal blocks
    G_i + eta * (own edge precision + children edge precisions), off-diagonal
    blocks -eta * (child edge precision) between parent and child. Leaves are
    eliminated into their parents in reverse topological order (a sparse
    Cholesky ordering), then increments back-substitute root-to-leaf.

    Returns the 4 x m increment matrix.
    """
    model, eta = sys.model, sys.eta
    m = model.m
    nu = np.asarray(nu, dtype=float)

    diag = []
    for i in range(1, m + 1):
        block = sys.g_blocks[i - 1] + eta * model.edges[i - 1].precision
        for c in model.tree.children(i):
            block = block + eta * model.edges[c - 1].precision
        diag.append(block.copy())
    rhs = (sys.q - eta * shape_cost_gradient(nu, model)).copy()

    order = model.tree.topological_parts()
    chol: list[np.ndarray | None] = [None] * m
    try:
        # fold each part into its parent, children first
        for i in reversed(order):
            idx = i - 1
            chol[idx] = np.linalg.cholesky(diag[idx])
            p = model.tree.parent_of(i)
            if p >= 1:
                coupling = -eta * model.edges[idx].precision
                inv_c = _cho_solve(chol[idx], coupling)
                diag[p - 1] -= coupling @ inv_c
                rhs[:, p - 1] -= inv_c.T @ rhs[:, idx]
        delta = np.empty((DIM, m))
        for i in order:
            idx = i - 1
            rhs_i = rhs[:, idx].copy()
            p = model.tree.parent_of(i)
            if p >= 1:
                rhs_i -= (-eta * model.edges[idx].precision) @ delta[:, p - 1]
            delta[:, idx] = _cho_solve(chol[idx], rhs_i)
    except np.linalg.LinAlgError:
        raise ValueError(
            "degenerate system (check eta and the edge precisions)"
        ) from None
    return delta


def _cho_solve(chol_lower: np.ndarray, b: np.ndarray) -> np.ndarray:
    from scipy.linalg import solve_triangular

    y = solve_triangular(chol_lower, b, lower=True)
    return solve_triangular(chol_lower.T, y, lower=False)
