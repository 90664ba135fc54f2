"""Bipartite adjacency, Laplacian normalization, cross-hop matrices and the
combined propagation operator ``L + L_c + I`` used by DGCF.

Node layout everywhere: users occupy rows ``0..n_users-1`` and items follow at
offset ``n_users``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import sparse
from .errors import (
    DimensionMismatch,
    EmptyGraph,
    EmptyGrid,
    IndexOutOfRange,
    NegativeEntry,
    NegativeEpsilon,
    RatioOutOfRange,
)
from .sparse import SparseMatrix


@dataclass(frozen=True)
class BipartiteGraph:
    n_users: int
    n_items: int
    edges: tuple[tuple[int, int], ...]

    def __post_init__(self):
        seen = set()
        for u, i in self.edges:
            if not (0 <= u < self.n_users and 0 <= i < self.n_items):
                raise IndexOutOfRange(f"edge ({u}, {i}) outside {self.n_users}x{self.n_items}")
            if (u, i) in seen:
                raise ValueError(f"duplicate edge ({u}, {i})")
            seen.add((u, i))

    @classmethod
    def from_edges(cls, n_users: int, n_items: int, edges) -> BipartiteGraph:
        return cls(n_users, n_items, tuple(sorted((int(u), int(i)) for u, i in edges)))

    @property
    def n_nodes(self) -> int:
        return self.n_users + self.n_items

    def edge_array(self) -> np.ndarray:
        return np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)

    def user_degrees(self) -> np.ndarray:
        return np.bincount(self.edge_array()[:, 0], minlength=self.n_users)

    def item_degrees(self) -> np.ndarray:
        return np.bincount(self.edge_array()[:, 1], minlength=self.n_items)

    def user_items(self) -> list[set[int]]:
        items = [set() for _ in range(self.n_users)]
        for u, i in self.edges:
            items[u].add(i)
        return items

    def interaction_matrix(self) -> SparseMatrix:
        """The ``n_users x n_items`` 0/1 block R."""
        e = self.edge_array()
        return sparse.coo_arrays(e[:, 0], e[:, 1], np.ones(len(e)),
                                 self.n_users, self.n_items)


@dataclass(frozen=True)
class PropagationOperator:
    matrix: SparseMatrix
    epsilon: float
    includes_identity: bool = True
    drop_ratio: float = 0.0

    @property
    def n(self) -> int:
        return self.matrix.n_rows


def build_adjacency(g: BipartiteGraph) -> SparseMatrix:
    """Symmetric 0/1 block matrix ``[[0, R], [R^T, 0]]``."""
    if not g.edges:
        raise EmptyGraph("bipartite graph has no edges")
    e = g.edge_array()
    u = e[:, 0]
    i = e[:, 1] + g.n_users
    rows = np.concatenate([u, i])
    cols = np.concatenate([i, u])
    return sparse.coo_arrays(rows, cols, np.ones(len(rows)), g.n_nodes, g.n_nodes)


def _inv_sqrt_degrees(a: SparseMatrix) -> np.ndarray:
    deg = sparse.row_sums(a)
    out = np.zeros_like(deg)
    pos = deg > 0
    out[pos] = 1.0 / np.sqrt(deg[pos])
    return out


def sym_normalize(a: SparseMatrix) -> SparseMatrix:
    """``D^{-1/2} A D^{-1/2}`` with zero-degree rows left at zero."""
    if a.n_rows != a.n_cols:
        raise DimensionMismatch(f"normalization needs a square matrix, got {a.shape}")
    if np.any(a.values < 0):
        raise NegativeEntry("normalization needs a nonnegative matrix")
    d = _inv_sqrt_degrees(a)
    return sparse.diag_scale(a, d, d)


def cross_hop_matrix(a: SparseMatrix, epsilon: float, keep_diagonal: bool = True) -> SparseMatrix:
    """Normalized two-hop matrix ``C = A^2`` with entries ``<= epsilon`` removed.

    Normalization happens before filtering, and the filter keeps a value only
    when it is strictly greater than ``epsilon``.  ``keep_diagonal=False``
    zeroes the diagonal of ``C`` (the node degrees) before normalizing.
    """
    if epsilon < 0:
        raise NegativeEpsilon(f"epsilon must be >= 0, got {epsilon}")
    c = sparse.matmul(a, a)
    if not keep_diagonal:
        c = sparse.keep_entries(c, c.row_indices() != c.col_indices)
    lc = sym_normalize(c)
    return sparse.keep_entries(lc, lc.values > epsilon)


def propagation_operator(l: SparseMatrix, l_c: SparseMatrix, epsilon: float = 0.0) -> PropagationOperator:
    """Combine the direct and cross-hop Laplacians with the identity."""
    if l.shape != l_c.shape or l.n_rows != l.n_cols:
        raise DimensionMismatch(f"operators must be equal and square: {l.shape} vs {l_c.shape}")
    m = sparse.add(l, l_c, sparse.identity(l.n_rows))
    return PropagationOperator(m, float(epsilon), includes_identity=True, drop_ratio=0.0)


def dgcf_operator(g: BipartiteGraph, epsilon: float, keep_diagonal: bool = True) -> PropagationOperator:
    """Convenience: the full ``L + L~_c + I`` for a graph."""
    a = build_adjacency(g)
    return propagation_operator(
        sym_normalize(a), cross_hop_matrix(a, epsilon, keep_diagonal), epsilon
    )


def drop_edges(p: PropagationOperator, ratio: float, seed) -> PropagationOperator:
    """Remove ``floor(ratio * m)`` of the ``m`` off-diagonal entries uniformly.

    Self entries are never dropped and nothing is renormalized.  ``seed`` may be
    an int or a ``numpy.random.Generator``.
    """
    if not 0.0 <= ratio < 1.0:
        raise RatioOutOfRange(f"drop ratio must be in [0, 1), got {ratio}")
    m = p.matrix
    off = np.flatnonzero(m.row_indices() != m.col_indices)
    n_drop = int(np.floor(ratio * len(off)))
    if n_drop == 0:
        return PropagationOperator(m, p.epsilon, p.includes_identity, float(ratio))
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    keep = np.ones(m.nnz, dtype=bool)
    keep[rng.choice(off, size=n_drop, replace=False)] = False
    return PropagationOperator(
        sparse.keep_entries(m, keep), p.epsilon, p.includes_identity, float(ratio)
    )


def edge_ratio(n_cross: int, n_direct: int) -> float:
    """Greater count over smaller count; infinite when either is zero."""
    lo, hi = min(n_cross, n_direct), max(n_cross, n_direct)
    return float("inf") if lo == 0 else hi / lo


def epsilon_table(a: SparseMatrix, grid) -> list[dict]:
    """Cross/direct edge counts and their ratio for every grid value."""
    c = sym_normalize(sparse.matmul(a, a))
    rows = []
    for eps in grid:
        if eps < 0:
            raise NegativeEpsilon(f"epsilon must be >= 0, got {eps}")
        n_cross = int(np.count_nonzero(c.values > eps))
        rows.append({
            "epsilon": float(eps),
            "n_cross": n_cross,
            "n_direct": a.nnz,
            "ratio": edge_ratio(n_cross, a.nnz),
        })
    return rows


def select_epsilon(a: SparseMatrix, candidate_grid) -> float:
    """Grid value whose cross/direct edge ratio is closest to 1 (ties: larger epsilon)."""
    grid = list(candidate_grid)
    if not grid:
        raise EmptyGrid("epsilon grid is empty")
    table = epsilon_table(a, grid)
    best = min(table, key=lambda r: (abs(r["ratio"] - 1.0), -r["epsilon"]))
    return best["epsilon"]


def write_operator(p: PropagationOperator, path) -> None:
    """Text export: ``N nnz epsilon drop_ratio`` then one ``row col value`` per line."""
    m = p.matrix
    with open(path, "w") as fh:
        fh.write(f"{m.n_rows} {m.nnz} {p.epsilon!r} {p.drop_ratio!r}\n")
        for r, c, v in zip(m.row_indices(), m.col_indices, m.values):
            fh.write(f"{r} {c} {float(v)!r}\n")


def read_operator(path) -> PropagationOperator:
    with open(path) as fh:
        n, nnz, eps, ratio = fh.readline().split()
        body = np.loadtxt(fh, ndmin=2) if int(nnz) else np.zeros((0, 3))
    n = int(n)
    m = sparse.coo_arrays(body[:, 0], body[:, 1], body[:, 2], n, n)
    return PropagationOperator(m, float(eps), True, float(ratio))
