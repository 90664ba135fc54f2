"""Random-walk laboratory for parity oscillation on bipartite graphs.

Walks use the column-stochastic transition ``P[i, j] = w_ij / d(j)`` so that a
distribution ``x`` evolves as ``x <- P x`` and keeps unit 1-norm.  This is a
different normalization from the symmetric one used by the model.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import sparse
from .errors import DimensionMismatch, EmptyGraph, NoConvergence, NotBipartite, ZeroColumn
from .graph import BipartiteGraph
from .sparse import SparseMatrix

DEFAULT_TOL = 1e-10
DEFAULT_MAX_STEPS = 100_000
# oscillating <=> amplitude above this; limits are only known to ~DEFAULT_TOL
DEFAULT_AMPLITUDE_TOL = 1e-8


@dataclass
class RandomWalkTrace:
    steps: list[np.ndarray] = field(default_factory=list)
    even_limit: np.ndarray | None = None
    odd_limit: np.ndarray | None = None
    oscillating: bool = False
    amplitude: float = 0.0
    n_steps: int = 0


def distribution(values) -> np.ndarray:
    """Validate and return a probability vector."""
    x = np.asarray(values, dtype=np.float64)
    if x.ndim != 1 or np.any(x < 0) or abs(x.sum() - 1.0) > 1e-12:
        raise ValueError("distribution must be nonnegative and sum to 1")
    return x


def column_stochastic(a: SparseMatrix) -> SparseMatrix:
    """Scale each column of ``a`` by the reciprocal of its sum."""
    csum = np.bincount(a.col_indices, weights=a.values, minlength=a.n_cols)
    if np.any(csum <= 0):
        raise ZeroColumn(f"columns {np.flatnonzero(csum <= 0).tolist()} sum to zero")
    return sparse.diag_scale(a, right=1.0 / csum)


def walk(p: SparseMatrix, x0, steps: int) -> RandomWalkTrace:
    """Iterate ``x <- P x`` for ``steps`` steps, keeping every iterate."""
    x = distribution(x0)
    if p.n_cols != x.shape[0]:
        raise DimensionMismatch(f"transition {p.shape} vs vector of length {x.shape[0]}")
    csr = p.to_scipy()
    trace = RandomWalkTrace(steps=[x])
    for _ in range(steps):
        x = csr @ x
        trace.steps.append(x)
    trace.n_steps = steps
    return trace


def stationary_distribution(a: SparseMatrix) -> np.ndarray:
    """Degree-proportional vector ``d(v) / 2|E|``."""
    d = sparse.row_sums(a)
    total = d.sum()
    if a.nnz == 0 or total <= 0:
        raise EmptyGraph("graph has no edges")
    return d / total


def detect_oscillation(a: SparseMatrix, x0, max_steps: int = DEFAULT_MAX_STEPS,
                       tol: float = DEFAULT_TOL,
                       amplitude_tol: float = DEFAULT_AMPLITUDE_TOL,
                       keep_steps: bool = False) -> RandomWalkTrace:
    """Walk until the even and odd subsequences both settle, then compare them.

    A parity subsequence has settled once ``||x_{t+2} - x_t||_1 < tol``.  The
    last even and odd iterates are reported as the two limits.
    """
    p = column_stochastic(a).to_scipy()
    x = distribution(x0)
    if p.shape[1] != x.shape[0]:
        raise DimensionMismatch(f"adjacency {p.shape} vs vector of length {x.shape[0]}")
    trace = RandomWalkTrace()
    if keep_steps:
        trace.steps.append(x)
    window = deque([x], maxlen=3)
    settled = {0: False, 1: False}
    t = 0
    while t < max_steps:
        x = p @ x
        t += 1
        window.append(x)
        if keep_steps:
            trace.steps.append(x)
        if len(window) == 3:
            settled[t % 2] = float(np.abs(window[2] - window[0]).sum()) < tol
        if settled[0] and settled[1]:
            break
    else:
        raise NoConvergence(f"parity subsequences did not settle within {max_steps} steps")
    last, prev = window[2], window[1]
    trace.even_limit, trace.odd_limit = (last, prev) if t % 2 == 0 else (prev, last)
    trace.amplitude = float(np.abs(trace.even_limit - trace.odd_limit).sum())
    trace.oscillating = trace.amplitude > amplitude_tol
    trace.n_steps = t
    return trace


def is_bipartite(a: SparseMatrix) -> bool:
    """2-coloring test; self-loops make a graph non-bipartite."""
    n = a.n_rows
    csr = a.to_scipy()
    color = np.full(n, -1)
    for start in range(n):
        if color[start] >= 0:
            continue
        color[start] = 0
        queue = deque([start])
        while queue:
            v = queue.popleft()
            for w in csr.indices[csr.indptr[v]:csr.indptr[v + 1]]:
                if color[w] < 0:
                    color[w] = 1 - color[v]
                    queue.append(w)
                elif color[w] == color[v]:
                    return False
    return True


def is_connected(a: SparseMatrix) -> bool:
    from scipy.sparse.csgraph import connected_components

    n_comp, _ = connected_components(a.to_scipy(), directed=False)
    return n_comp == 1


def is_regular(a: SparseMatrix) -> bool:
    """Irreducible and aperiodic: connected and not bipartite."""
    return a.n_rows > 0 and is_connected(a) and not is_bipartite(a)


def _split_blocks(a: SparseMatrix, n_users: int):
    csr = a.to_scipy().tocsr()
    uu = csr[:n_users, :n_users]
    ii = csr[n_users:, n_users:]
    if uu.count_nonzero() or ii.count_nonzero():
        raise NotBipartite("same-side entries found; not a bipartite block matrix")
    return csr[:n_users, n_users:], csr[n_users:, :n_users]


def oscillation_bound(a: SparseMatrix, n_users: int, x0, k: int) -> tuple[float, float]:
    """Both sides of the 1-norm bound on the even/odd gap after ``2k`` steps.

    With the walk operator in block form ``[[0, B], [C, 0]]`` and ``V = BC``,
    ``T = CB``, the gap is ``||[V^k (B x_i - x_u); T^k (C x_u - x_i)]||_1``,
    bounded by the larger of the maximum column sums of ``V^k`` and ``T^k``
    times ``||[B x_i - x_u; C x_u - x_i]||_1``.  Under symmetric weights
    ``C = B^T``.  Returns ``(lhs, bound)``.
    """
    p = column_stochastic(a)
    b, c = _split_blocks(p, n_users)
    x = distribution(x0)
    xu, xi = x[:n_users], x[n_users:]

    csr = p.to_scipy()
    cur = x
    for _ in range(2 * k):
        cur = csr @ cur
    lhs = float(np.abs(cur - csr @ cur).sum())

    v = (b @ c).toarray()
    t = (c @ b).toarray()
    vk = np.linalg.matrix_power(v, k)
    tk = np.linalg.matrix_power(t, k)
    col_max = max(np.abs(vk).sum(axis=0).max(), np.abs(tk).sum(axis=0).max())
    gap0 = np.abs(b @ xi - xu).sum() + np.abs(c @ xu - xi).sum()
    return lhs, float(col_max * gap0)


def vanishing_condition(a: SparseMatrix, n_users: int, even_limit, tol: float = 1e-8) -> bool:
    """True when the odd limit ``B pi_i`` already equals the even user part ``pi_u``."""
    p = column_stochastic(a)
    b, c = _split_blocks(p, n_users)
    pu, pi = even_limit[:n_users], even_limit[n_users:]
    return (float(np.abs(b @ pi - pu).sum()) + float(np.abs(c @ pu - pi).sum())) <= tol


def side_graphs(g: BipartiteGraph) -> tuple[SparseMatrix, SparseMatrix]:
    """0/1 patterns of ``R R^T`` (users) and ``R^T R`` (items), self-loops included."""
    if not g.edges:
        raise EmptyGraph("bipartite graph has no edges")
    r = g.interaction_matrix().to_scipy()
    uu = (r @ r.T).tocsr()
    ii = (r.T @ r).tocsr()
    uu.data[:] = 1.0
    ii.data[:] = 1.0
    return sparse.from_scipy(uu), sparse.from_scipy(ii)


def cross_hop_augment(a: SparseMatrix) -> SparseMatrix:
    """0/1 pattern of ``A + A^2``: direct edges plus same-side links and self-loops."""
    aug = (a.to_scipy() + a.to_scipy() @ a.to_scipy()).tocsr()
    aug.data[:] = 1.0
    return sparse.from_scipy(aug)


def trace_rows(a: SparseMatrix, x0, trace: RandomWalkTrace):
    """Yield ``(step, parity, dist_to_even, dist_to_odd)`` by re-walking ``a``.

    Streams the iterates instead of storing them, so it works on dataset-sized graphs.
    """
    p = column_stochastic(a).to_scipy()
    x = distribution(x0)
    for t in range(trace.n_steps + 1):
        yield (t, "even" if t % 2 == 0 else "odd",
               float(np.abs(x - trace.even_limit).sum()),
               float(np.abs(x - trace.odd_limit).sum()))
        x = p @ x
