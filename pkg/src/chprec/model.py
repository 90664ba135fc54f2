"""DGCF forward pass plus the LightGCN and BPR-MF baselines.

All three share one linear recurrence::

    E(l) = P @ (alpha(l) * E(l-1))        l = 1..L

where ``alpha(l) = sigmoid(w(l))`` for DGCF and ``alpha = 1`` for LightGCN.  The
final embedding is the mean of ``E(0)..E(L)``, or ``E(L)`` alone in
final-layer-only mode.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import sparse
from .errors import DimensionMismatch, FormatError, IndexOutOfRange, LayerCountMismatch
from .graph import PropagationOperator
from .sparse import SparseMatrix

MODEL_KINDS = ("dgcf", "lightgcn", "mf")


@dataclass
class ModelParams:
    n_users: int
    n_items: int
    embeddings: np.ndarray
    la_weights: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        self.la_weights = [np.asarray(w, dtype=np.float64) for w in self.la_weights]
        n = self.n_users + self.n_items
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] != n:
            raise DimensionMismatch(f"embeddings must be {n} x d, got {self.embeddings.shape}")
        for w in self.la_weights:
            if w.shape != (n,):
                raise DimensionMismatch(f"LA weight vector must have length {n}, got {w.shape}")

    @property
    def n_nodes(self) -> int:
        return self.n_users + self.n_items

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def copy(self) -> ModelParams:
        return ModelParams(self.n_users, self.n_items, self.embeddings.copy(),
                           [w.copy() for w in self.la_weights])

    def squared_norm(self) -> float:
        return float(np.sum(self.embeddings ** 2) + sum(np.sum(w ** 2) for w in self.la_weights))


@dataclass
class ForwardTrace:
    per_layer: list[np.ndarray]
    final: np.ndarray
    alphas: list[np.ndarray]
    final_layer_only: bool = False
    identity_exempt: bool = False


def la_alpha(w) -> np.ndarray:
    """Numerically stable elementwise sigmoid."""
    w = np.asarray(w, dtype=np.float64)
    out = np.empty_like(w)
    pos = w >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-w[pos]))
    ez = np.exp(w[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _matrix(p) -> SparseMatrix:
    return p.matrix if isinstance(p, PropagationOperator) else p


def propagate(e0: np.ndarray, p: SparseMatrix, n_layers: int,
              alphas: list[np.ndarray] | None = None,
              final_layer_only: bool = False,
              identity_exempt: bool = False) -> ForwardTrace:
    """Run the shared recurrence.  ``alphas=None`` means no LA scaling.

    With ``identity_exempt`` the self term of ``P`` sees the unscaled embedding:
    ``E(l) = P (a E) + (1 - a) E``.
    """
    if n_layers > 0 and p.n_cols != e0.shape[0]:
        raise DimensionMismatch(f"operator {p.shape} vs embeddings {e0.shape}")
    layers = [e0]
    cur = e0
    for l in range(n_layers):
        if alphas is None:
            cur = sparse.spmm(p, cur)
        else:
            a = alphas[l][:, None]
            nxt = sparse.spmm(p, a * cur)
            if identity_exempt:
                nxt = nxt + (1.0 - a) * cur
            cur = nxt
        layers.append(cur)
    if final_layer_only:
        final = layers[-1]
    else:
        final = np.add.reduce(layers) / (n_layers + 1)
    return ForwardTrace(layers, final, list(alphas or []), final_layer_only,
                        identity_exempt and alphas is not None)


def dgcf_forward(params: ModelParams, p, n_layers: int,
                 final_layer_only: bool = False,
                 identity_exempt: bool = False) -> ForwardTrace:
    """LA scaling then cross-hop propagation per layer, then layer averaging."""
    if len(params.la_weights) != n_layers:
        raise LayerCountMismatch(
            f"{n_layers} layers requested but {len(params.la_weights)} LA vectors stored"
        )
    alphas = [la_alpha(w) for w in params.la_weights]
    return propagate(params.embeddings, _matrix(p), n_layers, alphas,
                     final_layer_only, identity_exempt)


def lightgcn_forward(params: ModelParams, l_hat, n_layers: int,
                     final_layer_only: bool = False) -> ForwardTrace:
    """``E(l) = L_hat E(l-1)`` with the self-loop-free normalized adjacency."""
    return propagate(params.embeddings, _matrix(l_hat), n_layers, None, final_layer_only)


def mf_forward(params: ModelParams) -> ForwardTrace:
    e = params.embeddings
    return ForwardTrace([e], e, [])


def forward(kind: str, params: ModelParams, p, n_layers: int,
            final_layer_only: bool = False, identity_exempt: bool = False) -> ForwardTrace:
    if kind == "dgcf":
        return dgcf_forward(params, p, n_layers, final_layer_only, identity_exempt)
    if kind == "lightgcn":
        return lightgcn_forward(params, p, n_layers, final_layer_only)
    if kind == "mf":
        return mf_forward(params)
    raise ValueError(f"unknown model kind {kind!r}")


def score(final: np.ndarray, n_users: int, u: int, i: int) -> float:
    """Inner product of user ``u`` and item ``i`` (item rows start at ``n_users``)."""
    n_items = final.shape[0] - n_users
    if not (0 <= u < n_users and 0 <= i < n_items):
        raise IndexOutOfRange(f"(user {u}, item {i}) outside {n_users} users / {n_items} items")
    return float(final[u] @ final[n_users + i])


def user_scores(final: np.ndarray, n_users: int, users=None) -> np.ndarray:
    """Score matrix of shape ``(len(users), n_items)``."""
    u = final[:n_users] if users is None else final[np.asarray(users)]
    return u @ final[n_users:].T


def top_k(scores: np.ndarray, exclude, k: int) -> np.ndarray:
    """Indices of the ``k`` best scores; ties go to the smaller index."""
    if k < 1:
        raise ValueError("K must be >= 1")
    s = np.array(scores, dtype=np.float64)
    mask = np.zeros(s.shape[0], dtype=bool)
    excl = np.fromiter(exclude, dtype=np.int64) if exclude is not None else np.zeros(0, np.int64)
    mask[excl] = True
    order = np.argsort(-s, kind="stable")
    order = order[~mask[order]]
    return order[:k]


def rank_items(final: np.ndarray, n_users: int, u: int, exclude, k: int) -> list[int]:
    n_items = final.shape[0] - n_users
    if not 0 <= u < n_users:
        raise IndexOutOfRange(f"user {u} outside {n_users} users")
    exclude = set(exclude or ())
    if any(not 0 <= i < n_items for i in exclude):
        raise IndexOutOfRange("excluded item outside the catalogue")
    return top_k(user_scores(final, n_users, [u])[0], exclude, k).tolist()


# Checkpoint: b"DGCF", version byte, <4I counts (n_users, n_items, d, L),
# then E(0) row-major <f8, then each LA vector as <f8.
_MAGIC = b"DGCF"
_VERSION = 1
_HEADER = struct.Struct("<4sB4I")


def save_checkpoint(params: ModelParams, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _VERSION, params.n_users, params.n_items,
                              params.dim, len(params.la_weights)))
        fh.write(np.ascontiguousarray(params.embeddings, dtype="<f8").tobytes())
        for w in params.la_weights:
            fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise FormatError("checkpoint truncated")
    magic, version, n_users, n_items, d, n_layers = _HEADER.unpack_from(raw)
    if magic != _MAGIC or version != _VERSION:
        raise FormatError("not a DGCF checkpoint (bad magic or version)")
    n = n_users + n_items
    expected = _HEADER.size + 8 * (n * d + n_layers * n)
    if len(raw) != expected:
        raise FormatError(f"checkpoint size {len(raw)} != expected {expected}")
    body = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).astype(np.float64)
    emb = body[: n * d].reshape(n, d)
    la = [body[n * d + l * n: n * d + (l + 1) * n].copy() for l in range(n_layers)]
    return ModelParams(n_users, n_items, emb.copy(), la)
