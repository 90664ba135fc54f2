"""BPR training with hand-derived reverse-mode gradients and Adam.

The backward pass mirrors :func:`chprec.model.propagate` layer by layer:

* score gradients are scattered onto the final embedding through a sparse
  ``N x N`` coupling matrix built from the batch triples,
* layer averaging hands ``1/(L+1)`` of that to every layer output,
* each layer ``E(l) = P (a * E(l-1))`` sends ``a * (P^T G)`` back to its input
  and ``rowsum(P^T G * E(l-1))`` to ``a``, which the sigmoid turns into a
  gradient on the LA weights.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import scipy.sparse as sp

from . import graph as graph_ops
from . import sparse
from .data import DatasetSplits
from .errors import ConfigError, NonFiniteGradient, UserSaturated
from .evaluation import recall_ndcg
from .model import MODEL_KINDS, ModelParams, forward

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    model: str = "dgcf"
    d: int = 128
    L: int = 3
    lr: float = 1e-3
    lam: float = 0.01
    epsilon: float = 0.006
    drop_ratio: float = 0.1
    batch_size: int = 1024
    max_epochs: int = 400
    patience: int = 5
    eval_every: int = 10
    seed: int = 2020
    K_eval: int = 20
    final_layer_only: bool = False
    identity_exempt: bool = False
    keep_cross_diagonal: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        checks = [
            (self.model in MODEL_KINDS, f"model must be one of {MODEL_KINDS}"),
            (self.d >= 1, "d must be >= 1"),
            (self.L >= 0, "L must be >= 0"),
            (self.lr >= 0, "lr must be >= 0"),
            (self.lam >= 0, "lambda must be >= 0"),
            (self.epsilon >= 0, "epsilon must be >= 0"),
            (0 <= self.drop_ratio < 1, "drop ratio must be in [0, 1)"),
            (self.batch_size >= 1, "batch size must be >= 1"),
            (self.max_epochs >= 1, "max epochs must be >= 1"),
            (self.patience >= 1, "patience must be >= 1"),
            (self.eval_every >= 1, "eval_every must be >= 1"),
            (self.K_eval >= 1, "K must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    @property
    def n_layers(self) -> int:
        return 0 if self.model == "mf" else self.L

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def to_dict(self) -> dict:
        return asdict(self)


# DGCF settings per dataset: layers, dim, lr, lambda, epsilon (drop ratio 0.1 everywhere)
DGCF_DEFAULTS = {
    "ml100k": dict(L=3, d=128, lr=1e-3, lam=1e-2, epsilon=0.006),
    "ml1m": dict(L=2, d=64, lr=1e-3, lam=1e-2, epsilon=0.001),
    "amazon": dict(L=4, d=128, lr=1e-4, lam=1e-2, epsilon=0.003),
    "gowalla": dict(L=3, d=128, lr=1e-4, lam=1e-3, epsilon=0.004),
}
# baselines share the DGCF embedding size; drop-edge is a DGCF-only augmentation
BASELINE_DEFAULTS = {
    "ml100k": dict(lr=1e-3, lam=1e-5),
    "ml1m": dict(lr=1e-3, lam=1e-5),
    "amazon": dict(lr=1e-3, lam=1e-5),
    "gowalla": dict(lr=1e-4, lam=1e-3),
}


def dataset_defaults(dataset: str, model: str = "dgcf") -> dict:
    """TrainConfig overrides for a known dataset and model kind."""
    if dataset not in DGCF_DEFAULTS:
        raise ConfigError(f"unknown dataset {dataset!r}; expected one of {sorted(DGCF_DEFAULTS)}")
    out = dict(DGCF_DEFAULTS[dataset], drop_ratio=0.1, model=model)
    if model != "dgcf":
        out.update(BASELINE_DEFAULTS[dataset], drop_ratio=0.0)
    return out


@dataclass
class TrainBatch:
    users: np.ndarray
    pos: np.ndarray
    neg: np.ndarray

    def __len__(self) -> int:
        return int(self.users.shape[0])

    @property
    def triples(self) -> list[tuple[int, int, int]]:
        return list(zip(self.users.tolist(), self.pos.tolist(), self.neg.tolist()))

    @classmethod
    def from_triples(cls, triples) -> TrainBatch:
        arr = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
        return cls(arr[:, 0].copy(), arr[:, 1].copy(), arr[:, 2].copy())


@dataclass
class GradientSet:
    d_embeddings: np.ndarray
    d_la: list[np.ndarray] = field(default_factory=list)


def log_sigmoid(x):
    """``log sigmoid(x) = -softplus(-x)``, stable for any finite ``x``."""
    return -np.logaddexp(0.0, -np.asarray(x, dtype=np.float64))


def _margins(final: np.ndarray, n_users: int, batch: TrainBatch) -> np.ndarray:
    eu = final[batch.users]
    return np.einsum("ij,ij->i", eu, final[n_users + batch.pos] - final[n_users + batch.neg])


def bpr_loss(params: ModelParams, trace, batch: TrainBatch, lam: float) -> float:
    """Summed ``-log sigmoid(margin)`` over the batch plus ``lam * ||Theta||^2``."""
    data = 0.0
    if len(batch):
        data = float(-log_sigmoid(_margins(trace.final, params.n_users, batch)).sum())
    return data + lam * params.squared_norm()


def _score_coupling(final: np.ndarray, n_users: int, batch: TrainBatch) -> sp.csr_matrix:
    """Sparse ``S`` with ``dLoss/dfinal = S @ final`` for the BPR data term."""
    n = final.shape[0]
    c = -np.exp(log_sigmoid(-_margins(final, n_users, batch)))  # -sigmoid(-m)
    u = batch.users
    i = n_users + batch.pos
    j = n_users + batch.neg
    rows = np.concatenate([u, u, i, j])
    cols = np.concatenate([i, j, u, u])
    vals = np.concatenate([c, -c, c, -c])
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def backward(params: ModelParams, p, batch: TrainBatch, lam: float, *,
             kind: str = "dgcf", n_layers: int | None = None,
             final_layer_only: bool = False, identity_exempt: bool = False,
             trace=None, p_t=None) -> GradientSet:
    """Exact gradient of :func:`bpr_loss` w.r.t. the embeddings and LA weights.

    ``p`` is the propagation matrix the forward pass used (a SparseMatrix or
    PropagationOperator); ``p_t`` may pass its precomputed transpose.
    """
    if n_layers is None:
        n_layers = len(params.la_weights) if kind == "dgcf" else 0
    if kind == "mf":
        n_layers = 0
    pm = getattr(p, "matrix", p)
    if trace is None:
        trace = forward(kind, params, pm, n_layers, final_layer_only, identity_exempt)
    n_users = params.n_users

    d_final = np.zeros_like(trace.final)
    if len(batch):
        d_final = _score_coupling(trace.final, n_users, batch) @ trace.final

    if final_layer_only:
        grads = [np.zeros_like(e) for e in trace.per_layer]
        grads[-1] = d_final
    else:
        share = d_final / (n_layers + 1)
        grads = [share.copy() for _ in trace.per_layer]

    la = kind == "dgcf"
    d_la = [np.zeros(params.n_nodes) for _ in range(n_layers if la else 0)]
    if n_layers:
        if p_t is None:
            p_t = pm.transpose()
        pt = p_t.to_scipy() if isinstance(p_t, sparse.SparseMatrix) else p_t
    for l in range(n_layers, 0, -1):
        g = grads[l]
        prev = trace.per_layer[l - 1]
        h = pt @ g
        if la:
            a = trace.alphas[l - 1]
            d_alpha = np.einsum("ij,ij->i", h, prev)
            back = a[:, None] * h
            if trace.identity_exempt:
                d_alpha -= np.einsum("ij,ij->i", g, prev)
                back += (1.0 - a)[:, None] * g
            d_la[l - 1] = d_alpha * a * (1.0 - a)
            grads[l - 1] += back
        else:
            grads[l - 1] += h

    d_emb = grads[0] + 2.0 * lam * params.embeddings
    d_la = [g + 2.0 * lam * w for g, w in zip(d_la, params.la_weights)]
    if not np.all(np.isfinite(d_emb)) or not all(np.all(np.isfinite(g)) for g in d_la):
        raise NonFiniteGradient("gradient contains non-finite values")
    return GradientSet(d_emb, d_la)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: ModelParams) -> AdamState:
        shapes = [params.embeddings] + params.la_weights
        return cls([np.zeros_like(x) for x in shapes], [np.zeros_like(x) for x in shapes])


def adam_step(params: ModelParams, grads: GradientSet, state: AdamState, lr: float,
              t: int | None = None) -> tuple[ModelParams, AdamState]:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    state.t = state.t + 1 if t is None else t
    if state.t < 1:
        raise ValueError("Adam step counter must be >= 1")
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    targets = [params.embeddings] + params.la_weights
    for x, g, m, v in zip(targets, [grads.d_embeddings] + grads.d_la, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        x -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


class NegativeSampler:
    """Uniform negatives by rejection against each user's training items."""

    def __init__(self, train_edges, n_users: int, n_items: int):
        e = np.asarray(train_edges, dtype=np.int64).reshape(-1, 2)
        self.n_items = n_items
        self.edges = e
        self.keys = np.unique(e[:, 0] * n_items + e[:, 1])
        self.degree = np.bincount(e[:, 0], minlength=n_users)

    def is_positive(self, users, items) -> np.ndarray:
        keys = np.asarray(users) * self.n_items + np.asarray(items)
        pos = np.searchsorted(self.keys, keys)
        pos = np.minimum(pos, len(self.keys) - 1)
        return self.keys[pos] == keys

    def negatives(self, users: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        saturated = self.degree[users] >= self.n_items
        if np.any(saturated):
            raise UserSaturated(f"user {int(users[saturated][0])} interacted with every item")
        neg = rng.integers(0, self.n_items, size=len(users))
        bad = self.is_positive(users, neg)
        while np.any(bad):
            neg[bad] = rng.integers(0, self.n_items, size=int(bad.sum()))
            bad[bad] = self.is_positive(users[bad], neg[bad])
        return neg


def sample_batch(train_edges, n_items: int, batch_size: int, rng: np.random.Generator,
                 sampler: NegativeSampler | None = None) -> TrainBatch:
    """``batch_size`` triples: uniform positive edges, rejection-sampled negatives."""
    e = np.asarray(train_edges, dtype=np.int64).reshape(-1, 2)
    if sampler is None:
        sampler = NegativeSampler(e, int(e[:, 0].max()) + 1, n_items)
    pick = rng.integers(0, len(e), size=batch_size)
    users = e[pick, 0]
    return TrainBatch(users, e[pick, 1], sampler.negatives(users, rng))


def epoch_batches(sampler: NegativeSampler, batch_size: int, rng: np.random.Generator):
    """One triple per training interaction in shuffled order, cut into batches."""
    e = sampler.edges
    order = rng.permutation(len(e))
    users = e[order, 0]
    pos = e[order, 1]
    neg = sampler.negatives(users, rng)
    for s in range(0, len(e), batch_size):
        yield TrainBatch(users[s:s + batch_size], pos[s:s + batch_size], neg[s:s + batch_size])


def xavier_init(n_users: int, n_items: int, d: int, rng: np.random.Generator) -> np.ndarray:
    """Glorot-uniform user and item tables, each scaled by its own fan sizes."""
    lim_u = np.sqrt(6.0 / (n_users + d))
    lim_i = np.sqrt(6.0 / (n_items + d))
    return np.vstack([rng.uniform(-lim_u, lim_u, size=(n_users, d)),
                      rng.uniform(-lim_i, lim_i, size=(n_items, d))])


def init_params(n_users: int, n_items: int, config: TrainConfig,
                rng: np.random.Generator) -> ModelParams:
    emb = xavier_init(n_users, n_items, config.d, rng)
    n_la = config.L if config.model == "dgcf" else 0
    return ModelParams(n_users, n_items, emb, [np.zeros(n_users + n_items) for _ in range(n_la)])


def build_operator(g, config: TrainConfig):
    """Propagation matrix for the configured model (``None`` for MF)."""
    if config.model == "mf":
        return None
    a = graph_ops.build_adjacency(g)
    if config.model == "lightgcn":
        return graph_ops.PropagationOperator(graph_ops.sym_normalize(a), 0.0, False, 0.0)
    return graph_ops.propagation_operator(
        graph_ops.sym_normalize(a),
        graph_ops.cross_hop_matrix(a, config.epsilon, config.keep_cross_diagonal),
        config.epsilon,
    )


def model_final(params: ModelParams, op, config: TrainConfig) -> np.ndarray:
    pm = None if op is None else op.matrix
    return forward(config.model, params, pm, config.n_layers, config.final_layer_only,
                   config.identity_exempt).final


@dataclass
class TrainResult:
    params: ModelParams
    log: list[dict]
    best_epoch: int
    best_val_recall: float


LOG_COLUMNS = ["epoch", "loss", "val_recall", "val_ndcg", "epoch_seconds", "best_flag"]


def write_log(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in rows:
            w.writerow([r["epoch"], repr(r["loss"]), repr(r["val_recall"]), repr(r["val_ndcg"]),
                        f"{r['epoch_seconds']:.4f}", int(r["best_flag"])])


def train(splits: DatasetSplits, config: TrainConfig, progress=None) -> TrainResult:
    """Mini-batch Adam on BPR with periodic validation and early stopping.

    Validation runs every ``eval_every`` epochs (and after the last one); training
    stops after ``patience`` validations without a new best Recall@K.  Drop-edge is resampled once per epoch on the training operator; validation
    always uses the full operator.  The returned params are the best-validation
    snapshot.  ``progress`` is an optional callback receiving each log row.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    g = splits.graph
    params = init_params(g.n_users, g.n_items, config, rng)
    op = build_operator(g, config)
    sampler = NegativeSampler(g.edge_array(), g.n_users, g.n_items)
    state = AdamState.zeros_like(params)
    train_items = splits.items_by_user("train")
    val_items = splits.items_by_user("val")
    n_layers = config.n_layers
    # without validation edges every epoch counts as best and training runs to max_epochs
    has_val = any(val_items)

    best = (-np.inf, 0, params.copy())
    stale = 0
    rows = []
    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        p_epoch = None
        p_t = None
        if op is not None:
            dropped = graph_ops.drop_edges(op, config.drop_ratio, rng) if config.drop_ratio > 0 else op
            p_epoch = dropped.matrix
            p_t = p_epoch.transpose().to_scipy()
        loss = 0.0
        for batch in epoch_batches(sampler, config.batch_size, rng):
            trace = forward(config.model, params, p_epoch, n_layers,
                            config.final_layer_only, config.identity_exempt)
            loss += bpr_loss(params, trace, batch, config.lam)
            grads = backward(params, p_epoch, batch, config.lam, kind=config.model,
                             n_layers=n_layers, final_layer_only=config.final_layer_only,
                             identity_exempt=config.identity_exempt, trace=trace, p_t=p_t)
            adam_step(params, grads, state, config.lr)
        validate = epoch % config.eval_every == 0 or epoch == config.max_epochs
        val_recall = val_ndcg = float("nan")
        improved = False
        if validate and has_val:
            rep = recall_ndcg(model_final(params, op, config), g.n_users, train_items,
                              val_items, config.K_eval)
            val_recall, val_ndcg = rep.recall_at_k, rep.ndcg_at_k
            improved = val_recall > best[0]
            if improved:
                best = (val_recall, epoch, params.copy())
                stale = 0
            else:
                stale += 1
        elif not has_val:
            improved = True
            best = (float("nan"), epoch, params)
        row = {"epoch": epoch, "loss": loss, "val_recall": val_recall,
               "val_ndcg": val_ndcg, "epoch_seconds": time.perf_counter() - t0,
               "best_flag": improved}
        rows.append(row)
        if progress is not None:
            progress(row)
        log.debug("epoch %d loss %.4f val recall %.4f", epoch, loss, val_recall)
        if stale >= config.patience:
            break
    return TrainResult(best[2], rows, best[1], float(best[0]))
