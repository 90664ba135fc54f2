"""Top-K ranking metrics and the analysis experiments built on them."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateVariance, NoTestUsers, TooFewUsers
from .model import la_alpha, user_scores

_CHUNK = 2048


@dataclass
class EvalReport:
    recall_at_k: float
    ndcg_at_k: float
    k: int
    per_user: list[tuple[int, float, float]] = field(default_factory=list)
    groups: list[tuple[str, float, float]] | None = None

    def write_csv(self, path) -> None:
        """Aggregate row, then per-group rows, then per-user rows."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["scope", "key", f"recall@{self.k}", f"ndcg@{self.k}"])
            w.writerow(["all", "", repr(self.recall_at_k), repr(self.ndcg_at_k)])
            for label, r, n in self.groups or []:
                w.writerow(["group", label, repr(r), repr(n)])
            for u, r, n in self.per_user:
                w.writerow(["user", u, repr(r), repr(n)])


def _discounts(k: int) -> list[float]:
    return [1.0 / math.log2(r + 1) for r in range(1, k + 1)]


def recall_ndcg(final: np.ndarray, n_users: int, train_items, test_items, k: int = 20) -> EvalReport:
    """Recall@K and NDCG@K averaged over users with at least one test item.

    ``train_items`` and ``test_items`` are per-user collections of item ids.
    Training items are removed from the candidates; ranking ties go to the
    smaller item index.
    """
    users = [u for u in range(n_users) if len(test_items[u]) > 0]
    if not users:
        raise NoTestUsers("no user has a test item")
    disc = _discounts(k)
    per_user = []
    for start in range(0, len(users), _CHUNK):
        chunk = users[start:start + _CHUNK]
        scores = user_scores(final, n_users, chunk)
        for row, u in enumerate(chunk):
            excl = list(train_items[u])
            if excl:
                scores[row, excl] = -np.inf
        order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
        for row, u in enumerate(chunk):
            test = test_items[u]
            hits = [r for r, i in enumerate(order[row].tolist()) if i in test]
            # fsum keeps the sums independent of accumulation order
            dcg = math.fsum(disc[r] for r in hits)
            idcg = math.fsum(disc[: min(k, len(test))])
            per_user.append((u, len(hits) / len(test), dcg / idcg))
    rec = math.fsum(r for _, r, _ in per_user) / len(per_user)
    ndcg = math.fsum(n for _, _, n in per_user) / len(per_user)
    return EvalReport(rec, ndcg, k, per_user)


def _density_cuts(users, train_counts, n_groups: int) -> list[int]:
    deg = np.array([train_counts[u] for u, _, _ in users], dtype=np.float64)
    cum = np.cumsum(deg)
    cuts = [0]
    for g in range(1, n_groups):
        # cutting before position c leaves cum[c - 1] interactions behind it
        cand = np.arange(cuts[-1] + 1, len(users) - (n_groups - g) + 1)
        target = cum[-1] * g / n_groups
        cuts.append(int(cand[np.argmin(np.abs(cum[cand - 1] - target))]))
    cuts.append(len(users))
    return cuts


def _sorted_for_groups(report: EvalReport, train_counts, n_groups: int):
    if n_groups < 2:
        raise ValueError("need at least two groups")
    users = sorted(report.per_user, key=lambda r: (train_counts[r[0]], r[0]))
    if len(users) < n_groups:
        raise TooFewUsers(f"{len(users)} users cannot fill {n_groups} groups")
    return users, _density_cuts(users, train_counts, n_groups)


def density_groups(report: EvalReport, train_counts, n_groups: int = 4) -> EvalReport:
    """Split evaluated users by training degree into groups of equal total interactions.

    Users are sorted by degree (ties by id) and cut where the running total is
    closest to each ``g / n_groups`` share, keeping every group non-empty.  A
    group is labelled ``<b`` with ``b`` one more than its largest degree.
    """
    users, cuts = _sorted_for_groups(report, train_counts, n_groups)
    groups = []
    for a, b in zip(cuts[:-1], cuts[1:]):
        part = users[a:b]
        label = f"<{int(train_counts[part[-1][0]]) + 1}"
        groups.append((label, float(np.mean([r for _, r, _ in part])),
                       float(np.mean([n for _, _, n in part]))))
    return EvalReport(report.recall_at_k, report.ndcg_at_k, report.k, report.per_user, groups)


def group_membership(report: EvalReport, train_counts, n_groups: int = 4) -> list[list[int]]:
    """User ids behind each group of :func:`density_groups`."""
    users, cuts = _sorted_for_groups(report, train_counts, n_groups)
    return [[u for u, _, _ in users[a:b]] for a, b in zip(cuts[:-1], cuts[1:])]


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    xc, yc = x - x.mean(), y - y.mean()
    sx, sy = math.sqrt(float(xc @ xc)), math.sqrt(float(yc @ yc))
    if sx == 0.0 or sy == 0.0:
        raise DegenerateVariance("correlation undefined for a constant series")
    return float(xc @ yc) / (sx * sy)


def normalized_log_degree(degrees) -> np.ndarray:
    logd = np.log(np.asarray(degrees, dtype=np.float64))
    span = logd.max() - logd.min()
    if span == 0:
        raise DegenerateVariance("all degrees are equal")
    return (logd - logd.min()) / span


def locality_correlation(params, train_degrees, layer: int = 0) -> tuple[float, float]:
    """Pearson correlation of ``1/alpha`` with normalized log-degree, per side.

    Uses the first LA layer by default.  Nodes with zero training degree are
    left out since their log-degree is undefined.
    """
    if not params.la_weights:
        raise ValueError("model has no LA layers")
    inv_alpha = 1.0 / la_alpha(params.la_weights[layer])
    deg = np.asarray(train_degrees, dtype=np.float64)
    out = []
    for lo, hi in ((0, params.n_users), (params.n_users, params.n_nodes)):
        d = deg[lo:hi]
        keep = d > 0
        out.append(pearson(inv_alpha[lo:hi][keep], normalized_log_degree(d[keep])))
    return out[0], out[1]


@dataclass
class LayerSweep:
    """Test Recall@K per depth and seed from a final-layer-only depth sweep."""

    model: str
    depths: list[int]
    recalls: dict[int, list[float]]

    def mean_recall(self) -> list[float]:
        return [float(np.mean(self.recalls[d])) for d in self.depths]

    def deltas(self) -> list[float]:
        m = self.mean_recall()
        return [b - a for a, b in zip(m[:-1], m[1:])]

    def mean_abs_delta(self) -> float:
        dl = self.deltas()
        return float(np.mean(np.abs(dl))) if dl else 0.0

    def sign_alternations(self) -> int:
        """Adjacent delta pairs with strictly opposite signs."""
        s = np.sign(self.deltas())
        return int(np.sum(s[:-1] * s[1:] < 0))

    def write_csv(self, path) -> None:
        means = self.mean_recall()
        deltas = [float("nan")] + self.deltas()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["model", "depth", "mean_recall", "std_recall", "delta", "abs_delta", "seeds"])
            for d, m, dl in zip(self.depths, means, deltas):
                w.writerow([self.model, d, repr(m), repr(float(np.std(self.recalls[d]))),
                            repr(dl), repr(abs(dl)), len(self.recalls[d])])


def _final_layer_test_recall(splits, config) -> float:
    from .training import build_operator, model_final, train

    result = train(splits, config)
    final = model_final(result.params, build_operator(splits.graph, config), config)
    rep = recall_ndcg(final, splits.n_users, splits.items_by_user("train"),
                      splits.items_by_user("test"), config.K_eval)
    return rep.recall_at_k


def layer_difference_experiment(splits, config, depths, repeats: int = 3,
                                run=_final_layer_test_recall, progress=None) -> LayerSweep:
    """Train ``repeats`` seeds per depth with final-layer-only scoring.

    Seeds are ``config.seed + r``.  ``run(splits, config) -> recall`` is the
    unit of work and can be replaced, e.g. to reuse cached results.
    """
    from dataclasses import replace

    depths = [int(d) for d in depths]
    if depths != sorted(depths):
        raise ValueError("depths must be sorted ascending")
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    recalls = {}
    for d in depths:
        recalls[d] = []
        for r in range(repeats):
            cfg = replace(config, L=d, seed=config.seed + r, final_layer_only=True)
            recalls[d].append(float(run(splits, cfg)))
            if progress is not None:
                progress(config.model, d, r, recalls[d][-1])
    return LayerSweep(config.model, depths, recalls)


def export_patterns(params, l, l_c, path, rows=(0, 30), cols=(0, 30)) -> list[np.ndarray]:
    """Write ``diag(alpha(l)) (L + Lc)`` per LA layer, cut to a window, as CSV.

    Each window is divided by its largest absolute value so entries lie in
    ``[0, 1]``.  Columns: ``layer, row, col, value``.  Returns the windows.
    """
    from . import sparse

    base = sparse.add(l, l_c).to_scipy().tocsr()
    r0, r1 = rows
    c0, c1 = cols
    windows = []
    for w in params.la_weights:
        a = la_alpha(w)
        win = (a[r0:r1, None] * base[r0:r1, c0:c1].toarray())
        peak = np.abs(win).max()
        windows.append(win / peak if peak > 0 else win)
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["layer", "row", "col", "value"])
        for k, win in enumerate(windows, start=1):
            for i in range(win.shape[0]):
                for j in range(win.shape[1]):
                    out.writerow([k, r0 + i, c0 + j, repr(float(win[i, j]))])
    return windows
