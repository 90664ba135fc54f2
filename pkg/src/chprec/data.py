"""Rating-file ingestion, k-core filtering, random splits and split persistence."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyAfterFilter, EmptyFile, FormatError, ParseError
from .graph import BipartiteGraph

log = logging.getLogger(__name__)

FORMATS = {"tab": "\t", "double-colon": "::"}


@dataclass(frozen=True)
class RawInteraction:
    user_token: str
    item_token: str
    rating: float
    timestamp: int


@dataclass
class DatasetSplits:
    graph: BipartiteGraph
    val_edges: list[tuple[int, int]]
    test_edges: list[tuple[int, int]]
    user_index: dict[str, int] = field(default_factory=dict)
    item_index: dict[str, int] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    @property
    def n_users(self) -> int:
        return self.graph.n_users

    @property
    def n_items(self) -> int:
        return self.graph.n_items

    @property
    def train_edges(self) -> list[tuple[int, int]]:
        return list(self.graph.edges)

    def items_by_user(self, which: str) -> list[set[int]]:
        edges = {"train": self.graph.edges, "val": self.val_edges, "test": self.test_edges}[which]
        out = [set() for _ in range(self.n_users)]
        for u, i in edges:
            out[u].add(i)
        return out

    def train_degrees(self) -> np.ndarray:
        """Training degree of every node in the joint user-then-item layout."""
        return np.concatenate([self.graph.user_degrees(), self.graph.item_degrees()])


def load_ratings(path, fmt: str = "tab") -> list[RawInteraction]:
    """Parse ``user<sep>item<sep>rating<sep>timestamp`` lines.

    ``fmt`` is ``"tab"`` (ML100K ``u.data``) or ``"double-colon"`` (ML1M
    ``ratings.dat``).  Blank lines are ignored.
    """
    sep = FORMATS[fmt]
    out = []
    with open(path, encoding="utf-8", errors="replace") as fh:
        for n, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split(sep)
            if len(parts) < 3:
                raise ParseError(n, f"expected 4 fields separated by {sep!r}: {line!r}")
            try:
                rating = float(parts[2])
                ts = int(float(parts[3])) if len(parts) > 3 and parts[3] else 0
            except ValueError as exc:
                raise ParseError(n, str(exc)) from None
            out.append(RawInteraction(parts[0], parts[1], rating, ts))
    if not out:
        raise EmptyFile(f"{path} contains no interactions")
    return out


def preprocess(raws, rating_threshold: float = 1.0, core: int = 1,
               item_core: int | None = None):
    """Keep ratings ``>= rating_threshold`` then peel users/items to a fixed point.

    Users need ``core`` interactions and items ``item_core`` (defaults to
    ``core``).  Returns the graph over dense ids, the kept internal edge list
    and the two token-to-id maps.  Repeated (user, item) pairs collapse to one.
    """
    if core < 1:
        raise ValueError("core must be >= 1")
    item_core = core if item_core is None else item_core
    edges = {(r.user_token, r.item_token) for r in raws if r.rating >= rating_threshold}
    while True:
        cu = Counter(u for u, _ in edges)
        ci = Counter(i for _, i in edges)
        kept = {(u, i) for u, i in edges if cu[u] >= core and ci[i] >= item_core}
        if len(kept) == len(edges):
            break
        edges = kept
    if not edges:
        raise EmptyAfterFilter("no interactions survive filtering")
    user_index = {t: k for k, t in enumerate(sorted({u for u, _ in edges}, key=_token_key))}
    item_index = {t: k for k, t in enumerate(sorted({i for _, i in edges}, key=_token_key))}
    internal = sorted((user_index[u], item_index[i]) for u, i in edges)
    g = BipartiteGraph(len(user_index), len(item_index), tuple(internal))
    return g, internal, user_index, item_index


def _token_key(tok: str):
    # numeric ids sort numerically, anything else lexically after them
    return (0, int(tok), "") if tok.isdigit() else (1, 0, tok)


def split(edges, n_users: int, n_items: int, fractions=(0.7, 0.1, 0.2), seed: int = 0,
          user_index=None, item_index=None) -> DatasetSplits:
    """Seeded uniform partition of interactions into train/val/test.

    Sizes are ``round(f * n)`` for train and val with test taking the rest.
    Users left without training edges are reported in ``warnings``.
    """
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ValueError(f"fractions must be three nonnegative numbers summing to 1: {fractions}")
    edges = sorted((int(u), int(i)) for u, i in edges)
    n = len(edges)
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    pick = lambda idx: sorted(edges[k] for k in idx)
    train = pick(perm[:n_train])
    val = pick(perm[n_train:n_train + n_val])
    test = pick(perm[n_train + n_val:])
    splits = DatasetSplits(BipartiteGraph(n_users, n_items, tuple(train)), val, test,
                           dict(user_index or {}), dict(item_index or {}))
    has_train = np.zeros(n_users, dtype=bool)
    has_train[[u for u, _ in train]] = True
    for u in np.flatnonzero(~has_train):
        splits.warnings.append(f"user {u} has no training interactions")
    if splits.warnings:
        log.warning("DegenerateSplit: %d users without training edges", len(splits.warnings))
    return splits


def save_splits(splits: DatasetSplits, path) -> None:
    """Header ``n_users n_items``, then ``#train``/``#val``/``#test`` sections of ``u i``.

    Optional ``#user_ids``/``#item_ids`` sections map internal ids to raw tokens.
    """
    with open(path, "w") as fh:
        fh.write(f"{splits.n_users} {splits.n_items}\n")
        for name, edges in (("train", splits.graph.edges), ("val", splits.val_edges),
                            ("test", splits.test_edges)):
            fh.write(f"#{name}\n")
            fh.writelines(f"{u} {i}\n" for u, i in edges)
        for name, index in (("user_ids", splits.user_index), ("item_ids", splits.item_index)):
            if index:
                fh.write(f"#{name}\n")
                for tok, k in sorted(index.items(), key=lambda kv: kv[1]):
                    fh.write(f"{k} {tok}\n")


def load_splits(path) -> DatasetSplits:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise FormatError(f"{path} is empty")
    try:
        n_users, n_items = (int(x) for x in lines[0].split())
    except ValueError:
        raise FormatError(f"bad header {lines[0]!r}") from None
    sections = {"train": [], "val": [], "test": [], "user_ids": [], "item_ids": []}
    current = None
    for n, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        if line.startswith("#"):
            current = line[1:].strip()
            if current not in sections:
                raise FormatError(f"line {n}: unknown section {line!r}")
            continue
        if current is None:
            raise FormatError(f"line {n}: data before any section")
        parts = line.split(maxsplit=1)
        if len(parts) != 2:
            raise FormatError(f"line {n}: expected two fields")
        if current in ("user_ids", "item_ids"):
            sections[current].append((int(parts[0]), parts[1]))
            continue
        try:
            u, i = int(parts[0]), int(parts[1])
        except ValueError:
            raise FormatError(f"line {n}: non-integer ids") from None
        if not (0 <= u < n_users and 0 <= i < n_items):
            raise FormatError(f"line {n}: ids ({u}, {i}) exceed header {n_users} {n_items}")
        sections[current].append((u, i))
    try:
        graph = BipartiteGraph(n_users, n_items, tuple(sections["train"]))
    except ValueError as exc:
        raise FormatError(str(exc)) from None
    return DatasetSplits(
        graph, sections["val"], sections["test"],
        {tok: k for k, tok in sections["user_ids"]},
        {tok: k for k, tok in sections["item_ids"]},
    )


# per-dataset preprocessing: (file format, rating threshold, user core, item core)
DATASET_PREP = {
    "ml100k": ("tab", 5.0, 5, 1),
    "ml1m": ("double-colon", 5.0, 10, 10),
    "amazon": ("tab", 5.0, 10, 10),
    "gowalla": ("tab", 0.0, 10, 10),
}
