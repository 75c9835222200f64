"""Interaction and embedding files, preprocessing, splits and a synthetic corpus.

File formats
------------
Interactions: one user per line, ``user_id<TAB>item,item,...`` in
chronological order.

Embeddings: a header ``num_items dim`` followed by ``item_id v1 ... v_dim``
per line.  Values are written with ``repr`` (shortest round-trip decimal) and
parsed with ``float``, so write -> read is bit-exact.
"""
from __future__ import annotations

import dataclasses
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError
from .trie import item_sort_key

Interactions = dict[str, list[str]]


# -- interactions ----------------------------------------------------------------

def load_interactions(path) -> Interactions:
    text = Path(path).read_text()
    users: Interactions = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2 or not parts[0] or not parts[1]:
            raise ValueError(f"{path}:{lineno}: expected 'user<TAB>item,item,...'")
        user, seq = parts
        items = seq.split(",")
        if any(not i for i in items):
            raise ValueError(f"{path}:{lineno}: empty item id")
        if user in users:
            raise ValueError(f"{path}:{lineno}: duplicate user {user!r}")
        users[user] = items
    if not users:
        raise ValueError(f"{path}: no interactions")
    return users


def write_interactions(path, users: Mapping[str, Sequence[str]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{u}\t{','.join(items)}\n" for u, items in users.items()))
    return path


def five_core_filter(users: Mapping[str, Sequence[str]], k: int = 5) -> Interactions:
    """Drop users and items with fewer than ``k`` interactions until nothing changes."""
    current = {u: list(items) for u, items in users.items()}
    while True:
        counts = Counter(i for items in current.values() for i in items)
        nxt = {}
        for u, items in current.items():
            kept = [i for i in items if counts[i] >= k]
            if len(kept) >= k:
                nxt[u] = kept
        if nxt == current:
            break
        current = nxt
    if not current:
        raise ValueError(f"{k}-core filtering removed every user")
    return current


@dataclass
class UserSplit:
    """``train`` is the truncated model input; ``history`` the full pre-validation sequence."""

    train: list[str]
    valid: str
    test: str
    history: list[str] = field(default_factory=list)


@dataclass
class InteractionDataset:
    """Leave-one-out splits; ``train`` prefixes keep at most ``max_history`` items."""

    splits: dict[str, UserSplit]
    catalog: list[str]
    max_history: int

    @property
    def users(self) -> list[str]:
        return list(self.splits)


def leave_one_out_split(users: Mapping[str, Sequence[str]], max_history: int = 20) -> InteractionDataset:
    """Last item is the test target, the one before it validation, the rest training.

    The training prefix is truncated to its most recent ``max_history`` items.
    """
    splits = {}
    catalog = set()
    for u, items in users.items():
        if len(items) < 3:
            raise ValueError(f"user {u!r} has {len(items)} interactions; leave-one-out needs >= 3")
        catalog.update(items)
        splits[u] = UserSplit(list(items[:-2])[-max_history:], items[-2], items[-1], list(items[:-2]))
    return InteractionDataset(splits, sorted(catalog, key=item_sort_key), max_history)


# -- embeddings ------------------------------------------------------------------

@dataclass
class EmbeddingTable:
    items: list[str]
    vectors: np.ndarray

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        self.index = {item: i for i, item in enumerate(self.items)}

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def lookup(self, items: Sequence[str]) -> np.ndarray:
        missing = [i for i in items if i not in self.index]
        if missing:
            raise KeyError(f"no embedding for item {missing[0]!r}")
        return self.vectors[[self.index[i] for i in items]]


def load_embeddings(path, catalog: Sequence[str] | None = None) -> EmbeddingTable:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines:
        raise ValueError(f"{path}: empty embeddings file")
    try:
        n, dim = (int(x) for x in lines[0].split())
    except ValueError:
        raise ValueError(f"{path}:1: header must be 'num_items dim'") from None
    if len(lines) - 1 != n:
        raise ValueError(f"{path}: header says {n} items, found {len(lines) - 1}")
    items, rows = [], []
    seen = set()
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if len(parts) != dim + 1:
            raise ValueError(f"{path}:{lineno}: expected {dim} values, got {len(parts) - 1}")
        if parts[0] in seen:
            raise ValueError(f"{path}:{lineno}: duplicate item {parts[0]!r}")
        seen.add(parts[0])
        items.append(parts[0])
        rows.append([float(x) for x in parts[1:]])
    table = EmbeddingTable(items, np.array(rows, dtype=np.float64).reshape(n, dim))
    if catalog is not None:
        for item in catalog:
            if item not in table.index:
                raise ValueError(f"{path}: no embedding for item {item!r}")
    return table


def write_embeddings(path, table: EmbeddingTable) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{len(table.items)} {table.dim}"]
    for item, row in zip(table.items, table.vectors):
        lines.append(" ".join([item] + [repr(float(v)) for v in row]))
    path.write_text("\n".join(lines) + "\n")
    return path


# -- synthetic corpus ------------------------------------------------------------

@dataclass
class SynthConfig:
    n_items: int = 50
    n_users: int = 200
    n_clusters: int = 50
    seq_len: int = 10
    noise: float = 0.0
    dim: int = 16
    center_scale: float = 1.0
    seed: int = 0

    def validate(self) -> "SynthConfig":
        if self.n_clusters < 1 or self.n_items < self.n_clusters:
            raise ConfigError(f"synth: need n_items >= n_clusters >= 1, got {self.n_items} and {self.n_clusters}")
        if self.n_users < 1 or self.dim < 1:
            raise ConfigError("synth: n_users and dim must be >= 1")
        if self.seq_len < 5:
            raise ConfigError(f"synth.seq_len must be >= 5 so users survive 5-core filtering, got {self.seq_len}")
        if self.noise < 0:
            raise ConfigError(f"synth.noise must be >= 0, got {self.noise}")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class SyntheticCorpus:
    interactions: Interactions
    embeddings: EmbeddingTable
    successor: dict[str, str] = field(default_factory=dict)
    cluster: dict[str, int] = field(default_factory=dict)


def item_name(i: int, n: int) -> str:
    return f"i{i:0{len(str(n - 1))}d}"


def synthesize(cfg: SynthConfig) -> SyntheticCorpus:
    """Clustered item embeddings and users walking a deterministic item chain.

    Items are dealt to clusters round-robin.  Clusters are ordered in one
    seeded cycle; the item at position ``p`` of cluster ``c`` is followed by
    the item at position ``p mod |c'|`` of the next cluster ``c'``.  Each
    user starts at a random item and follows this rule, so the correct next
    item is always known.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    names = [item_name(i, cfg.n_items) for i in range(cfg.n_items)]
    cluster_of = np.arange(cfg.n_items) % cfg.n_clusters
    members = [np.flatnonzero(cluster_of == c) for c in range(cfg.n_clusters)]
    centers = rng.normal(scale=cfg.center_scale, size=(cfg.n_clusters, cfg.dim))
    vectors = centers[cluster_of]
    if cfg.noise > 0:
        vectors = vectors + cfg.noise * rng.normal(size=vectors.shape)

    cycle = rng.permutation(cfg.n_clusters)
    next_cluster = np.empty(cfg.n_clusters, dtype=np.int64)
    next_cluster[cycle] = np.roll(cycle, -1)
    successor = {}
    for c in range(cfg.n_clusters):
        target = members[next_cluster[c]]
        for p, i in enumerate(members[c]):
            successor[names[i]] = names[target[p % len(target)]]

    width = len(str(cfg.n_users - 1))
    users = {}
    for u in range(cfg.n_users):
        item = names[int(rng.integers(cfg.n_items))]
        seq = [item]
        for _ in range(cfg.seq_len - 1):
            item = successor[item]
            seq.append(item)
        users[f"u{u:0{width}d}"] = seq
    return SyntheticCorpus(users, EmbeddingTable(names, vectors), successor,
                           {names[i]: int(cluster_of[i]) for i in range(cfg.n_items)})


# -- index-level samples ------------------------------------------------------------

@dataclass
class Samples:
    """Histories as catalog indices, left-padded with -1 to a fixed width."""

    histories: np.ndarray
    targets: np.ndarray
    users: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.targets)

    def subset(self, index) -> "Samples":
        index = np.asarray(index, dtype=np.int64)
        users = [self.users[i] for i in index] if self.users else []
        return Samples(self.histories[index], self.targets[index], users)


def _pad_left(seq: Sequence[int], width: int) -> list[int]:
    seq = list(seq)[-width:]
    return [-1] * (width - len(seq)) + seq


@dataclass
class PreparedData:
    """Dataset and embeddings aligned on one catalog index."""

    dataset: InteractionDataset
    catalog: list[str]
    embeddings: np.ndarray
    train: Samples
    valid: Samples
    test: Samples

    @property
    def max_history(self) -> int:
        return self.dataset.max_history


def build_samples(dataset: InteractionDataset, table: EmbeddingTable) -> PreparedData:
    """Training pairs from every position of each user's pre-validation history, plus validation and test pairs.

    Validation predicts the validation item from the train prefix; test
    predicts the test item from the train prefix followed by the validation
    item.  Every history keeps its most recent ``max_history`` items, so
    training inputs reach the same length as evaluation inputs.
    """
    catalog = dataset.catalog
    index = {item: i for i, item in enumerate(catalog)}
    emb = table.lookup(catalog)
    width = dataset.max_history
    hist, tgt = [], []
    vh, vt, th, tt = [], [], [], []
    for u, s in dataset.splits.items():
        full = [index[i] for i in (s.history or s.train)]
        for t in range(1, len(full)):
            hist.append(_pad_left(full[:t], width))
            tgt.append(full[t])
        ids = full[-width:]
        vh.append(_pad_left(ids, width))
        vt.append(index[s.valid])
        th.append(_pad_left(ids + [index[s.valid]], width))
        tt.append(index[s.test])
    users = dataset.users

    def arr(h, t, us=()):
        return Samples(np.array(h, dtype=np.int64).reshape(len(t), width), np.array(t, dtype=np.int64), list(us))

    return PreparedData(dataset, catalog, emb, arr(hist, tgt), arr(vh, vt, users), arr(th, tt, users))


def prepare(interactions: Mapping[str, Sequence[str]], table: EmbeddingTable, max_history: int = 20,
            core: int = 5) -> PreparedData:
    filtered = five_core_filter(interactions, core) if core > 0 else dict(interactions)
    return build_samples(leave_one_out_split(filtered, max_history), table)
