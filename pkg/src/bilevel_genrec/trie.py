"""Prefix tree over catalog identifiers and trie-constrained beam search."""
from __future__ import annotations

from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

Identifier = tuple[int, ...]
# scorer(rows, prefixes) -> (n, K) log-probabilities of the next code, where
# ``rows`` picks the query (user) of each prefix and ``prefixes`` is (n, depth)
Scorer = Callable[[np.ndarray, np.ndarray], np.ndarray]


def item_sort_key(item: str):
    """Ascending item order: all-digit ids compare numerically, others as text."""
    s = str(item)
    return (0, int(s), s) if s.isdigit() else (1, 0, s)


class IdentifierTrie:
    """Immutable prefix tree over fixed-length identifiers.

    ``allowed_next(prefix)`` gives the codes that extend ``prefix`` towards
    some catalog identifier; ``items(identifier)`` gives the items sharing it.
    """

    def __init__(self, levels: int, children: dict[Identifier, tuple[int, ...]],
                 terminals: dict[Identifier, tuple[str, ...]]):
        self.levels = levels
        self._children = children
        self._terminals = terminals

    @classmethod
    def build(cls, catalog: Mapping[str, Sequence[int]]) -> "IdentifierTrie":
        if not catalog:
            raise ValueError("cannot build a trie from an empty catalog")
        levels = None
        children: dict[Identifier, set[int]] = {}
        terminals: dict[Identifier, list[str]] = {}
        for item, ident in catalog.items():
            ident = tuple(int(c) for c in ident)
            if levels is None:
                levels = len(ident)
            if len(ident) != levels or levels == 0:
                raise ValueError(f"item {item!r}: identifier length {len(ident)} != {levels}")
            for depth in range(levels):
                children.setdefault(ident[:depth], set()).add(ident[depth])
            terminals.setdefault(ident, []).append(str(item))
        return cls(
            levels,
            {k: tuple(sorted(v)) for k, v in children.items()},
            {k: tuple(sorted(v, key=item_sort_key)) for k, v in terminals.items()},
        )

    def allowed_next(self, prefix: Sequence[int]) -> frozenset[int]:
        prefix = tuple(int(c) for c in prefix)
        if len(prefix) >= self.levels:
            return frozenset()
        return frozenset(self._children.get(prefix, ()))

    def children(self, prefix: Identifier) -> tuple[int, ...]:
        """Allowed codes as a sorted tuple (empty for unknown prefixes)."""
        return self._children.get(prefix, ())

    def items(self, identifier: Sequence[int]) -> tuple[str, ...]:
        return self._terminals.get(tuple(int(c) for c in identifier), ())

    @property
    def terminals(self) -> Mapping[Identifier, tuple[str, ...]]:
        return self._terminals

    def identifiers(self) -> list[Identifier]:
        return sorted(self._terminals)

    def __contains__(self, identifier) -> bool:
        return tuple(int(c) for c in identifier) in self._terminals

    def __len__(self) -> int:
        return len(self._terminals)

    def export_text(self, path) -> Path:
        """One line per (identifier, item): ``c1 c2 ... cL<TAB>item_id``."""
        path = Path(path)
        lines = []
        for ident in self.identifiers():
            codes = " ".join(str(c) for c in ident)
            lines.extend(f"{codes}\t{item}" for item in self._terminals[ident])
        path.write_text("\n".join(lines) + "\n")
        return path


def _ranked(candidates: list[tuple[float, Identifier]], width: int) -> list[tuple[float, Identifier]]:
    # score descending, then identifier ascending
    if not candidates:
        return []
    scores = np.array([s for s, _ in candidates])
    idents = np.array([c for _, c in candidates], dtype=np.int64).reshape(len(candidates), -1)
    keys = [idents[:, j] for j in range(idents.shape[1] - 1, -1, -1)] + [-scores]
    order = np.lexsort(keys)[:width]
    return [candidates[i] for i in order]


def constrained_beam_search(scorer: Scorer, trie: IdentifierTrie, n_queries: int,
                            beam_width: int) -> list[list[tuple[Identifier, float]]]:
    """Beam search over identifiers restricted to paths of ``trie``.

    Scores are summed next-code log-probabilities.  Codes outside the trie
    are masked to ``-inf`` before the top-``beam_width`` selection, and
    ``-inf`` entries never enter a beam.  Every level after the first scores
    exactly ``beam_width`` rows per query (unused slots are padding), so the
    cost does not depend on the shape of the trie.  Returns, per query,
    ``(identifier, log_prob)`` sorted by log-probability descending with ties
    broken by identifier.
    """
    if beam_width < 1:
        raise ValueError(f"beam_width must be >= 1, got {beam_width}")
    q = n_queries
    prefixes = np.zeros((q, 1, 0), dtype=np.int64)
    scores = np.zeros((q, 1))
    masks: dict[Identifier, np.ndarray] = {}
    for depth in range(trie.levels):
        b = prefixes.shape[1]
        flat = prefixes.reshape(q * b, depth)
        logp = np.asarray(scorer(np.repeat(np.arange(q), b), flat), dtype=np.float64)
        k = logp.shape[1]
        allowed = np.zeros((q * b, k), dtype=bool)
        live = np.isfinite(scores).reshape(-1)
        for row in np.flatnonzero(live):
            key = tuple(flat[row].tolist())
            m = masks.get(key)
            if m is None:
                m = np.zeros(k, dtype=bool)
                m[list(trie.children(key))] = True
                masks[key] = m
            allowed[row] = m
        cand = np.where(allowed, scores.reshape(-1, 1) + logp, -np.inf).reshape(q, b * k)
        codes = np.broadcast_to(np.arange(k), (q, b, k)).reshape(q, b * k)
        cols = [np.repeat(prefixes[:, :, j], k, axis=1) for j in range(depth)]
        keys = [codes] + cols[::-1] + [-cand]
        order = np.lexsort(keys, axis=-1)[:, :beam_width]
        take = lambda a: np.take_along_axis(a, order, axis=1)  # noqa: E731
        new_prefix = [take(c) for c in cols] + [take(codes)]
        prefixes = np.stack(new_prefix, axis=-1)
        scores = take(cand)
    out = []
    for qi in range(q):
        live = np.isfinite(scores[qi])
        out.append([(tuple(int(c) for c in prefixes[qi, j]), float(scores[qi, j])) for j in np.flatnonzero(live)])
    return out


def exhaustive_ranking(scorer: Scorer, trie: IdentifierTrie, query: int) -> list[tuple[Identifier, float]]:
    """Score every catalog identifier for one query; the reference for beam search."""
    out = []
    for ident in trie.identifiers():
        total = 0.0
        for depth in range(trie.levels):
            logp = np.asarray(scorer(np.array([query]), np.array([ident[:depth]], dtype=np.int64).reshape(1, depth)))
            total += float(logp[0, ident[depth]])
        out.append((total, ident))
    return [(ident, score) for score, ident in _ranked(out, len(out))]
