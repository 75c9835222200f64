"""Ranking metrics, collision-aware item ranking and codebook diagnostics."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .trie import IdentifierTrie, constrained_beam_search, item_sort_key


@dataclass
class RankingResult:
    """Per-user ranked items (collisions already expanded) and held-out targets."""

    ranked: dict[str, list[str]]
    targets: dict[str, str]

    def ranks(self) -> np.ndarray:
        """1-based rank of each user's target, 0 when it was not returned."""
        out = []
        for user, target in self.targets.items():
            items = self.ranked.get(user, [])
            out.append(items.index(target) + 1 if target in items else 0)
        return np.asarray(out, dtype=np.int64)


def recall_at_k(results: RankingResult, k: int) -> float:
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    ranks = results.ranks()
    if ranks.size == 0:
        return 0.0
    return float(np.mean((ranks >= 1) & (ranks <= k)))


def ndcg_at_k(results: RankingResult, k: int) -> float:
    """Mean of ``1/log2(rank + 1)`` over users, counting ranks beyond ``k`` as 0."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    ranks = results.ranks()
    if ranks.size == 0:
        return 0.0
    hit = (ranks >= 1) & (ranks <= k)
    gains = np.zeros(ranks.shape)
    gains[hit] = 1.0 / np.log2(ranks[hit] + 1.0)
    return float(gains.mean())


def expand_beam(beam: Sequence[tuple[tuple[int, ...], float]], terminals: Mapping[tuple[int, ...], Sequence[str]]) -> list[str]:
    """Replace identifiers by their items; colliding items appear together in ascending id order."""
    ranked: list[str] = []
    seen = set()
    for ident, _ in beam:
        for item in sorted(terminals[tuple(ident)], key=item_sort_key):
            if item not in seen:
                seen.add(item)
                ranked.append(item)
    return ranked


@dataclass
class CodebookStats:
    density: list[float]
    entropy: list[float]
    counts: list[np.ndarray] = field(repr=False, default_factory=list)

    def to_dict(self) -> dict:
        return {"density": list(self.density), "entropy": list(self.entropy)}


def codebook_stats(identifiers: np.ndarray, levels: int, codebook_size: int) -> CodebookStats:
    """Per-level fraction of used codes and base-2 entropy of code usage.

    ``identifiers`` is an (n_items, levels) integer array.
    """
    ids = np.asarray(identifiers, dtype=np.int64).reshape(-1, levels)
    if ids.size and (ids.min() < 0 or ids.max() >= codebook_size):
        raise ValueError(f"identifier codes must lie in [0, {codebook_size})")
    density, entropy, counts = [], [], []
    for level in range(levels):
        c = np.bincount(ids[:, level], minlength=codebook_size)
        counts.append(c)
        density.append(float(np.count_nonzero(c)) / codebook_size)
        if c.sum() == 0:
            entropy.append(0.0)
            continue
        p = c[c > 0] / c.sum()
        entropy.append(float(max(0.0, -(p * np.log2(p)).sum())))
    return CodebookStats(density, entropy, counts)


def evaluation_report(results: RankingResult, stats: CodebookStats, ks: Sequence[int] = (5, 10)) -> dict:
    report = {}
    for k in ks:
        report[f"recall@{k}"] = recall_at_k(results, k)
        report[f"ndcg@{k}"] = ndcg_at_k(results, k)
    report.update(stats.to_dict())
    report["users"] = len(results.targets)
    return report


def write_report(path, report: Mapping) -> Path:
    """One JSON object on a single line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(dict(report), sort_keys=True) + "\n")
    return path


def rank_items(recommender, tokenizer, embeddings: np.ndarray, catalog: Sequence[str], histories: np.ndarray,
               beam: int = 20, batch_size: int = 256) -> tuple[list[list[str]], IdentifierTrie]:
    """Constrained-beam ranking for each history (rows of catalog indices, -1 for padding).

    The trie is built from the tokenizer's current identifiers for the whole catalog.
    """
    from . import autodiff as ad
    from .recommender import tokenize_items

    with ad.no_grad():
        tokens = tokenize_items(tokenizer, embeddings, np.arange(len(catalog)), with_probs=False)
    trie = IdentifierTrie.build({catalog[i]: tuple(row) for i, row in zip(tokens.items, tokens.codes)})
    ranked: list[list[str]] = []
    for start in range(0, len(histories), batch_size):
        chunk = histories[start:start + batch_size]
        scorer = recommender.scorer(tokens, chunk)
        for beam_out in constrained_beam_search(scorer, trie, len(chunk), beam):
            ranked.append(expand_beam(beam_out, trie.terminals))
    return ranked, trie


def evaluate(recommender, tokenizer, embeddings: np.ndarray, catalog: Sequence[str], histories: np.ndarray,
             targets: np.ndarray, users: Sequence[str] | None = None, beam: int = 20,
             ks: Sequence[int] = (5, 10)) -> tuple[dict, RankingResult]:
    """Ranking metrics plus per-level codebook statistics of the current catalog identifiers."""
    users = list(users) if users else [str(i) for i in range(len(targets))]
    ranked, trie = rank_items(recommender, tokenizer, embeddings, catalog, histories, beam)
    results = RankingResult(dict(zip(users, ranked)), {u: catalog[t] for u, t in zip(users, targets)})
    identifiers = np.array(trie_identifiers_per_item(trie), dtype=np.int64)
    stats = codebook_stats(identifiers, tokenizer.config.levels, tokenizer.config.codebook_size)
    return evaluation_report(results, stats, ks), results


def trie_identifiers_per_item(trie: IdentifierTrie) -> list[tuple[int, ...]]:
    """One identifier row per catalog item (colliding items repeat their identifier)."""
    return [ident for ident, items in trie.terminals.items() for _ in items]
