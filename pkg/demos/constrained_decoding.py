"""
Trie-constrained beam search
============================

A recommender emits an item as a sequence of codes.  Restricting every step
to codes that continue some catalog identifier guarantees that each decoded
sequence names a real item.
"""
import numpy as np

from bilevel_genrec.evaluation import expand_beam
from bilevel_genrec.trie import IdentifierTrie, constrained_beam_search, exhaustive_ranking

catalog = {"a": (0, 3), "b": (1, 0), "c": (1, 0), "d": (2, 1), "e": (2, 2)}
trie = IdentifierTrie.build(catalog)
print("first codes:", sorted(trie.allowed_next(())), " after 2:", sorted(trie.allowed_next((2,))))
print("items at (1, 0):", trie.items((1, 0)))

# %%
# A scorer maps (query rows, prefixes) to next-code log-probabilities.
rng = np.random.default_rng(0)
table = np.log(rng.dirichlet(np.ones(4), size=(2, 5)))   # query x (depth, last code)


def scorer(rows, prefixes):
    key = 0 if prefixes.shape[1] == 0 else 1 + prefixes[:, -1]
    return table[rows, key]


beams = constrained_beam_search(scorer, trie, n_queries=2, beam_width=3)
for q, beam in enumerate(beams):
    print(f"query {q}:", [(ident, round(s, 3)) for ident, s in beam])
    print("   ranked items:", expand_beam(beam, trie.terminals))

# %%
# With a beam as wide as the catalog the result equals exhaustive scoring.
wide = constrained_beam_search(scorer, trie, 2, beam_width=8)[0]
assert [i for i, _ in wide] == [i for i, _ in exhaustive_ranking(scorer, trie, 0)]
