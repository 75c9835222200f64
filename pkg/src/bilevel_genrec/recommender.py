"""Encoder-decoder next-item generator over identifier tokens.

Token ``(level, code)`` maps to vocabulary index ``level * K + code`` with
levels numbered from 0; ``BOS = L * K`` and ``PAD = L * K + 1``.  Output
logits are inner products with the token embedding table (weight tying).
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import ParameterSet, Tensor
from .checkpoint import load_tensors, save_tensors
from .errors import ConfigError

NEG_INF = -1e30


@dataclass(frozen=True)
class Vocabulary:
    levels: int
    codebook_size: int

    @property
    def bos(self) -> int:
        return self.levels * self.codebook_size

    @property
    def pad(self) -> int:
        return self.levels * self.codebook_size + 1

    @property
    def size(self) -> int:
        return self.levels * self.codebook_size + 2

    def index(self, level: int, code: int) -> int:
        if not 0 <= level < self.levels:
            raise ValueError(f"level {level} outside [0, {self.levels})")
        if not 0 <= code < self.codebook_size:
            raise ValueError(f"code {code} outside [0, {self.codebook_size})")
        return level * self.codebook_size + code

    def tokens(self, codes: np.ndarray) -> np.ndarray:
        """(..., L) identifier codes -> (..., L) vocabulary indices."""
        codes = np.asarray(codes, dtype=np.int64)
        return codes + self.codebook_size * np.arange(self.levels)


@dataclass
class RecommenderConfig:
    d_model: int = 64
    encoder_layers: int = 2
    decoder_layers: int = 2
    heads: int = 2
    head_dim: int = 32
    ffn_dim: int = 128
    dropout: float = 0.1
    max_items: int = 20

    def validate(self) -> "RecommenderConfig":
        for name in ("d_model", "encoder_layers", "decoder_layers", "heads", "head_dim", "ffn_dim", "max_items"):
            if getattr(self, name) < 1:
                raise ConfigError(f"recommender.{name} must be >= 1, got {getattr(self, name)}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"recommender.dropout must be in [0, 1), got {self.dropout}")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class MixedToken:
    hard: Tensor
    soft: Tensor
    mixed: Tensor


def pad_distribution(level: int, probs, vocab: Vocabulary) -> Tensor:
    """Place a level's code distribution (..., K) at its slots of a (..., V) vector."""
    if not 0 <= level < vocab.levels:
        raise ValueError(f"level {level} outside [0, {vocab.levels})")
    probs = ad.as_tensor(probs)
    k = vocab.codebook_size
    if probs.shape[-1] != k:
        raise ad.ShapeError("pad_distribution", f"expected {k} probabilities, got {probs.shape[-1]}")
    lead = probs.shape[:-1]
    parts = []
    if level > 0:
        parts.append(Tensor(np.zeros(lead + (level * k,))))
    parts.append(probs)
    parts.append(Tensor(np.zeros(lead + (vocab.size - (level + 1) * k,))))
    return ad.concat(parts, axis=-1)


def mixed_representation(hard_index, padded_probs, table: Tensor) -> MixedToken:
    """Hard lookup value with the gradient of the probability-weighted soft embedding."""
    hard = ad.take(table, hard_index)
    soft = ad.matmul(padded_probs, table)
    return MixedToken(hard, soft, ad.straight_through(hard, soft))


@dataclass
class TokenizedItems:
    """Identifiers and code distributions for the distinct items of a batch."""

    items: np.ndarray
    codes: np.ndarray
    probs: list[Tensor] | None

    def local(self, index: np.ndarray) -> np.ndarray:
        """Catalog indices -> rows of this table; -1 (padding) maps to ``len(items)``."""
        index = np.asarray(index)
        pos = np.searchsorted(self.items, np.where(index < 0, self.items[0], index))
        return np.where(index < 0, len(self.items), pos)


def tokenize_items(tokenizer, embeddings: np.ndarray, items: np.ndarray, params=None,
                   with_probs: bool = True) -> TokenizedItems:
    """Run the tokenizer on the given catalog rows (sorted, distinct)."""
    items = np.unique(np.asarray(items, dtype=np.int64))
    r = tokenizer.encode(Tensor(embeddings[items]), params)
    trace = tokenizer.quantize(r, params)
    return TokenizedItems(items, trace.codes, trace.probs if with_probs else None)


class GenerativeRecommender:
    """Pre-norm transformer encoder-decoder with learned absolute positions."""

    def __init__(self, config: RecommenderConfig, vocab: Vocabulary, params: ParameterSet | None = None,
                 seed: int = 0):
        self.config = config.validate()
        self.vocab = vocab
        self.params = params if params is not None else ParameterSet(self.init_params(config, vocab, seed))

    @property
    def max_tokens(self) -> int:
        return self.config.max_items * self.vocab.levels

    @staticmethod
    def init_params(config: RecommenderConfig, vocab: Vocabulary, seed: int = 0) -> dict[str, np.ndarray]:
        rng = np.random.default_rng(seed)
        d, inner = config.d_model, config.heads * config.head_dim
        v: dict[str, np.ndarray] = {
            "embed.tokens": rng.normal(scale=d ** -0.5, size=(vocab.size, d)),
            "embed.encoder_positions": rng.normal(scale=0.02, size=(config.max_items * vocab.levels, d)),
            "embed.decoder_positions": rng.normal(scale=0.02, size=(vocab.levels, d)),
        }

        def attn(prefix):
            for name, (a, b) in {"query": (d, inner), "key": (d, inner), "value": (d, inner), "out": (inner, d)}.items():
                for k, x in nn.init_linear(rng, a, b).items():
                    v[f"{prefix}.{name}.{k}"] = x

        for i in range(config.encoder_layers):
            p = f"encoder.{i}"
            v.update(nn.init_layer_norm(f"{p}.attn_norm", d))
            attn(f"{p}.attn")
            v.update(nn.init_layer_norm(f"{p}.ffn_norm", d))
            v.update(nn.init_mlp(rng, f"{p}.ffn", (d, config.ffn_dim, d)))
        v.update(nn.init_layer_norm("encoder.norm", d))
        for i in range(config.decoder_layers):
            p = f"decoder.{i}"
            v.update(nn.init_layer_norm(f"{p}.self_norm", d))
            attn(f"{p}.self_attn")
            v.update(nn.init_layer_norm(f"{p}.cross_norm", d))
            attn(f"{p}.cross_attn")
            v.update(nn.init_layer_norm(f"{p}.ffn_norm", d))
            v.update(nn.init_mlp(rng, f"{p}.ffn", (d, config.ffn_dim, d)))
        v.update(nn.init_layer_norm("decoder.norm", d))
        return v

    def _p(self, params) -> Mapping[str, Tensor]:
        return self.params.tensors() if params is None else params

    # -- building blocks ----------------------------------------------------------------
    def _attention(self, p, prefix, x, memory, mask) -> Tensor:
        """Multi-head attention of ``x`` (B, S, d) over ``memory`` (B, S_k, d); ``mask`` is additive."""
        h, dh = self.config.heads, self.config.head_dim
        b, s, sk = x.shape[0], x.shape[1], memory.shape[1]

        def split(t, n):
            return ad.transpose(ad.reshape(t, (b, n, h, dh)), (0, 2, 1, 3))

        q = split(nn.linear(p, f"{prefix}.query", x), s)
        k = split(nn.linear(p, f"{prefix}.key", memory), sk)
        v = split(nn.linear(p, f"{prefix}.value", memory), sk)
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        weights = ad.softmax(scores + Tensor(mask), axis=-1)
        out = ad.reshape(ad.transpose(ad.matmul(weights, v), (0, 2, 1, 3)), (b, s, h * dh))
        return nn.linear(p, f"{prefix}.out", out)

    def _ffn(self, p, prefix, x) -> Tensor:
        return nn.mlp(p, prefix, x, 2)

    def _drop(self, x, rng):
        return ad.dropout(x, self.config.dropout, rng)

    # -- encoder / decoder ----------------------------------------------------------------
    def encode(self, inputs: Tensor, pad_mask: np.ndarray, params=None, rng=None) -> Tensor:
        """Encoder states for input embeddings (B, S, d); ``pad_mask`` marks PAD positions."""
        p = self._p(params)
        s = inputs.shape[1]
        if s > self.max_tokens:
            raise ad.ShapeError("encode", f"{s} input tokens exceed the maximum of {self.max_tokens}")
        if s == 0:
            raise ad.ShapeError("encode", "empty input sequence")
        x = inputs + ad.getitem(p["embed.encoder_positions"], slice(self.max_tokens - s, None))
        mask = np.where(np.asarray(pad_mask, dtype=bool), NEG_INF, 0.0)[:, None, None, :]
        for i in range(self.config.encoder_layers):
            pre = f"encoder.{i}"
            y = nn.layer_norm(p, f"{pre}.attn_norm", x)
            x = x + self._drop(self._attention(p, f"{pre}.attn", y, y, mask), rng)
            y = nn.layer_norm(p, f"{pre}.ffn_norm", x)
            x = x + self._drop(self._ffn(p, f"{pre}.ffn", y), rng)
        return nn.layer_norm(p, "encoder.norm", x)

    def decode(self, memory: Tensor, pad_mask: np.ndarray, targets: Tensor, params=None, rng=None) -> Tensor:
        """Decoder states for target-side inputs (B, S_t, d) (BOS first), causally masked."""
        p = self._p(params)
        st = targets.shape[1]
        if st > self.vocab.levels:
            raise ad.ShapeError("decode", f"{st} target positions exceed {self.vocab.levels}")
        x = targets + ad.getitem(p["embed.decoder_positions"], slice(0, st))
        causal = np.triu(np.full((st, st), NEG_INF), k=1)[None, None]
        cross = np.where(np.asarray(pad_mask, dtype=bool), NEG_INF, 0.0)[:, None, None, :]
        for i in range(self.config.decoder_layers):
            pre = f"decoder.{i}"
            y = nn.layer_norm(p, f"{pre}.self_norm", x)
            x = x + self._drop(self._attention(p, f"{pre}.self_attn", y, y, causal), rng)
            y = nn.layer_norm(p, f"{pre}.cross_norm", x)
            x = x + self._drop(self._attention(p, f"{pre}.cross_attn", y, memory, cross), rng)
            y = nn.layer_norm(p, f"{pre}.ffn_norm", x)
            x = x + self._drop(self._ffn(p, f"{pre}.ffn", y), rng)
        return nn.layer_norm(p, "decoder.norm", x)

    def score(self, hidden: Tensor, params=None) -> Tensor:
        """Logits over the vocabulary: inner products with the token embeddings."""
        table = self._p(params)["embed.tokens"]
        return ad.matmul(hidden, ad.transpose(table))

    # -- item-level assembly ------------------------------------------------------------
    def item_embeddings(self, tokens: TokenizedItems, params=None, mode: str = "mixed") -> Tensor:
        """(U + 1, L, d) per-item token embeddings; the last row is all PAD."""
        table = self._p(params)["embed.tokens"]
        ids = self.vocab.tokens(tokens.codes)
        if mode == "mixed":
            if tokens.probs is None:
                raise ValueError("mixed embeddings need code distributions")
            padded = ad.stack([pad_distribution(l, pr, self.vocab) for l, pr in enumerate(tokens.probs)], axis=1)
            emb = mixed_representation(ids, padded, table).mixed
        elif mode == "hard":
            emb = ad.take(table, ids)
        else:
            raise ValueError(f"unknown embedding mode {mode!r}")
        pad_row = ad.take(table, np.full((1, self.vocab.levels), self.vocab.pad))
        return ad.concat([emb, pad_row], axis=0)

    def sequence_inputs(self, item_emb: Tensor, local_hist: np.ndarray) -> tuple[Tensor, np.ndarray]:
        b, t = local_hist.shape
        x = ad.reshape(ad.take(item_emb, local_hist), (b, t * self.vocab.levels, self.config.d_model))
        pad = np.repeat(local_hist == item_emb.shape[0] - 1, self.vocab.levels, axis=1)
        return x, pad

    def decoder_inputs(self, item_emb: Tensor, local_target: np.ndarray, params=None) -> Tensor:
        table = self._p(params)["embed.tokens"]
        b = len(local_target)
        bos = ad.take(table, np.full((b, 1), self.vocab.bos))
        tgt = ad.take(item_emb, local_target)
        if self.vocab.levels == 1:
            return bos
        return ad.concat([bos, ad.getitem(tgt, (slice(None), slice(0, self.vocab.levels - 1)))], axis=1)

    def forward(self, tokens: TokenizedItems, histories: np.ndarray, targets: np.ndarray, params=None,
                rng=None, mode: str = "mixed") -> Tensor:
        """Logits (B, L, V) for teacher-forced targets."""
        item_emb = self.item_embeddings(tokens, params, mode)
        x, pad = self.sequence_inputs(item_emb, tokens.local(histories))
        memory = self.encode(x, pad, params, rng)
        dec = self.decode(memory, pad, self.decoder_inputs(item_emb, tokens.local(targets), params), params, rng)
        return self.score(dec, params)

    def recommendation_loss(self, tokens: TokenizedItems, histories: np.ndarray, targets: np.ndarray,
                            params=None, rng=None, mode: str = "mixed") -> Tensor:
        """Sum over levels of target-token NLL, averaged over the batch."""
        targets = np.asarray(targets)
        if len(targets) == 0:
            raise ValueError("recommendation_loss needs a non-empty batch")
        logits = self.forward(tokens, histories, targets, params, rng, mode)
        labels = self.vocab.tokens(tokens.codes[tokens.local(targets)])
        nll = ad.cross_entropy(logits, labels)
        return ad.scale(ad.sum(nll), 1.0 / len(targets))

    # -- inference ------------------------------------------------------------------
    def scorer(self, tokens: TokenizedItems, histories: np.ndarray, params=None):
        """Next-code log-probabilities for constrained beam search over the given histories.

        Uses hard embeddings; encoder states are computed once per history.
        """
        with ad.no_grad():
            item_emb = self.item_embeddings(tokens, params, mode="hard")
            x, pad = self.sequence_inputs(item_emb, tokens.local(histories))
            memory = self.encode(x, pad, params).data
        table = self._p(params)["embed.tokens"].data
        k = self.vocab.codebook_size

        def score(rows: np.ndarray, prefixes: np.ndarray) -> np.ndarray:
            depth = prefixes.shape[1]
            bos = np.full((len(rows), 1), self.vocab.bos)
            ids = np.concatenate([bos, prefixes + k * np.arange(depth)], axis=1)
            with ad.no_grad():
                dec = self.decode(Tensor(memory[rows]), pad[rows], Tensor(table[ids]), params)
                last = self.score(ad.getitem(dec, (slice(None), depth)), params)
                logp = ad.log_softmax(last, axis=-1).data
            return logp[:, depth * k:(depth + 1) * k]

        return score

    # -- persistence ----------------------------------------------------------------
    def save(self, path, extra: Mapping | None = None):
        config = {"recommender": self.config.to_dict(), "levels": self.vocab.levels,
                  "codebook_size": self.vocab.codebook_size}
        return save_tensors(path, "recommender", config, self.params.arrays(), extra)

    @classmethod
    def load(cls, path) -> "GenerativeRecommender":
        config, tensors, _ = load_tensors(path, kind="recommender")
        vocab = Vocabulary(config["levels"], config["codebook_size"])
        return cls(RecommenderConfig(**config["recommender"]), vocab, ParameterSet(tensors))
