"""RQ-VAE item tokenizer.

An MLP encoder maps a semantic embedding ``z`` to a latent ``r``; ``r`` is
quantized residually against ``levels`` codebooks, giving one code per level
(the item identifier); an MLP decoder reconstructs ``z`` from the sum of the
chosen codewords.
"""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import ParameterSet, Tensor
from .checkpoint import load_tensors, save_tensors
from .errors import ConfigError, TrainingDiverged
from .kmeans import kmeans
from .optim import AdamW

log = logging.getLogger(__name__)


@dataclass
class TokenizerConfig:
    levels: int = 4
    codebook_size: int = 256
    input_dim: int = 32
    code_dim: int = 32
    encoder_hidden: tuple[int, ...] = (128, 64)
    decoder_hidden: tuple[int, ...] = (64, 128)
    beta: float = 0.25

    def __post_init__(self):
        self.encoder_hidden = tuple(int(w) for w in self.encoder_hidden)
        self.decoder_hidden = tuple(int(w) for w in self.decoder_hidden)

    def validate(self) -> "TokenizerConfig":
        if self.levels < 1:
            raise ConfigError(f"tokenizer.levels must be >= 1, got {self.levels}")
        if self.codebook_size < 2:
            raise ConfigError(f"tokenizer.codebook_size must be >= 2, got {self.codebook_size}")
        if self.code_dim < 1 or self.input_dim < 1:
            raise ConfigError("tokenizer.code_dim and tokenizer.input_dim must be >= 1")
        if not self.beta > 0:
            raise ConfigError(f"tokenizer.beta must be > 0, got {self.beta}")
        if any(w < 1 for w in self.encoder_hidden + self.decoder_hidden):
            raise ConfigError("hidden widths must be >= 1")
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["encoder_hidden"] = list(self.encoder_hidden)
        d["decoder_hidden"] = list(self.decoder_hidden)
        return d


@dataclass
class QuantizationTrace:
    """Per-level quantization record for a batch of latents.

    ``residuals[l]`` is the residual entering level ``l`` (``residuals[0]`` is
    the latent itself); ``final_residual`` is what is left after the last level.
    """

    latent: Tensor
    residuals: list[Tensor]
    probs: list[Tensor]
    codes: np.ndarray
    selected: list[Tensor]
    quantized: Tensor
    final_residual: Tensor
    reconstruction: Tensor | None = None

    @property
    def identifiers(self) -> np.ndarray:
        return self.codes


@dataclass
class CatalogTokens:
    identifiers: dict[str, tuple[int, ...]]
    collisions: dict[tuple[int, ...], list[str]] = field(default_factory=dict)

    @property
    def collision_items(self) -> int:
        return sum(len(v) for v in self.collisions.values())


def assignment_distribution(v: Tensor, codebook: Tensor) -> Tensor:
    """softmax over codes of ``-||v - e_k||^2``; works on (d,) or (n, d) residuals."""
    v = ad.as_tensor(v)
    if v.ndim == 1:
        return assignment_distribution(ad.reshape(v, (1, -1)), codebook)[0]
    dist = ad.squared_distance(ad.reshape(v, (v.shape[0], 1, v.shape[1])), codebook)
    return ad.softmax(ad.neg(dist), axis=-1)


def nearest_code(v: np.ndarray, codebook: np.ndarray) -> np.ndarray:
    """Greedy nearest codeword by squared distance, lowest index on ties."""
    diff = v[:, None, :] - codebook[None, :, :]
    return np.argmin((diff * diff).sum(axis=-1), axis=1)


def select_codes(probs: np.ndarray) -> np.ndarray:
    """Most probable code per row, lowest index on ties.

    Identical to the nearest codeword except when two distances are so close
    that their probabilities round to the same float.
    """
    return np.argmax(probs, axis=-1)


def _layer_count(hidden: Sequence[int]) -> int:
    return len(hidden) + 1


class RQTokenizer:
    """Residual-quantization tokenizer with named parameters.

    Methods accept an optional ``params`` mapping so the same model can be
    evaluated at substituted (e.g. graph-connected) parameter values.
    """

    def __init__(self, config: TokenizerConfig, params: ParameterSet | None = None, seed: int = 0):
        self.config = config.validate()
        self.params = params if params is not None else ParameterSet(self.init_params(config, seed))

    @staticmethod
    def init_params(config: TokenizerConfig, seed: int = 0) -> dict[str, np.ndarray]:
        rng = np.random.default_rng(seed)
        values = {}
        values.update(nn.init_mlp(rng, "encoder", (config.input_dim, *config.encoder_hidden, config.code_dim)))
        values.update(nn.init_mlp(rng, "decoder", (config.code_dim, *config.decoder_hidden, config.input_dim)))
        for level in range(config.levels):
            values[f"codebook.{level}"] = rng.normal(size=(config.codebook_size, config.code_dim))
        return values

    # -- forward pieces ------------------------------------------------------------
    def _p(self, params) -> Mapping[str, Tensor]:
        return self.params.tensors() if params is None else params

    def codebook(self, level: int, params=None) -> Tensor:
        return self._p(params)[f"codebook.{level}"]

    def encode(self, z, params=None) -> Tensor:
        z = ad.as_tensor(z)
        if z.shape[-1] != self.config.input_dim:
            raise ad.ShapeError("encode", f"expected width {self.config.input_dim}, got {z.shape[-1]}")
        return nn.mlp(self._p(params), "encoder", z, _layer_count(self.config.encoder_hidden))

    def reconstruct(self, quantized, params=None) -> Tensor:
        quantized = ad.as_tensor(quantized)
        if quantized.shape[-1] != self.config.code_dim:
            raise ad.ShapeError("reconstruct", f"expected width {self.config.code_dim}, got {quantized.shape[-1]}")
        return nn.mlp(self._p(params), "decoder", quantized, _layer_count(self.config.decoder_hidden))

    def quantize(self, r, params=None) -> QuantizationTrace:
        """Residual quantization of latents ``r`` ((d_c,) or (n, d_c))."""
        r = ad.as_tensor(r)
        single = r.ndim == 1
        if single:
            r = ad.reshape(r, (1, -1))
        p = self._p(params)
        residual = r
        residuals, probs, selected, codes = [], [], [], []
        quantized = None
        for level in range(self.config.levels):
            cb = p[f"codebook.{level}"]
            probs.append(assignment_distribution(residual, cb))
            c = select_codes(probs[-1].data)
            e = ad.take(cb, c)
            residuals.append(residual)
            selected.append(e)
            codes.append(c)
            quantized = e if quantized is None else quantized + e
            # the residual chain belongs to the encoder path: codewords enter it frozen
            residual = residual - ad.stop_gradient(e)
        trace = QuantizationTrace(
            latent=r, residuals=residuals, probs=probs, codes=np.stack(codes, axis=1),
            selected=selected, quantized=quantized, final_residual=residual,
        )
        if single:
            trace = QuantizationTrace(
                latent=r[0], residuals=[v[0] for v in residuals], probs=[q[0] for q in probs],
                codes=trace.codes[0], selected=[e[0] for e in selected], quantized=quantized[0],
                final_residual=residual[0],
            )
        return trace

    def forward(self, z, params=None) -> QuantizationTrace:
        """Encode, quantize and reconstruct.

        The decoder sees the quantized vector's value with gradients routed to
        the latent (straight-through), the usual VQ-VAE estimator.
        """
        r = self.encode(z, params)
        trace = self.quantize(r, params)
        decoder_in = ad.straight_through(trace.quantized, trace.latent)
        trace.reconstruction = self.reconstruct(decoder_in, params)
        return trace

    def tokenization_loss(self, z, params=None) -> Tensor:
        """Sum over items of reconstruction + codebook + beta * commitment terms."""
        z = ad.as_tensor(z)
        if z.ndim == 1:
            z = ad.reshape(z, (1, -1))
        if z.shape[0] == 0:
            raise ValueError("tokenization_loss needs a non-empty batch")
        trace = self.forward(z, params)
        loss = ad.squared_distance(trace.reconstruction, z).sum()
        beta = self.config.beta
        for v, e in zip(trace.residuals, trace.selected):
            codebook_term = ad.squared_distance(ad.stop_gradient(v), e).sum()
            commit_term = ad.squared_distance(v, ad.stop_gradient(e)).sum()
            loss = loss + codebook_term + ad.scale(commit_term, beta)
        return loss

    # -- discrete outputs ------------------------------------------------------------
    def identifiers(self, embeddings: np.ndarray, params=None) -> np.ndarray:
        """(n, levels) integer codes; a pure function of (params, embeddings)."""
        with ad.no_grad():
            r = self.encode(Tensor(np.atleast_2d(embeddings)), params)
            return self.quantize(r, params).codes

    def tokenize_catalog(self, items: Sequence[str], embeddings: np.ndarray, params=None) -> CatalogTokens:
        codes = self.identifiers(embeddings, params)
        ids = {item: tuple(int(c) for c in row) for item, row in zip(items, codes)}
        groups: dict[tuple[int, ...], list[str]] = {}
        for item, ident in ids.items():
            groups.setdefault(ident, []).append(item)
        collisions = {k: sorted(v) for k, v in groups.items() if len(v) > 1}
        return CatalogTokens(ids, collisions)

    # -- initialisation and pretraining -------------------------------------------------
    def kmeans_init(self, embeddings: np.ndarray, seed: int = 0, max_iter: int = 50, tol: float = 1e-6) -> None:
        """Initialise codebooks level by level from k-means on the encoded residuals."""
        embeddings = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
        k = self.config.codebook_size
        if len(embeddings) < k and len(np.unique(embeddings, axis=0)) == len(embeddings):
            log.info("kmeans_init: %d items for %d codes; padding with perturbed duplicates", len(embeddings), k)
        rng = np.random.default_rng(seed)
        with ad.no_grad():
            residual = self.encode(Tensor(embeddings)).data
        for level in range(self.config.levels):
            centroids = kmeans(residual, k, rng, max_iter=max_iter, tol=tol)
            self.params.assign(f"codebook.{level}", centroids)
            with ad.no_grad():
                codes = select_codes(assignment_distribution(Tensor(residual), Tensor(centroids)).data)
            residual = residual - centroids[codes]

    def pretrain(
        self,
        embeddings: np.ndarray,
        epochs: int,
        lr: float = 1e-3,
        batch_size: int = 1024,
        weight_decay: float = 1e-4,
        seed: int = 0,
        callback: Callable[[int, float], None] | None = None,
    ) -> list[float]:
        """Minimise the tokenization loss with AdamW; returns the per-epoch loss."""
        embeddings = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
        history: list[float] = []
        if epochs <= 0 or lr == 0:
            return history
        opt = AdamW(self.params, lr, weight_decay=weight_decay)
        rng = np.random.default_rng(seed)
        n = len(embeddings)
        for epoch in range(epochs):
            order = rng.permutation(n)
            total = 0.0
            for start in range(0, n, batch_size):
                batch = embeddings[order[start:start + batch_size]]
                loss = self.tokenization_loss(Tensor(batch))
                value = loss.item()
                if not np.isfinite(value):
                    raise TrainingDiverged(f"tokenizer pretraining diverged at epoch {epoch}: loss={value}")
                total += value
                opt.step(ad.gradient(loss, self.params))
            history.append(total)
            if callback is not None:
                callback(epoch, total)
        return history

    # -- persistence ----------------------------------------------------------------
    def save(self, path, extra: Mapping | None = None):
        return save_tensors(path, "tokenizer", self.config.to_dict(), self.params.arrays(), extra)

    @classmethod
    def load(cls, path) -> "RQTokenizer":
        config, tensors, _ = load_tensors(path, kind="tokenizer")
        return cls(TokenizerConfig(**config), ParameterSet(tensors))
