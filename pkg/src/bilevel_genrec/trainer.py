"""Bi-level training of tokenizer and recommender, and its ablation strategies.

Strategies
----------
bloger
    Every step updates the recommender; every ``M`` steps a tentative plain
    gradient step on a support batch gives ``theta'``, and the tokenizer is
    updated from the meta-gradient of the query-batch recommendation loss plus
    ``lambda`` times the tokenization-loss gradient, with conflicting
    components projected out per parameter tensor.
bloger-no-gs
    As ``bloger`` without the projection.
joint, joint-gs
    One combined loss ``L_rec + lambda * L_token`` every step, no tentative
    update; ``joint-gs`` projects conflicts first.
fixed
    The tokenizer is frozen; only the recommender trains.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterSet, Tensor
from .data import PreparedData, Samples
from .errors import ConfigError, TrainingDiverged
from .evaluation import evaluate
from .optim import SGD, AdamW
from .recommender import GenerativeRecommender, tokenize_items
from .tokenizer import RQTokenizer

log = logging.getLogger(__name__)

STRATEGIES = ("bloger", "bloger-no-gs", "joint", "joint-gs", "fixed")
META_STRATEGIES = ("bloger", "bloger-no-gs")
DEFAULT_TOKENIZER_LR = 1e-4


@dataclass
class TrainConfig:
    strategy: str = "bloger"
    rec_lr: float = 5e-4
    # None means the default for strategies that train the tokenizer; it must stay None for "fixed"
    tokenizer_lr: float | None = None
    token_weight: float = 0.5
    update_period: int | None = None
    updates_per_epoch: int = 1
    batch_size: int = 256
    max_epochs: int = 200
    patience: int = 20
    weight_decay: float = 0.01
    optimizer: str = "adamw"
    same_batch: bool = False
    meta_mode: str = "unroll"
    eval_every: int = 1
    beam: int = 20
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"train.strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if not self.rec_lr > 0:
            raise ConfigError(f"train.rec_lr must be > 0, got {self.rec_lr}")
        if self.strategy == "fixed":
            if self.tokenizer_lr is not None:
                raise ConfigError("train.tokenizer_lr must be unset when strategy is 'fixed' (the tokenizer is frozen)")
        elif self.tokenizer_lr is not None and not self.tokenizer_lr > 0:
            raise ConfigError(f"train.tokenizer_lr must be > 0, got {self.tokenizer_lr}")
        if not self.token_weight >= 0:
            raise ConfigError(f"train.lambda must be >= 0, got {self.token_weight}")
        if self.update_period is not None and self.update_period < 1:
            raise ConfigError(f"train.update_period must be >= 1, got {self.update_period}")
        if self.updates_per_epoch < 1:
            raise ConfigError(f"train.updates_per_epoch must be >= 1, got {self.updates_per_epoch}")
        for name in ("batch_size", "patience", "eval_every", "beam"):
            if getattr(self, name) < 1:
                raise ConfigError(f"train.{name} must be >= 1, got {getattr(self, name)}")
        if self.max_epochs < 0:
            raise ConfigError(f"train.max_epochs must be >= 0, got {self.max_epochs}")
        if self.optimizer not in ("adamw", "sgd"):
            raise ConfigError(f"train.optimizer must be 'adamw' or 'sgd', got {self.optimizer!r}")
        if self.meta_mode not in ("unroll", "hvp"):
            raise ConfigError(f"train.meta_mode must be 'unroll' or 'hvp', got {self.meta_mode!r}")
        if self.weight_decay < 0:
            raise ConfigError(f"train.weight_decay must be >= 0, got {self.weight_decay}")
        return self

    @property
    def effective_tokenizer_lr(self) -> float | None:
        if self.strategy == "fixed":
            return None
        return DEFAULT_TOKENIZER_LR if self.tokenizer_lr is None else self.tokenizer_lr

    def period(self, steps_per_epoch: int) -> int:
        """Tokenizer update period M, given directly or as updates per epoch."""
        if self.update_period is not None:
            return self.update_period
        return max(1, steps_per_epoch // self.updates_per_epoch)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class GradientPair:
    rec: dict[str, np.ndarray]
    token: dict[str, np.ndarray]


# -- gradient surgery ---------------------------------------------------------------

def conflicting_groups(g_rec: Mapping[str, np.ndarray], g_token: Mapping[str, np.ndarray]) -> list[str]:
    """Names of parameter tensors whose two gradients have a negative inner product."""
    return [n for n in g_rec if float(np.vdot(g_rec[n], g_token[n])) < 0.0]


def conflict_rate(g_rec: Mapping[str, np.ndarray], g_token: Mapping[str, np.ndarray]) -> float:
    return len(conflicting_groups(g_rec, g_token)) / len(g_rec) if g_rec else 0.0


def project_conflict(g_rec: np.ndarray, g_token: np.ndarray) -> tuple[np.ndarray, bool]:
    """Remove the component of ``g_rec`` along ``g_token`` when the two conflict."""
    dot = float(np.vdot(g_rec, g_token))
    norm2 = float(np.vdot(g_token, g_token))
    if dot >= 0.0 or norm2 == 0.0:
        return g_rec, False
    return g_rec - (dot / norm2) * g_token, True


def gradient_surgery(g_rec: Mapping[str, np.ndarray], g_token: Mapping[str, np.ndarray]
                     ) -> tuple[dict[str, np.ndarray], list[str]]:
    """Per named tensor projection; returns the adjusted gradients and the names that were projected."""
    if set(g_rec) != set(g_token):
        raise ValueError("gradient pair has different parameter names")
    out, fired = {}, []
    for name in g_rec:
        a, b = np.asarray(g_rec[name]), np.asarray(g_token[name])
        if a.shape != b.shape:
            raise ValueError(f"{name}: shapes differ {a.shape} vs {b.shape}")
        out[name], hit = project_conflict(a, b)
        if hit:
            fired.append(name)
    return out, fired


# -- losses and meta steps ------------------------------------------------------------

def batch_items(samples: Samples) -> np.ndarray:
    h = samples.histories
    return np.unique(np.concatenate([h[h >= 0], samples.targets]))


def rec_loss(recommender: GenerativeRecommender, tokenizer: RQTokenizer, embeddings: np.ndarray,
             batch: Samples, theta=None, phi=None, rng=None) -> Tensor:
    """Recommendation loss with the batch tokenized on the fly."""
    tokens = tokenize_items(tokenizer, embeddings, batch_items(batch), phi)
    return recommender.recommendation_loss(tokens, batch.histories, batch.targets, theta, rng)


def token_loss(tokenizer: RQTokenizer, embeddings: np.ndarray, items: np.ndarray, phi=None) -> Tensor:
    return tokenizer.tokenization_loss(Tensor(embeddings[np.unique(items)]), phi)


def tentative_update(recommender, tokenizer, embeddings, support: Samples, lr: float,
                     theta=None, phi=None) -> dict[str, Tensor]:
    """``theta' = theta - lr * grad_theta L_rec`` as a recorded plain step, differentiable in theta and phi."""
    theta = recommender.params.tensors() if theta is None else dict(theta)
    loss = rec_loss(recommender, tokenizer, embeddings, support, theta, phi)
    names = list(theta)
    grads = ad.grad(loss, [theta[n] for n in names], create_graph=True)
    return {n: ad.sub(theta[n], ad.scale(g, lr)) for n, g in zip(names, grads)}


def meta_test_gradients(recommender, tokenizer, embeddings, support: Samples, query: Samples, lr: float,
                        mode: str = "unroll") -> GradientPair:
    """G_rec: total d/dphi of the query loss at theta'; G_token: grad of the query items' tokenization loss."""
    def build(phi, theta, batch):
        return rec_loss(recommender, tokenizer, embeddings, batch, theta, phi)

    g_rec = ad.unrolled_gradient(
        lambda phi, theta: build(phi, theta, query),
        lambda phi, theta: build(phi, theta, support),
        recommender.params, tokenizer.params, lr, mode=mode,
    )
    g_tok = ad.gradient(token_loss(tokenizer, embeddings, batch_items(query)), tokenizer.params)
    return GradientPair(ad.tensors_to_arrays(g_rec), ad.tensors_to_arrays(g_tok))


def direct_gradients(recommender, tokenizer, embeddings, batch: Samples, rng=None
                     ) -> tuple[float, dict[str, np.ndarray], GradientPair]:
    """One backward pass of L_rec for both parameter sets, plus G_token on the batch items."""
    theta, phi = recommender.params.tensors(), tokenizer.params.tensors()
    loss = rec_loss(recommender, tokenizer, embeddings, batch, theta, phi, rng)
    t_names, p_names = list(theta), list(phi)
    grads = ad.grad(loss, [theta[n] for n in t_names] + [phi[n] for n in p_names])
    g_theta = {n: g.data for n, g in zip(t_names, grads[:len(t_names)])}
    g_rec = {n: g.data for n, g in zip(p_names, grads[len(t_names):])}
    g_tok = ad.tensors_to_arrays(ad.gradient(token_loss(tokenizer, embeddings, batch_items(batch)), tokenizer.params))
    return loss.item(), g_theta, GradientPair(g_rec, g_tok)


def combine(pair_rec: Mapping[str, np.ndarray], g_token: Mapping[str, np.ndarray], weight: float) -> dict[str, np.ndarray]:
    return {n: pair_rec[n] + weight * g_token[n] for n in pair_rec}


def _check_finite(what: str, value) -> None:
    if isinstance(value, Mapping):
        for name, v in value.items():
            if not np.all(np.isfinite(v)):
                raise TrainingDiverged(f"{what}: non-finite gradient in {name}")
    elif not np.isfinite(value):
        raise TrainingDiverged(f"{what}: loss became {value}")


def param_digest(params: ParameterSet) -> str:
    h = hashlib.sha256()
    for name in params:
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name].data).tobytes())
    return h.hexdigest()[:16]


# -- training loop ------------------------------------------------------------------

@dataclass
class TrainResult:
    history: list[dict]
    best_epoch: int
    best_val_loss: float
    steps: int
    stopped_early: bool
    trace: list[dict] = field(default_factory=list)


class BilevelTrainer:
    """Runs one strategy over prepared data, mutating the given models in place."""

    def __init__(self, tokenizer: RQTokenizer, recommender: GenerativeRecommender, data: PreparedData,
                 config: TrainConfig, out_dir=None, trace_digests: bool = False):
        self.config = config.validate()
        self.tokenizer = tokenizer
        self.recommender = recommender
        self.data = data
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.trace_digests = trace_digests
        seeds = np.random.SeedSequence(config.seed).spawn(3)
        self.shuffle_rng = np.random.default_rng(seeds[0])
        self.meta_rng = np.random.default_rng(seeds[1])
        self.dropout_rng = np.random.default_rng(seeds[2])
        self.rec_opt = self._optimizer(recommender.params, config.rec_lr)
        lr_t = config.effective_tokenizer_lr
        self.tok_opt = self._optimizer(tokenizer.params, lr_t) if lr_t is not None else None
        self.step = 0
        self.trace: list[dict] = []
        self._conflicts = [0, 0]

    def _optimizer(self, params, lr):
        if self.config.optimizer == "sgd":
            return SGD(params, lr)
        return AdamW(params, lr, weight_decay=self.config.weight_decay)

    @property
    def embeddings(self) -> np.ndarray:
        return self.data.embeddings

    def steps_per_epoch(self) -> int:
        return max(1, -(-len(self.data.train) // self.config.batch_size))

    def draw_batch(self) -> Samples:
        n = len(self.data.train)
        idx = self.meta_rng.choice(n, size=min(self.config.batch_size, n), replace=False)
        return self.data.train.subset(np.sort(idx))

    # -- single updates ----------------------------------------------------------------
    def recommender_step(self, batch: Samples) -> float:
        """AdamW step on theta with the tokenizer frozen."""
        with ad.no_grad():
            tokens = tokenize_items(self.tokenizer, self.embeddings, batch_items(batch))
        loss = self.recommender.recommendation_loss(tokens, batch.histories, batch.targets,
                                                    rng=self.dropout_rng)
        value = loss.item()
        _check_finite("recommender step", value)
        grads = ad.tensors_to_arrays(ad.gradient(loss, self.recommender.params))
        _check_finite("recommender step", grads)
        self.rec_opt.step(grads)
        return value

    def tokenizer_step(self, g_rec: Mapping[str, np.ndarray], g_token: Mapping[str, np.ndarray]) -> None:
        update = combine(g_rec, g_token, self.config.token_weight)
        _check_finite("tokenizer step", update)
        self.tok_opt.step(update)

    def _surgery(self, pair: GradientPair, record: dict) -> dict[str, np.ndarray]:
        neg = conflicting_groups(pair.rec, pair.token)
        self._conflicts[0] += len(neg)
        self._conflicts[1] += len(pair.rec)
        record["conflicts"] = neg
        if self.config.strategy in ("bloger", "joint-gs"):
            g, fired = gradient_surgery(pair.rec, pair.token)
            record["events"].append("surgery")
            record["projected"] = fired
            return g
        return pair.rec

    def meta_step(self, batch: Samples, record: dict) -> None:
        cfg = self.config
        support = batch if cfg.same_batch else self.draw_batch()
        query = batch if cfg.same_batch else self.draw_batch()
        record["events"] += ["tentative_update", "meta_gradients"]
        pair = meta_test_gradients(self.recommender, self.tokenizer, self.embeddings, support, query,
                                   cfg.rec_lr, cfg.meta_mode)
        _check_finite("meta gradient", pair.rec)
        g_rec = self._surgery(pair, record)
        self.tokenizer_step(g_rec, pair.token)
        record["events"].append("tokenizer_step")

    def joint_step(self, batch: Samples, record: dict) -> float:
        value, g_theta, pair = direct_gradients(self.recommender, self.tokenizer, self.embeddings, batch,
                                                self.dropout_rng)
        _check_finite("joint step", value)
        _check_finite("joint step", g_theta)
        self.rec_opt.step(g_theta)
        g_rec = self._surgery(pair, record)
        self.tokenizer_step(g_rec, pair.token)
        record["events"] += ["joint_step", "tokenizer_step"]
        return value

    def train_step(self, batch: Samples, period: int) -> float:
        self.step += 1
        record = {"step": self.step, "events": []}
        cfg = self.config
        if cfg.strategy in ("joint", "joint-gs"):
            value = self.joint_step(batch, record)
        else:
            value = self.recommender_step(batch)
            record["events"].append("recommender_step")
            if cfg.strategy in META_STRATEGIES and self.step % period == 0:
                self.meta_step(batch, record)
        if self.trace_digests:
            record["theta"] = param_digest(self.recommender.params)
            record["phi"] = param_digest(self.tokenizer.params)
        self.trace.append(record)
        return value

    # -- validation ------------------------------------------------------------------
    def validation_loss(self, samples: Samples | None = None) -> float:
        samples = self.data.valid if samples is None else samples
        total = 0.0
        with ad.no_grad():
            for start in range(0, len(samples), self.config.batch_size):
                b = samples.subset(np.arange(start, min(start + self.config.batch_size, len(samples))))
                total += rec_loss(self.recommender, self.tokenizer, self.embeddings, b).item() * len(b)
        return total / max(1, len(samples))

    def catalog_token_loss(self) -> float:
        with ad.no_grad():
            n = len(self.embeddings)
            return self.tokenizer.tokenization_loss(Tensor(self.embeddings)).item() / n

    def evaluate(self, samples: Samples | None = None) -> dict:
        samples = self.data.valid if samples is None else samples
        report, _ = evaluate(self.recommender, self.tokenizer, self.embeddings, self.data.catalog,
                             samples.histories, samples.targets, samples.users, beam=self.config.beam)
        return report

    # -- loop ----------------------------------------------------------------------
    def train(self) -> TrainResult:
        cfg = self.config
        steps = self.steps_per_epoch()
        period = cfg.period(steps)
        log.info("strategy=%s steps/epoch=%d M=%d", cfg.strategy, steps, period)
        history: list[dict] = []
        best = (np.inf, -1)
        best_state = None
        wait = 0
        stopped = False
        metrics_path = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            metrics_path = self.out_dir / "metrics.jsonl"
            metrics_path.write_text("")
        for epoch in range(cfg.max_epochs):
            t0 = time.perf_counter()
            self._conflicts = [0, 0]
            order = self.shuffle_rng.permutation(len(self.data.train))
            losses = []
            for start in range(0, len(order), cfg.batch_size):
                batch = self.data.train.subset(np.sort(order[start:start + cfg.batch_size]))
                losses.append(self.train_step(batch, period))
            train_time = time.perf_counter() - t0
            val_loss = self.validation_loss()
            _check_finite("validation", val_loss)
            record = {
                "epoch": epoch,
                "train_loss_rec": float(np.mean(losses)),
                "train_loss_token": self.catalog_token_loss(),
                "val_loss_rec": val_loss,
                "conflict_rate": (self._conflicts[0] / self._conflicts[1]) if self._conflicts[1] else None,
                "recall@5": None, "recall@10": None, "ndcg@5": None, "ndcg@10": None,
                "train_time_s": train_time,
            }
            if (epoch + 1) % cfg.eval_every == 0 or epoch == cfg.max_epochs - 1:
                report = self.evaluate()
                for key in ("recall@5", "recall@10", "ndcg@5", "ndcg@10"):
                    record[key] = report[key]
            record["wall_time_s"] = time.perf_counter() - t0
            history.append(record)
            if metrics_path is not None:
                with metrics_path.open("a") as fh:
                    fh.write(json.dumps(record, sort_keys=True) + "\n")
            log.info("epoch %d rec=%.4f val=%.4f", epoch, record["train_loss_rec"], val_loss)
            if val_loss < best[0]:
                best = (val_loss, epoch)
                best_state = (self.recommender.params.arrays(), self.tokenizer.params.arrays())
                wait = 0
                self.save_checkpoint("best", epoch)
            else:
                wait += 1
                if wait >= cfg.patience:
                    stopped = True
                    break
        if best_state is not None:
            self.recommender.params.update(best_state[0])
            self.tokenizer.params.update(best_state[1])
        return TrainResult(history, best[1], float(best[0]), self.step, stopped, self.trace)

    def save_checkpoint(self, tag: str, epoch: int) -> None:
        if self.out_dir is None:
            return
        extra = {"epoch": epoch, "strategy": self.config.strategy}
        self.tokenizer.save(self.out_dir / tag / "tokenizer.npz", extra)
        self.recommender.save(self.out_dir / tag / "recommender.npz", extra)
