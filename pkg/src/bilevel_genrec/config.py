"""Run configuration: a JSON document with dot-path overrides.

Sections are ``data``, ``synth``, ``tokenizer``, ``pretrain``, ``recommender``,
``train`` and ``eval`` plus top-level ``seed`` and ``output_dir``.  Unknown
keys are rejected.  ``train.lambda`` is accepted as an alias of
``train.token_weight``; ``tokenizer.input_dim`` may be ``null`` to take the
width of the embeddings file.
"""
from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

from .data import SynthConfig
from .errors import ConfigError
from .recommender import RecommenderConfig
from .tokenizer import TokenizerConfig
from .trainer import TrainConfig

ALIASES = {("train", "lambda"): ("train", "token_weight")}


@dataclass
class DataConfig:
    interactions: str | None = None
    embeddings: str | None = None
    max_history: int = 20
    core: int = 5

    def validate(self) -> "DataConfig":
        if self.max_history < 1:
            raise ConfigError(f"data.max_history must be >= 1, got {self.max_history}")
        if self.core < 0:
            raise ConfigError(f"data.core must be >= 0, got {self.core}")
        return self


@dataclass
class PretrainConfig:
    epochs: int = 200
    lr: float = 1e-3
    batch_size: int = 1024
    weight_decay: float = 1e-4
    kmeans_iters: int = 50

    def validate(self) -> "PretrainConfig":
        if self.epochs < 0:
            raise ConfigError(f"pretrain.epochs must be >= 0, got {self.epochs}")
        if self.lr < 0:
            raise ConfigError(f"pretrain.lr must be >= 0, got {self.lr}")
        if self.batch_size < 1 or self.kmeans_iters < 1:
            raise ConfigError("pretrain.batch_size and pretrain.kmeans_iters must be >= 1")
        if self.weight_decay < 0:
            raise ConfigError(f"pretrain.weight_decay must be >= 0, got {self.weight_decay}")
        return self


@dataclass
class EvalConfig:
    split: str = "test"
    ks: list[int] = field(default_factory=lambda: [5, 10])

    def validate(self) -> "EvalConfig":
        if self.split not in ("valid", "test"):
            raise ConfigError(f"eval.split must be 'valid' or 'test', got {self.split!r}")
        if not self.ks or any(k < 1 for k in self.ks):
            raise ConfigError(f"eval.ks must be positive integers, got {self.ks}")
        return self


SECTIONS = {
    "data": DataConfig,
    "synth": SynthConfig,
    "tokenizer": TokenizerConfig,
    "pretrain": PretrainConfig,
    "recommender": RecommenderConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
}

PROFILES: dict[str, dict] = {
    "desk": {
        "seed": 0,
        "output_dir": "runs/desk",
        "tokenizer": {"levels": 4, "codebook_size": 256, "input_dim": None, "code_dim": 32,
                      "encoder_hidden": [128, 64], "decoder_hidden": [64, 128], "beta": 0.25},
        "recommender": {"d_model": 64, "encoder_layers": 2, "decoder_layers": 2, "heads": 2, "head_dim": 32,
                        "ffn_dim": 128, "dropout": 0.1},
        "train": {"rec_lr": 5e-4, "token_weight": 0.5, "batch_size": 256, "patience": 20, "beam": 20},
    },
    "paper": {
        "seed": 0,
        "output_dir": "runs/paper",
        "tokenizer": {"levels": 4, "codebook_size": 256, "input_dim": None, "code_dim": 32,
                      "encoder_hidden": [512, 256, 128], "decoder_hidden": [128, 256, 512], "beta": 0.25},
        "pretrain": {"epochs": 20000, "lr": 1e-3, "batch_size": 1024, "weight_decay": 1e-4},
        "recommender": {"d_model": 128, "encoder_layers": 4, "decoder_layers": 4, "heads": 6, "head_dim": 64,
                        "ffn_dim": 1024, "dropout": 0.1},
        "train": {"rec_lr": 5e-4, "token_weight": 0.5, "batch_size": 256, "patience": 20, "beam": 20},
    },
}


@dataclass
class RunConfig:
    data: DataConfig
    synth: SynthConfig
    tokenizer: dict
    pretrain: PretrainConfig
    recommender: RecommenderConfig
    train: TrainConfig
    eval: EvalConfig
    seed: int = 0
    output_dir: str = "runs/desk"

    def tokenizer_config(self, input_dim: int) -> TokenizerConfig:
        """Tokenizer settings with the input width resolved against the embeddings."""
        t = dict(self.tokenizer)
        if t.get("input_dim") is None:
            t["input_dim"] = input_dim
        elif t["input_dim"] != input_dim:
            raise ConfigError(f"tokenizer.input_dim={t['input_dim']} but embeddings have width {input_dim}")
        return TokenizerConfig(**t).validate()

    def recommender_config(self) -> RecommenderConfig:
        return dataclasses.replace(self.recommender, max_items=self.data.max_history).validate()

    def to_dict(self) -> dict:
        out = {"seed": self.seed, "output_dir": self.output_dir, "tokenizer": dict(self.tokenizer)}
        for name in ("data", "synth", "pretrain", "recommender", "train", "eval"):
            out[name] = dataclasses.asdict(getattr(self, name))
        return out


def _merge(base: dict, over: Mapping) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _canonical(section: str, key: str) -> str:
    return ALIASES.get((section, key), (section, key))[1]


def _build_section(name: str, values: Mapping) -> Any:
    cls = SECTIONS[name]
    known = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in values.items():
        key = _canonical(name, key)
        if key not in known:
            raise ConfigError(f"unknown config key '{name}.{key}'")
        kwargs[key] = value
    if name == "tokenizer":
        tmp = dict(kwargs)
        # validated once input_dim is known
        if tmp.get("input_dim") is not None:
            TokenizerConfig(**tmp).validate()
        else:
            TokenizerConfig(**{**tmp, "input_dim": 1}).validate()
        return kwargs
    try:
        return cls(**kwargs).validate()
    except TypeError as exc:
        raise ConfigError(f"{name}: {exc}") from None


def build(raw: Mapping, profile: str = "desk") -> RunConfig:
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    merged = _merge(PROFILES[profile], raw)
    for key in merged:
        if key not in SECTIONS and key not in ("seed", "output_dir"):
            raise ConfigError(f"unknown config key '{key}'")
    sections = {name: _build_section(name, merged.get(name, {})) for name in SECTIONS}
    seed = merged.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {seed!r}")
    return RunConfig(seed=seed, output_dir=str(merged.get("output_dir", "runs/desk")), **sections)


def parse_value(text: str):
    """JSON literal when it parses (numbers, booleans, null, lists), else the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(raw: Mapping, overrides: Sequence[tuple[str, str]]) -> dict:
    """Set dot-path keys, e.g. ``("train.lambda", "0.5")``."""
    out = copy.deepcopy(dict(raw))
    for path, text in overrides:
        parts = path.split(".")
        if not all(parts):
            raise ConfigError(f"bad override key {path!r}")
        node = out
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {path!r} descends into a non-section value")
        node[parts[-1]] = parse_value(text)
    return out


def load(path=None, overrides: Sequence[tuple[str, str]] = (), profile: str | None = None) -> RunConfig:
    raw: dict = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object")
    profile = profile or raw.pop("profile", "desk")
    return build(apply_overrides(raw, overrides), profile)
