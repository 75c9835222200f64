"""Command-line entry point.

    bilevel-genrec synth    [--config FILE] [--a.b VALUE ...]
    bilevel-genrec pretrain [--resume CKPT]
    bilevel-genrec train    [--strategy NAME] [--tokenizer CKPT]
    bilevel-genrec eval     --checkpoint DIR [--report FILE]
    bilevel-genrec bench    [--epochs N] [--repeats N]

Any ``--section.key value`` pair (or ``--seed``/``--output_dir``) overrides
the config file.  Exit codes:
0 success, 1 invalid configuration or input, 2 divergence during training.
"""
from __future__ import annotations

import argparse
import gc
import json
import logging
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from . import config as config_mod
from .data import (
    EmbeddingTable, PreparedData, load_embeddings, load_interactions, prepare, synthesize, write_embeddings,
    write_interactions,
)
from .errors import ConfigError, TrainingDiverged
from .evaluation import evaluate, write_report
from .recommender import GenerativeRecommender, Vocabulary
from .tokenizer import RQTokenizer
from .trainer import BilevelTrainer

log = logging.getLogger("bilevel_genrec")

EXIT_OK, EXIT_INVALID, EXIT_DIVERGED = 0, 1, 2


def _emit(record: dict) -> None:
    print(json.dumps(record, sort_keys=True))


def _data_paths(cfg) -> tuple[Path, Path]:
    inter, emb = cfg.data.interactions, cfg.data.embeddings
    if not inter or not emb:
        raise ConfigError("data.interactions and data.embeddings must be set (run 'synth' or pass --data.*)")
    return Path(inter), Path(emb)


def load_table(cfg) -> EmbeddingTable:
    _, emb = _data_paths(cfg)
    if not emb.exists():
        raise ConfigError(f"embeddings file not found: {emb}")
    return load_embeddings(emb)


def load_prepared(cfg) -> PreparedData:
    inter, _ = _data_paths(cfg)
    if not inter.exists():
        raise ConfigError(f"interactions file not found: {inter}")
    table = load_table(cfg)
    users = load_interactions(inter)
    catalog = {i for items in users.values() for i in items}
    missing = sorted(catalog - set(table.items))
    if missing:
        raise ConfigError(f"no embedding for item {missing[0]!r}")
    return prepare(users, table, cfg.data.max_history, cfg.data.core)


def fresh_tokenizer(cfg, embeddings: np.ndarray) -> RQTokenizer:
    tok = RQTokenizer(cfg.tokenizer_config(embeddings.shape[1]), seed=cfg.seed)
    tok.kmeans_init(embeddings, seed=cfg.seed, max_iter=cfg.pretrain.kmeans_iters)
    return tok


def load_tokenizer(cfg, path, width: int) -> RQTokenizer:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"tokenizer checkpoint not found: {path}")
    tok = RQTokenizer.load(path)
    if tok.config.input_dim != width:
        raise ConfigError(f"{path}: tokenizer expects width {tok.config.input_dim}, embeddings have {width}")
    return tok


# -- commands ------------------------------------------------------------------------

def cmd_synth(cfg, args) -> int:
    out = Path(args.out or Path(cfg.output_dir) / "data")
    corpus = synthesize(cfg.synth)
    try:
        inter = write_interactions(out / "interactions.tsv", corpus.interactions)
        emb = write_embeddings(out / "embeddings.txt", corpus.embeddings)
    except OSError as exc:
        raise ConfigError(f"cannot write to {out}: {exc}") from None
    _emit({"command": "synth", "interactions": str(inter), "embeddings": str(emb),
           "users": len(corpus.interactions), "items": len(corpus.embeddings.items)})
    return EXIT_OK


def cmd_pretrain(cfg, args) -> int:
    table = load_table(cfg)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.resume:
        tok = load_tokenizer(cfg, args.resume, table.dim)
    else:
        tok = fresh_tokenizer(cfg, table.vectors)
    curve = out / "pretrain_loss.jsonl"
    with curve.open("w") as fh:
        def record(epoch, loss):
            fh.write(json.dumps({"epoch": epoch, "loss": loss}) + "\n")

        p = cfg.pretrain
        history = tok.pretrain(table.vectors, p.epochs, lr=p.lr, batch_size=p.batch_size,
                               weight_decay=p.weight_decay, seed=cfg.seed, callback=record)
    ckpt = tok.save(out / "tokenizer.npz", {"pretrain_epochs": p.epochs})
    _emit({"command": "pretrain", "checkpoint": str(ckpt), "epochs": p.epochs,
           "final_loss": history[-1] if history else None, "loss_curve": str(curve)})
    return EXIT_OK


def build_models(cfg, data: PreparedData, tokenizer_path=None):
    width = data.embeddings.shape[1]
    path = Path(tokenizer_path) if tokenizer_path else Path(cfg.output_dir) / "tokenizer.npz"
    if path.exists():
        tok = load_tokenizer(cfg, path, width)
    elif cfg.train.strategy == "fixed" and tokenizer_path is None:
        log.info("no tokenizer checkpoint; using a freshly k-means initialised tokenizer")
        tok = fresh_tokenizer(cfg, data.embeddings)
    else:
        raise ConfigError(f"tokenizer checkpoint not found: {path} (run 'pretrain' first)")
    vocab = Vocabulary(tok.config.levels, tok.config.codebook_size)
    rec = GenerativeRecommender(cfg.recommender_config(), vocab, seed=cfg.seed)
    return tok, rec


def cmd_train(cfg, args) -> int:
    data = load_prepared(cfg)
    tok, rec = build_models(cfg, data, args.tokenizer)
    out = Path(cfg.output_dir) / f"train-{cfg.train.strategy}"
    trainer = BilevelTrainer(tok, rec, data, cfg.train, out_dir=out)
    result = trainer.train()
    tok.save(out / "final" / "tokenizer.npz")
    rec.save(out / "final" / "recommender.npz")
    with (out / "trace.jsonl").open("w") as fh:
        for rec_ in result.trace:
            fh.write(json.dumps(rec_, sort_keys=True) + "\n")
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    _emit({"command": "train", "strategy": cfg.train.strategy, "epochs": len(result.history),
           "best_epoch": result.best_epoch, "best_val_loss": result.best_val_loss, "steps": result.steps,
           "stopped_early": result.stopped_early, "output": str(out)})
    return EXIT_OK


def _load_checkpoint(cfg, ckpt: Path, data: PreparedData):
    tok = load_tokenizer(cfg, ckpt / "tokenizer.npz", data.embeddings.shape[1])
    rec_path = ckpt / "recommender.npz"
    if not rec_path.exists():
        raise ConfigError(f"recommender checkpoint not found: {rec_path}")
    rec = GenerativeRecommender.load(rec_path)
    if (rec.vocab.levels, rec.vocab.codebook_size) != (tok.config.levels, tok.config.codebook_size):
        raise ConfigError(f"{ckpt}: recommender vocabulary does not match the tokenizer")
    if rec.config.max_items != data.max_history:
        raise ConfigError(f"{ckpt}: recommender expects {rec.config.max_items} history items, "
                          f"config has data.max_history={data.max_history}")
    return tok, rec


def cmd_eval(cfg, args) -> int:
    data = load_prepared(cfg)
    tok, rec = _load_checkpoint(cfg, Path(args.checkpoint), data)
    samples = data.test if cfg.eval.split == "test" else data.valid
    report, _ = evaluate(rec, tok, data.embeddings, data.catalog, samples.histories, samples.targets,
                         samples.users, beam=cfg.train.beam, ks=cfg.eval.ks)
    report["split"] = cfg.eval.split
    path = write_report(args.report or Path(args.checkpoint) / f"eval_{cfg.eval.split}.json", report)
    _emit({"command": "eval", "report": str(path), **report})
    return EXIT_OK


def _timed(fn) -> float:
    gc.collect()
    gc.disable()
    try:
        t0 = time.perf_counter()
        fn()
        return time.perf_counter() - t0
    finally:
        gc.enable()


def bench(cfg, data: PreparedData, epochs: int, repeats: int, tokenizer_state=None) -> dict:
    """Per-epoch train time for the fixed and bloger strategies and their eval time.

    Train time is the median epoch; eval time is the fastest of ``repeats``
    runs, with the two strategies' runs interleaved so drift affects both.
    """
    import dataclasses

    out, trainers = {}, {}
    for strategy in ("fixed", "bloger"):
        train_cfg = dataclasses.replace(
            cfg.train, strategy=strategy, max_epochs=epochs, patience=epochs + 1, eval_every=epochs + 1,
            tokenizer_lr=None if strategy == "fixed" else cfg.train.tokenizer_lr,
        )
        if tokenizer_state is None:
            tok = fresh_tokenizer(cfg, data.embeddings)
        else:
            tok = RQTokenizer(tokenizer_state.config, tokenizer_state.params.copy())
        vocab = Vocabulary(tok.config.levels, tok.config.codebook_size)
        rec = GenerativeRecommender(cfg.recommender_config(), vocab, seed=cfg.seed)
        trainer = BilevelTrainer(tok, rec, data, train_cfg)
        period = train_cfg.period(trainer.steps_per_epoch())

        def epoch(trainer=trainer, train_cfg=train_cfg, period=period):
            order = trainer.shuffle_rng.permutation(len(data.train))
            for start in range(0, len(order), train_cfg.batch_size):
                trainer.train_step(data.train.subset(np.sort(order[start:start + train_cfg.batch_size])), period)

        times = [_timed(epoch) for _ in range(epochs)]
        trainers[strategy] = trainer
        out[strategy] = {"train_epoch_s": statistics.median(times), "steps": trainer.step,
                         "update_period": period}
    eval_times = {s: [] for s in trainers}
    for _ in range(repeats):
        for strategy, trainer in trainers.items():
            eval_times[strategy].append(_timed(lambda: trainer.evaluate(data.test)))
    for strategy in trainers:
        out[strategy]["eval_s"] = min(eval_times[strategy])
    out["train_ratio"] = out["bloger"]["train_epoch_s"] / out["fixed"]["train_epoch_s"]
    out["eval_ratio"] = out["bloger"]["eval_s"] / out["fixed"]["eval_s"]
    return out


def cmd_bench(cfg, args) -> int:
    data = load_prepared(cfg)
    path = Path(cfg.output_dir) / "tokenizer.npz"
    state = load_tokenizer(cfg, path, data.embeddings.shape[1]) if path.exists() else None
    report = bench(cfg, data, args.epochs, args.repeats, state)
    out = Path(cfg.output_dir) / "bench.json"
    write_report(out, report)
    _emit({"command": "bench", "report": str(out), **report})
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "pretrain": cmd_pretrain, "train": cmd_train, "eval": cmd_eval,
            "bench": cmd_bench}


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bilevel-genrec", description="Bi-level generative recommendation.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--profile", choices=sorted(config_mod.PROFILES), help="default profile (desk)")
        return p

    common(sub.add_parser("synth", help="write a synthetic corpus")).add_argument("--out")
    common(sub.add_parser("pretrain", help="k-means init and pretrain the tokenizer")).add_argument("--resume")
    p = common(sub.add_parser("train", help="train with one strategy"))
    p.add_argument("--strategy")
    p.add_argument("--tokenizer", help="tokenizer checkpoint (default: OUTPUT_DIR/tokenizer.npz)")
    p = common(sub.add_parser("eval", help="evaluate a checkpoint directory"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--report")
    p = common(sub.add_parser("bench", help="time fixed vs bloger training and evaluation"))
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--repeats", type=int, default=3)
    return parser


TOP_LEVEL = ("seed", "output_dir")


def split_overrides(extra: list[str]) -> list[tuple[str, str]]:
    pairs = []
    i = 0
    while i < len(extra):
        tok = extra[i]
        key = tok[2:]
        if not tok.startswith("--") or ("." not in key and key.split("=")[0] not in TOP_LEVEL):
            raise ConfigError(f"unrecognised argument {tok!r}; overrides look like --section.key VALUE")
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ConfigError(f"override {tok} needs a value")
            value = extra[i + 1]
            i += 2
        pairs.append((key, value))
    return pairs


def main(argv=None) -> int:
    parser = make_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = split_overrides(extra)
        if getattr(args, "strategy", None):
            overrides.append(("train.strategy", args.strategy))
        cfg = config_mod.load(args.config, overrides, args.profile)
        return COMMANDS[args.command](cfg, args)
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
