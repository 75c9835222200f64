"""
Training the tokenizer and the recommender together
===================================================

The full pipeline on the noise-free synthetic corpus: pretrain the tokenizer,
then train the generative recommender with a frozen tokenizer ("fixed") and
with bi-level tokenizer updates ("bloger"), and compare test metrics.
Takes about a minute.
"""
import dataclasses
from pathlib import Path

from bilevel_genrec import cli
from bilevel_genrec import config as config_mod
from bilevel_genrec.data import prepare, synthesize
from bilevel_genrec.evaluation import evaluate
from bilevel_genrec.recommender import GenerativeRecommender, Vocabulary
from bilevel_genrec.tokenizer import RQTokenizer
from bilevel_genrec.trainer import BilevelTrainer

cfg = config_mod.load(Path(__file__).resolve().parents[1] / "configs" / "synthetic.json")
corpus = synthesize(cfg.synth)
data = prepare(corpus.interactions, corpus.embeddings, cfg.data.max_history, cfg.data.core)
print(f"{len(data.catalog)} items, {len(data.train)} training pairs, {len(data.test.targets)} test users")

pretrained = cli.fresh_tokenizer(cfg, data.embeddings)
p = cfg.pretrain
pretrained.pretrain(data.embeddings, p.epochs, lr=p.lr, batch_size=p.batch_size, weight_decay=p.weight_decay,
                    seed=cfg.seed)

# %%
# Each strategy starts from the same pretrained tokenizer and a fresh recommender.
for strategy in ("fixed", "bloger"):
    tok = RQTokenizer(pretrained.config, pretrained.params.copy())
    rec = GenerativeRecommender(cfg.recommender_config(), Vocabulary(tok.config.levels, tok.config.codebook_size),
                                seed=cfg.seed)
    train_cfg = dataclasses.replace(cfg.train, strategy=strategy, max_epochs=20,
                                    tokenizer_lr=None if strategy == "fixed" else cfg.train.tokenizer_lr)
    result = BilevelTrainer(tok, rec, data, train_cfg).train()
    report, _ = evaluate(rec, tok, data.embeddings, data.catalog, data.test.histories, data.test.targets,
                         data.test.users, beam=cfg.train.beam)
    rates = [h["conflict_rate"] for h in result.history if h["conflict_rate"] is not None]
    rate = f"{sum(rates) / len(rates):.2f}" if rates else "-"
    print(f"{strategy:7s} recall@5 {report['recall@5']:.3f}  ndcg@5 {report['ndcg@5']:.3f}  "
          f"epochs {len(result.history)}  mean conflict rate {rate}")
