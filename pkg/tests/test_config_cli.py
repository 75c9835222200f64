import json

import numpy as np
import pytest

from bilevel_genrec import cli
from bilevel_genrec import config as config_mod
from bilevel_genrec.data import load_embeddings, load_interactions
from bilevel_genrec.errors import ConfigError, TrainingDiverged
from bilevel_genrec.tokenizer import RQTokenizer

TINY = {
    "seed": 0,
    "data": {"max_history": 3},
    "synth": {"n_items": 12, "n_users": 30, "n_clusters": 6, "seq_len": 7, "noise": 0.1, "dim": 5, "seed": 0},
    "tokenizer": {"levels": 2, "codebook_size": 4, "code_dim": 3, "encoder_hidden": [4], "decoder_hidden": [4]},
    "pretrain": {"epochs": 3, "batch_size": 8},
    "recommender": {"d_model": 8, "encoder_layers": 1, "decoder_layers": 1, "heads": 2, "head_dim": 4,
                    "ffn_dim": 16, "dropout": 0.0},
    "train": {"rec_lr": 1e-2, "batch_size": 16, "max_epochs": 2, "patience": 5, "update_period": 2, "beam": 8},
}


@pytest.fixture
def workspace(tmp_path):
    raw = json.loads(json.dumps(TINY))
    raw["output_dir"] = str(tmp_path / "run")
    raw["data"]["interactions"] = str(tmp_path / "run" / "data" / "interactions.tsv")
    raw["data"]["embeddings"] = str(tmp_path / "run" / "data" / "embeddings.txt")
    path = tmp_path / "config.json"
    path.write_text(json.dumps(raw))
    return path, tmp_path / "run"


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr().out.strip().splitlines()
    return code, (json.loads(out[-1]) if out else None)


# -- config ------------------------------------------------------------------------

def test_defaults_mirror_desk_profile():
    cfg = config_mod.load()
    assert (cfg.train.rec_lr, cfg.train.effective_tokenizer_lr, cfg.train.token_weight) == (5e-4, 1e-4, 0.5)
    assert (cfg.train.beam, cfg.train.patience, cfg.train.batch_size) == (20, 20, 256)
    assert (cfg.tokenizer["levels"], cfg.tokenizer["codebook_size"], cfg.tokenizer["code_dim"]) == (4, 256, 32)
    assert cfg.tokenizer["beta"] == 0.25
    assert (cfg.recommender.d_model, cfg.recommender.encoder_layers, cfg.recommender.heads) == (64, 2, 2)


def test_paper_profile():
    cfg = config_mod.load(profile="paper")
    assert (cfg.recommender.d_model, cfg.recommender.encoder_layers, cfg.recommender.decoder_layers) == (128, 4, 4)


def test_overrides_and_lambda_alias(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"train": {"lambda": 0.2}}))
    cfg = config_mod.load(path, [("train.lambda", "0.7"), ("train.strategy", "joint"), ("seed", "3")])
    assert cfg.train.token_weight == 0.7 and cfg.train.strategy == "joint" and cfg.seed == 3
    assert config_mod.load(path).train.token_weight == 0.2


def test_parse_value():
    assert config_mod.parse_value("1e-3") == 1e-3
    assert config_mod.parse_value("null") is None
    assert config_mod.parse_value("[1, 2]") == [1, 2]
    assert config_mod.parse_value("bloger") == "bloger"


@pytest.mark.parametrize("raw", [
    {"bogus": 1},
    {"train": {"bogus": 1}},
    {"train": {"rec_lr": -1}},
    {"train": {"strategy": "fixed", "tokenizer_lr": 1e-4}},
    {"tokenizer": {"levels": 0}},
    {"synth": {"n_items": 3, "n_clusters": 5}},
    {"eval": {"split": "train"}},
    {"seed": -1},
])
def test_invalid_configs(raw):
    with pytest.raises(ConfigError):
        config_mod.build(raw)


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        config_mod.load(tmp_path / "nope.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    with pytest.raises(ConfigError, match="invalid JSON"):
        config_mod.load(bad)


def test_input_dim_resolution():
    cfg = config_mod.build({"tokenizer": {"input_dim": None}})
    assert cfg.tokenizer_config(7).input_dim == 7
    with pytest.raises(ConfigError):
        config_mod.build({"tokenizer": {"input_dim": 5}}).tokenizer_config(7)


# -- commands ----------------------------------------------------------------------

def test_synth_deterministic_and_loadable(workspace, capsys):
    cfg, out = workspace
    assert run(capsys, "synth", "--config", cfg)[0] == 0
    first = [(out / "data" / f).read_bytes() for f in ("interactions.tsv", "embeddings.txt")]
    assert run(capsys, "synth", "--config", cfg)[0] == 0
    assert first == [(out / "data" / f).read_bytes() for f in ("interactions.tsv", "embeddings.txt")]
    users = load_interactions(out / "data" / "interactions.tsv")
    table = load_embeddings(out / "data" / "embeddings.txt")
    assert len(users) == 30 and table.dim == 5


def test_validation_errors_exit_1(workspace, capsys):
    cfg, _ = workspace
    assert run(capsys, "synth", "--config", cfg, "--synth.n_items", "3")[0] == 1
    assert run(capsys, "synth", "--config", cfg, "--nonsense", "1")[0] == 1
    assert run(capsys, "train", "--config", cfg, "--strategy", "fixed", "--train.tokenizer_lr", "1e-3")[0] == 1


def test_error_message_names_the_key(workspace, capsys):
    cfg, _ = workspace
    assert cli.main(["synth", "--config", str(cfg), "--train.bogus", "1"]) == 1
    assert "train.bogus" in capsys.readouterr().err


def test_pretrain_zero_epochs_is_kmeans_state(workspace, capsys):
    cfg, out = workspace
    run(capsys, "synth", "--config", cfg)
    code, rec = run(capsys, "pretrain", "--config", cfg, "--pretrain.epochs", "0")
    assert code == 0 and rec["final_loss"] is None
    conf = config_mod.load(cfg)
    fresh = cli.fresh_tokenizer(conf, cli.load_table(conf).vectors)
    assert RQTokenizer.load(out / "tokenizer.npz").params.equals(fresh.params)


def test_pretrain_reproducible_and_resumable(workspace, capsys):
    cfg, out = workspace
    run(capsys, "synth", "--config", cfg)
    _, a = run(capsys, "pretrain", "--config", cfg)
    _, b = run(capsys, "pretrain", "--config", cfg)
    assert a["final_loss"] == b["final_loss"] is not None
    curve = [json.loads(x) for x in (out / "pretrain_loss.jsonl").read_text().splitlines()]
    assert [c["epoch"] for c in curve] == [0, 1, 2] and curve[-1]["loss"] == a["final_loss"]
    saved = RQTokenizer.load(out / "tokenizer.npz")
    resume_from = out.parent / "start.npz"
    saved.save(resume_from)
    run(capsys, "pretrain", "--config", cfg, "--resume", resume_from, "--pretrain.epochs", "0")
    assert RQTokenizer.load(out / "tokenizer.npz").params.equals(saved.params)
    _, c = run(capsys, "pretrain", "--config", cfg, "--resume", resume_from, "--pretrain.epochs", "1")
    direct = RQTokenizer.load(resume_from)
    conf = config_mod.load(cfg)
    hist = direct.pretrain(cli.load_table(conf).vectors, 1, lr=conf.pretrain.lr, batch_size=8,
                           weight_decay=conf.pretrain.weight_decay, seed=0)
    assert c["final_loss"] == hist[-1]
    assert RQTokenizer.load(out / "tokenizer.npz").params.equals(direct.params)


def test_train_requires_tokenizer_except_fixed(workspace, capsys):
    cfg, out = workspace
    run(capsys, "synth", "--config", cfg)
    assert run(capsys, "train", "--config", cfg, "--strategy", "bloger")[0] == 1
    code, rec = run(capsys, "train", "--config", cfg, "--strategy", "fixed")
    assert code == 0 and rec["strategy"] == "fixed"
    lines = [json.loads(x) for x in (out / "train-fixed" / "metrics.jsonl").read_text().splitlines()]
    assert all(r["conflict_rate"] is None for r in lines)


def test_train_and_eval_round_trip(workspace, capsys):
    cfg, out = workspace
    run(capsys, "synth", "--config", cfg)
    run(capsys, "pretrain", "--config", cfg)
    code, rec = run(capsys, "train", "--config", cfg, "--strategy", "bloger")
    assert code == 0
    run_dir = out / "train-bloger"
    lines = [json.loads(x) for x in (run_dir / "metrics.jsonl").read_text().splitlines()]
    assert len(lines) == 2 and all(0.0 <= r["conflict_rate"] <= 1.0 for r in lines)
    trace = [json.loads(x) for x in (run_dir / "trace.jsonl").read_text().splitlines()]
    assert any("tentative_update" in r["events"] for r in trace)
    assert json.loads((run_dir / "config.json").read_text())["train"]["strategy"] == "bloger"

    code, first = run(capsys, "eval", "--config", cfg, "--checkpoint", run_dir / "best")
    assert code == 0
    text = (run_dir / "best" / "eval_test.json").read_text()
    _, second = run(capsys, "eval", "--config", cfg, "--checkpoint", run_dir / "best")
    assert first == second and text == (run_dir / "best" / "eval_test.json").read_text()
    assert len(first["density"]) == 2 and len(first["entropy"]) == 2
    assert {"recall@5", "ndcg@5", "recall@10", "ndcg@10"} <= set(first)

    assert run(capsys, "eval", "--config", cfg, "--checkpoint", run_dir / "best", "--data.max_history", "4")[0] == 1
    assert run(capsys, "eval", "--config", cfg, "--checkpoint", out / "missing")[0] == 1


def test_bench_reports_ratios(workspace, capsys):
    cfg, _ = workspace
    run(capsys, "synth", "--config", cfg)
    code, a = run(capsys, "bench", "--config", cfg, "--epochs", "2", "--repeats", "2")
    _, b = run(capsys, "bench", "--config", cfg, "--epochs", "2", "--repeats", "2")
    assert code == 0
    assert a["train_ratio"] > 0 and a["eval_ratio"] > 0
    assert (a["fixed"]["steps"], a["bloger"]["steps"]) == (b["fixed"]["steps"], b["bloger"]["steps"])


def test_divergence_exit_2(workspace, capsys, monkeypatch):
    cfg, _ = workspace
    run(capsys, "synth", "--config", cfg)

    def boom(self):
        raise TrainingDiverged("loss became nan")

    monkeypatch.setattr(cli.BilevelTrainer, "train", boom)
    assert run(capsys, "train", "--config", cfg, "--strategy", "fixed")[0] == 2


def test_split_overrides():
    assert cli.split_overrides(["--a.b", "1", "--c.d=x", "--seed", "2"]) == [("a.b", "1"), ("c.d", "x"), ("seed", "2")]
    with pytest.raises(ConfigError):
        cli.split_overrides(["--a.b"])
    with pytest.raises(ConfigError):
        cli.split_overrides(["stray"])


def test_module_entry_point(workspace):
    import subprocess
    import sys

    cfg, out = workspace
    proc = subprocess.run([sys.executable, "-m", "bilevel_genrec", "synth", "--config", str(cfg)],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and json.loads(proc.stdout)["command"] == "synth"
    assert np.isfinite(load_embeddings(out / "data" / "embeddings.txt").vectors).all()
