import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bilevel_genrec import autodiff as ad
from bilevel_genrec.autodiff import Tensor
from bilevel_genrec.data import Samples, SynthConfig, prepare, synthesize
from bilevel_genrec.errors import ConfigError, TrainingDiverged
from bilevel_genrec.recommender import GenerativeRecommender, RecommenderConfig, Vocabulary
from bilevel_genrec.tokenizer import RQTokenizer, TokenizerConfig
from bilevel_genrec.trainer import (
    BilevelTrainer, TrainConfig, batch_items, conflict_rate, conflicting_groups, direct_gradients,
    gradient_surgery, meta_test_gradients, param_digest, project_conflict, rec_loss, tentative_update, token_loss,
)


def small_data(seed=0):
    corpus = synthesize(SynthConfig(n_items=12, n_users=30, n_clusters=6, seq_len=7, dim=5, noise=0.1, seed=seed))
    return prepare(corpus.interactions, corpus.embeddings, max_history=3)


def small_models(data, seed=0):
    tok = RQTokenizer(TokenizerConfig(levels=2, codebook_size=4, input_dim=5, code_dim=3, encoder_hidden=(4,),
                                      decoder_hidden=(4,)), seed=seed)
    tok.kmeans_init(data.embeddings, seed=seed)
    rec = GenerativeRecommender(RecommenderConfig(d_model=8, encoder_layers=1, decoder_layers=1, heads=2, head_dim=4,
                                                  ffn_dim=16, dropout=0.0, max_items=data.max_history),
                                Vocabulary(2, 4), seed=seed)
    return tok, rec


def small_trainer(strategy="bloger", data=None, seed=0, trace_digests=False, out_dir=None, **overrides):
    data = data or small_data()
    tok, rec = small_models(data, seed)
    defaults = dict(strategy=strategy, rec_lr=1e-2, batch_size=16, max_epochs=2, update_period=2, eval_every=1,
                    seed=seed, tokenizer_lr=None if strategy == "fixed" else 1e-2)
    defaults.update(overrides)
    return BilevelTrainer(tok, rec, data, TrainConfig(**defaults), out_dir=out_dir, trace_digests=trace_digests)


# -- gradient surgery ------------------------------------------------------------------

def test_surgery_worked_example():
    g, fired = project_conflict(np.array([1.0, -2.0]), np.array([1.0, 1.0]))
    assert fired and g.tolist() == [1.5, -1.5]
    assert np.vdot(g, [1.0, 1.0]) == 0.0


def test_surgery_no_conflict_is_identity():
    a, b = np.array([1.0, 2.0, -0.5]), np.array([0.5, 0.0, 1.0])
    g, fired = project_conflict(a, b)
    assert not fired and g is a


def test_surgery_anti_parallel_is_zero():
    t = np.random.default_rng(0).normal(size=7)
    g, fired = project_conflict(-t, t)
    assert fired and np.array_equal(g, np.zeros(7))


def test_surgery_zero_token_group_left_alone():
    a = np.array([1.0, -1.0])
    g, fired = project_conflict(a, np.zeros(2))
    assert not fired and g is a


def test_surgery_per_tensor():
    rec = {"a": np.array([1.0, -2.0]), "b": np.array([1.0, 1.0])}
    tok = {"a": np.array([1.0, 1.0]), "b": np.array([-1.0, 3.0])}
    out, fired = gradient_surgery(rec, tok)
    assert fired == ["a"]
    assert out["a"].tolist() == [1.5, -1.5] and out["b"] is rec["b"]
    with pytest.raises(ValueError):
        gradient_surgery(rec, {"a": tok["a"]})


vectors = arrays(np.float64, st.integers(1, 40), elements=st.floats(-1e3, 1e3, allow_nan=False))


@given(vectors, st.data())
def test_surgery_properties(a, data):
    b = data.draw(arrays(np.float64, a.shape, elements=st.floats(-1e3, 1e3, allow_nan=False)))
    g, fired = project_conflict(a, b)
    if fired:
        scale = np.linalg.norm(a) * np.linalg.norm(b)
        assert abs(np.vdot(g, b)) <= 1e-12 * max(scale, 1.0)
    else:
        assert g is a and (np.vdot(a, b) >= 0 or np.vdot(b, b) == 0)


def test_conflict_rate_recount():
    rng = np.random.default_rng(1)
    rec = {f"t{i}": rng.normal(size=5) for i in range(50)}
    tok = {f"t{i}": rng.normal(size=5) for i in range(50)}
    brute = sum(1 for n in rec if sum(x * y for x, y in zip(rec[n], tok[n])) < 0)
    assert len(conflicting_groups(rec, tok)) == brute
    assert conflict_rate(rec, tok) == brute / 50


# -- config ------------------------------------------------------------------------

@pytest.mark.parametrize("kwargs", [
    dict(strategy="fixed", tokenizer_lr=1e-4),
    dict(strategy="nope"),
    dict(rec_lr=0.0),
    dict(token_weight=-1.0),
    dict(update_period=0),
    dict(patience=0),
    dict(tokenizer_lr=0.0),
])
def test_config_errors(kwargs):
    with pytest.raises(ConfigError):
        TrainConfig(**kwargs).validate()


def test_config_defaults_and_period():
    cfg = TrainConfig().validate()
    assert (cfg.rec_lr, cfg.effective_tokenizer_lr, cfg.token_weight, cfg.batch_size, cfg.patience, cfg.beam) == \
        (5e-4, 1e-4, 0.5, 256, 20, 20)
    assert TrainConfig(strategy="fixed").effective_tokenizer_lr is None
    assert TrainConfig(updates_per_epoch=3).period(10) == 3
    assert TrainConfig(updates_per_epoch=30).period(10) == 1
    assert TrainConfig(update_period=7, updates_per_epoch=3).period(10) == 7


# -- meta steps --------------------------------------------------------------------------

def _support_query(data):
    return data.train.subset(np.arange(0, 8)), data.train.subset(np.arange(8, 16))


def test_tentative_update_zero_lr_and_no_mutation():
    data = small_data()
    tok, rec = small_models(data)
    before = rec.params.copy()
    support, _ = _support_query(data)
    theta0 = tentative_update(rec, tok, data.embeddings, support, 0.0)
    assert all(np.array_equal(theta0[n].data, before[n].data) for n in before)
    lr = 0.1
    theta1 = tentative_update(rec, tok, data.embeddings, support, lr)
    g = ad.gradient(rec_loss(rec, tok, data.embeddings, support), rec.params)
    for n in before:
        # the recorded gradient is built with create_graph, so it may differ in the last bit
        np.testing.assert_allclose(theta1[n].data, before[n].data - g[n].data * lr, rtol=1e-12, atol=1e-16)
    assert rec.params.equals(before)


def test_meta_gradients_zero_lr_collapse_and_token_gradient():
    data = small_data()
    tok, rec = small_models(data)
    support, query = _support_query(data)
    pair = meta_test_gradients(rec, tok, data.embeddings, support, query, 0.0)
    _, _, direct = direct_gradients(rec, tok, data.embeddings, query)
    for n in pair.rec:
        np.testing.assert_allclose(pair.rec[n], direct.rec[n], rtol=1e-12, atol=1e-15)
    g_tok = ad.gradient(tok.tokenization_loss(Tensor(data.embeddings[batch_items(query)])), tok.params)
    for n in pair.token:
        assert np.array_equal(pair.token[n], g_tok[n].data)


def test_meta_gradients_unroll_equals_hvp():
    data = small_data()
    tok, rec = small_models(data)
    support, query = _support_query(data)
    a = meta_test_gradients(rec, tok, data.embeddings, support, query, 0.05, mode="unroll")
    b = meta_test_gradients(rec, tok, data.embeddings, support, query, 0.05, mode="hvp")
    for n in a.rec:
        np.testing.assert_allclose(a.rec[n], b.rec[n], rtol=1e-9, atol=1e-13)


def test_meta_gradient_depends_on_the_unroll():
    data = small_data()
    tok, rec = small_models(data)
    support, query = _support_query(data)
    a = meta_test_gradients(rec, tok, data.embeddings, support, query, 0.0)
    b = meta_test_gradients(rec, tok, data.embeddings, support, query, 0.5)
    assert any(not np.allclose(a.rec[n], b.rec[n]) for n in a.rec)


def test_meta_step_leaves_theta_alone():
    tr = small_trainer("bloger")
    batch = tr.data.train.subset(np.arange(16))
    theta, phi = tr.recommender.params.copy(), tr.tokenizer.params.copy()
    record = {"events": []}
    tr.meta_step(batch, record)
    assert tr.recommender.params.equals(theta)
    assert not tr.tokenizer.params.equals(phi)
    assert record["events"][:2] == ["tentative_update", "meta_gradients"]


# -- single updates --------------------------------------------------------------------

def test_recommender_step_plain_gradient():
    tr = small_trainer("fixed", optimizer="sgd", rec_lr=0.05)
    batch = tr.data.train.subset(np.arange(16))
    before = tr.recommender.params.copy()
    phi = tr.tokenizer.params.copy()
    g = ad.gradient(rec_loss(tr.recommender, tr.tokenizer, tr.embeddings, batch), tr.recommender.params)
    tr.recommender_step(batch)
    for n in before:
        np.testing.assert_array_equal(tr.recommender.params[n].data, before[n].data - 0.05 * g[n].data)
    assert tr.tokenizer.params.equals(phi)


def test_recommender_loss_decreases_on_two_items():
    tr = small_trainer("fixed", rec_lr=1e-2)
    two = tr.data.train.subset(np.arange(2))
    losses = [tr.recommender_step(two) for _ in range(50)]
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_tokenizer_step_plain_gradient():
    tr = small_trainer("bloger", optimizer="sgd", tokenizer_lr=0.1, token_weight=0.5)
    phi = tr.tokenizer.params.copy()
    rng = np.random.default_rng(0)
    g_tok = {n: rng.normal(size=phi[n].shape) for n in phi}
    zero = {n: np.zeros(phi[n].shape) for n in phi}
    tr.tokenizer_step(zero, g_tok)
    for n in phi:
        np.testing.assert_array_equal(tr.tokenizer.params[n].data, phi[n].data - 0.1 * (0.5 * g_tok[n]))


def test_tokenizer_step_lambda_zero_uses_rec_only():
    a = small_trainer("bloger", optimizer="sgd", tokenizer_lr=0.1, token_weight=0.0)
    phi = a.tokenizer.params.copy()
    rng = np.random.default_rng(0)
    g_rec = {n: rng.normal(size=phi[n].shape) for n in phi}
    g_tok = {n: rng.normal(size=phi[n].shape) for n in phi}
    a.tokenizer_step(g_rec, g_tok)
    for n in phi:
        np.testing.assert_array_equal(a.tokenizer.params[n].data, phi[n].data - 0.1 * g_rec[n])


def test_divergence_is_reported():
    tr = small_trainer("fixed")
    tr.recommender.params.assign("decoder.norm.bias", np.full(8, np.nan))
    with pytest.raises(TrainingDiverged):
        tr.recommender_step(tr.data.train.subset(np.arange(4)))


# -- strategies ------------------------------------------------------------------------

def _run_steps(tr, n):
    period = tr.config.period(tr.steps_per_epoch())
    for i in range(n):
        tr.train_step(tr.data.train.subset(np.arange(16 * (i % 3), 16 * (i % 3) + 16)), period)
    return tr.trace


def test_seeded_steps_are_bitwise_reproducible():
    a = _run_steps(small_trainer("bloger", trace_digests=True), 4)
    b = _run_steps(small_trainer("bloger", trace_digests=True), 4)
    assert a == b


def test_fixed_keeps_phi_bitwise():
    tr = small_trainer("fixed", trace_digests=True)
    phi = param_digest(tr.tokenizer.params)
    tr.train()
    assert {r["phi"] for r in tr.trace} == {phi}
    assert param_digest(tr.tokenizer.params) == phi


def test_joint_never_tentative_and_updates_phi_every_step():
    tr = small_trainer("joint", trace_digests=True)
    trace = _run_steps(tr, 4)
    assert all("tentative_update" not in r["events"] and "joint_step" in r["events"] for r in trace)
    assert len({r["phi"] for r in trace}) == 4


def test_bloger_meta_steps_every_period():
    trace = _run_steps(small_trainer("bloger", update_period=2), 6)
    assert [("tentative_update" in r["events"]) for r in trace] == [False, True] * 3
    assert all("surgery" in r["events"] for r in trace if "tentative_update" in r["events"])


def first_divergence(a, b):
    """Index of the first step whose parameter digests differ, or None."""
    for i, (ra, rb) in enumerate(zip(a, b)):
        if (ra["theta"], ra["phi"]) != (rb["theta"], rb["phi"]):
            return i
    return None


def test_no_gs_matches_bloger_until_a_conflict_fires():
    a = _run_steps(small_trainer("bloger", trace_digests=True), 6)
    b = _run_steps(small_trainer("bloger-no-gs", trace_digests=True), 6)
    assert all("projected" not in r and "surgery" not in r["events"] for r in b)
    i = first_divergence(a, b)
    assert i is None or a[i]["projected"]
    assert all(not r.get("projected") for r in a[:i])


def test_train_writes_metrics_and_checkpoints(tmp_path):
    tr = small_trainer("bloger", out_dir=tmp_path, max_epochs=2)
    result = tr.train()
    lines = [json.loads(x) for x in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in lines] == [0, 1]
    for r in lines:
        assert {"epoch", "train_loss_rec", "train_loss_token", "val_loss_rec", "conflict_rate", "recall@5",
                "recall@10", "ndcg@5", "ndcg@10", "wall_time_s"} <= set(r)
        assert 0.0 <= r["conflict_rate"] <= 1.0
    assert (tmp_path / "best" / "tokenizer.npz").exists() and (tmp_path / "best" / "recommender.npz").exists()
    assert result.best_val_loss == min(r["val_loss_rec"] for r in lines)


def test_conflict_rate_log_equals_trace_recount(tmp_path):
    tr = small_trainer("bloger", out_dir=tmp_path, max_epochs=1, update_period=1)
    tr.train()
    (record,) = [json.loads(x) for x in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    groups = len(tr.tokenizer.params)
    meta = [r for r in tr.trace if "conflicts" in r]
    assert record["conflict_rate"] == sum(len(r["conflicts"]) for r in meta) / (groups * len(meta))


def test_fixed_logs_no_conflict_rate(tmp_path):
    small_trainer("fixed", out_dir=tmp_path, max_epochs=1).train()
    (record,) = [json.loads(x) for x in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    assert record["conflict_rate"] is None


def test_early_stopping_restores_best():
    tr = small_trainer("fixed", max_epochs=30, patience=1, rec_lr=0.3)
    result = tr.train()
    assert result.stopped_early
    assert len(result.history) == result.best_epoch + 2
    assert tr.validation_loss() == pytest.approx(result.best_val_loss, rel=1e-12)


def test_token_loss_is_the_tokenizer_loss():
    data = small_data()
    tok, _ = small_models(data)
    items = np.array([3, 1, 3])
    assert token_loss(tok, data.embeddings, items).item() == \
        tok.tokenization_loss(Tensor(data.embeddings[[1, 3]])).item()


def test_samples_type():
    data = small_data()
    assert isinstance(data.train, Samples) and data.train.histories.shape[1] == 3
