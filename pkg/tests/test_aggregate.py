import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from aape import diffcore as dc
from aape.aggregate import (AttentionAggregator, MlpAggregator, aggregate_attention, aggregate_mlp,
                            aggregate_random, attention_score_records, clip_s, export_attention_scores,
                            head_averaged_scores, mean_prompt, tag_mean_scores)
from aape.diffcore import Tape
from aape.embedio import base_new_split, kshot_sample
from aape.errors import ConfigError, DataError
from aape.train import TrainConfig, train_stage1


def test_mean_prompt_examples(rng):
    v = rng.normal(size=6)
    np.testing.assert_array_equal(mean_prompt(v[None]), v)
    np.testing.assert_array_equal(mean_prompt(np.stack([v, -v])), np.zeros(6))
    P = rng.normal(size=(5, 6))
    oracle = [sum(P[i, j] for i in range(5)) / 5 for j in range(6)]
    np.testing.assert_allclose(mean_prompt(P), oracle, rtol=0, atol=1e-12)
    with pytest.raises(DataError):
        mean_prompt(np.zeros((0, 6)))


def test_aggregate_random_examples(rng):
    v = rng.normal(size=(1, 4))
    np.testing.assert_array_equal(aggregate_random(v, 3), v[0])
    P = rng.normal(size=(4, 4))
    np.testing.assert_array_equal(aggregate_random(P, 11), aggregate_random(P, 11))
    picks = np.array([int(np.flatnonzero((P == aggregate_random(P, s)).all(axis=1))[0]) for s in range(10_000)])
    freq = np.bincount(picks, minlength=4) / 10_000
    assert np.all(np.abs(freq - 0.25) <= 0.02)
    with pytest.raises(DataError):
        aggregate_random(np.zeros((0, 4)), 0)


def test_clip_s_examples(rng):
    x = np.array([1.0, 0.0])
    assert clip_s(x, np.array([-0.3, math.sqrt(1 - 0.09)])) == 0.0
    v = rng.normal(size=5)
    assert clip_s(v, v) == pytest.approx(2.5, abs=1e-14)
    assert clip_s(np.eye(2)[0], np.eye(2)[1]) == 0.0
    with pytest.raises(DataError):
        clip_s(np.zeros(2), x)


@given(st.integers(0, 2**31), st.floats(0.1, 10))
def test_clip_s_range(seed, s):
    a, b = np.random.default_rng(seed).normal(size=(2, 6))
    r = clip_s(a, b, s)
    assert 0.0 <= r <= s + 1e-12
    if dc.cosine_sim(a, b) <= 0:
        assert r == 0.0


def test_identical_prompts_uniform_and_size_independent(rng):
    agg = AttentionAggregator(8, heads=2, seed=0)
    v = rng.normal(size=8)
    a3 = agg.aggregate(np.tile(v, (3, 1)))
    a7 = agg.aggregate(np.tile(v, (7, 1)))
    np.testing.assert_allclose(a3.scores, np.full((2, 3), 1 / 3), atol=1e-15)
    np.testing.assert_allclose(a3.p_a, a7.p_a, atol=1e-12)
    assert a3.updated_prompts_discarded


@given(st.integers(0, 2**31), st.integers(1, 30))
def test_attention_aggregation_permutation_invariant(seed, n):
    rng = np.random.default_rng(seed)
    agg = AttentionAggregator(16, heads=4, seed=seed % 3)
    P = rng.normal(size=(n, 16))
    perm = rng.permutation(n)
    a, b = aggregate_attention(P, agg), aggregate_attention(P[perm], agg)
    np.testing.assert_allclose(b.p_a, a.p_a, rtol=0, atol=1e-12)
    np.testing.assert_allclose(b.scores, a.scores[:, perm], rtol=0, atol=1e-12)
    np.testing.assert_allclose(a.scores.sum(axis=1), 1.0, atol=1e-10)
    assert np.all(a.scores >= 0)


def test_attention_aggregator_matches_naive_oracle():
    rng = np.random.default_rng(5)
    agg = AttentionAggregator(8, heads=1, seed=2)
    P = rng.normal(size=(3, 8))
    p = {k.split(".", 1)[1]: v for k, v in agg.store.params.items()}
    q = P.mean(axis=0)
    logits = np.array([(q @ p["wq"] + p["bq"]) @ (P[j] @ p["wk"]) for j in range(3)]) / math.sqrt(8)
    w = np.exp(logits - logits.max())
    w /= w.sum()
    ctx = sum(w[j] * (P[j] @ p["wv"] + p["bv"]) for j in range(3))

    def ln(x, g, b):
        return (x - x.mean()) / math.sqrt(x.var() + dc.LN_EPS) * g + b

    h1 = ln(q + ctx @ p["wo"] + p["bo"], p["ln1_g"], p["ln1_b"])
    out = ln(h1 + np.maximum(h1 @ p["ff1"] + p["ff1_b"], 0) @ p["ff2"] + p["ff2_b"], p["ln2_g"], p["ln2_b"])
    res = aggregate_attention(P, agg)
    np.testing.assert_allclose(res.p_a, out, rtol=0, atol=1e-10)
    np.testing.assert_allclose(res.scores[0], w, rtol=0, atol=1e-12)


def test_attention_dim_mismatch():
    with pytest.raises(ConfigError):
        AttentionAggregator(8, heads=2).aggregate(np.ones((3, 6)))
    with pytest.raises(ConfigError):
        AttentionAggregator(8, heads=2, query_mode="other")


def test_score_work_is_linear_in_n(rng):
    agg = AttentionAggregator(8, heads=4)
    for n in (5, 10, 20):
        before = dc.SCORE_COUNTER.count
        agg.aggregate(rng.normal(size=(n, 8)))
        assert dc.SCORE_COUNTER.count - before == 4 * n


def test_global_query_mode(rng):
    agg = AttentionAggregator(8, heads=2, query_mode="global")
    sets = [rng.normal(size=(4, 8)) for _ in range(3)]
    agg.init_global_query(sets)
    np.testing.assert_allclose(agg.store["query"], np.mean([s.mean(axis=0) for s in sets], axis=0))
    P = sets[0]
    perm = rng.permutation(4)
    np.testing.assert_allclose(agg.aggregate(P).p_a, agg.aggregate(P[perm]).p_a, atol=1e-12)


def test_mlp_endpoints(rng):
    agg = MlpAggregator(8, seed=0)
    P = rng.normal(size=(5, 8))
    np.testing.assert_array_equal(aggregate_mlp(P, agg), mean_prompt(P))
    p = agg.store.params
    m = P.mean(axis=0)
    f = np.maximum(m @ p["mlp.w1"] + p["mlp.b1"], 0) @ p["mlp.w2"] + p["mlp.b2"]
    p["mlp.alpha"][0] = 1.0
    np.testing.assert_allclose(aggregate_mlp(P, agg), f, rtol=0, atol=1e-12)
    p["mlp.alpha"][0] = 0.5
    np.testing.assert_allclose(aggregate_mlp(P, agg), 0.5 * f + 0.5 * m, rtol=0, atol=1e-12)


def test_mlp_bottleneck_shape():
    agg = MlpAggregator(64)
    assert agg.store["mlp.w1"].shape == (64, 16)
    assert agg.store["mlp.alpha"][0] == 0.0


# ---------------------------------------------------------------------------
# score export


def test_export_scores_sum_to_one_per_owner(tmp_path, small):
    agg = AttentionAggregator(small.dim, heads=4, seed=0)
    path = export_attention_scores(small, agg, tmp_path / "s.jsonl", meta={"untrained": True})
    lines = [json.loads(l) for l in path.read_text().splitlines()]
    assert lines[0] == {"meta": {"untrained": True}}
    recs = lines[1:]
    assert set(recs[0]) == {"owner", "prompt_id", "score", "noise_tag"}
    for c in small.manifest.classes:
        total = sum(r["score"] for r in recs if r["owner"] == c.name)
        assert total == pytest.approx(1.0, abs=1e-6)
    assert len(recs) == sum(len(c.prompt_ids) for c in small.manifest.classes)


def test_head_averaged_identical_prompts():
    s = head_averaged_scores(np.full((4, 6), 1 / 6))
    np.testing.assert_allclose(s, np.full(6, 1 / 6))


def test_export_io_error(small, tmp_path):
    from aape.errors import AapeError
    with pytest.raises(AapeError, match="missing"):
        export_attention_scores(small, AttentionAggregator(small.dim), tmp_path / "missing" / "x.jsonl")


def test_tag_means():
    recs = [{"score": 0.5, "noise_tag": "relevant"}, {"score": 0.1, "noise_tag": "irrelevant"},
            {"score": 0.3, "noise_tag": "relevant"}]
    assert tag_mean_scores(recs) == {"relevant": 0.4, "irrelevant": 0.1}


# ---------------------------------------------------------------------------
# stage-1 training


def _base_view(ds, seed=0, k=16):
    return base_new_split(kshot_sample(ds, k, seed))[0]


def test_zero_epochs_leave_params_unchanged(small):
    cfg = TrainConfig(epochs_stage1=0, heads=4)
    ref = AttentionAggregator(small.dim, 4, seed=0).store
    agg, trace = train_stage1(_base_view(small, k=4), cfg)
    assert agg.store.equals(ref)
    assert len(trace) == 1


def test_stage1_reward_rises_and_settles(bench):
    agg, trace = train_stage1(_base_view(bench), TrainConfig())
    assert trace[-1] > trace[0]
    tail = trace[len(trace) // 2:]
    assert all(b >= a - 1e-3 for a, b in zip(tail, tail[1:]))


def test_stage1_deterministic(small):
    cfg = TrainConfig(epochs_stage1=3)
    a, ta = train_stage1(_base_view(small, k=4), cfg)
    b, tb = train_stage1(_base_view(small, k=4), cfg)
    assert a.store.equals(b.store) and ta == tb


def test_stage1_reward_gradient(small):
    from aape.train import _owner_sets, reward_loss
    view = _base_view(small, k=4)
    cfg = TrainConfig(heads=2)
    agg = AttentionAggregator(small.dim, 2, seed=1)
    x, y, ids = view.image_arrays("train")
    owners, sets = _owner_sets(view, cfg, y, ids)
    err = dc.finite_diff_check(lambda t: reward_loss(t, agg, x, owners, sets, cfg.s)[0], agg.store, eps=1e-5)
    assert err <= 1e-4


def test_score_records_tags(bench):
    recs = attention_score_records(bench, AttentionAggregator(bench.dim))
    assert set(tag_mean_scores(recs)) == {"relevant", "redundant", "irrelevant"}
