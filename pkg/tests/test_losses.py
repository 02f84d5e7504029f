import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from aape import diffcore as dc, losses
from aape.diffcore import ParamStore, Tape
from aape.errors import ConfigError, DataError


def test_distill_examples(rng):
    v = rng.normal(size=5)
    assert losses.distill_loss(v, v) == 0.0
    assert losses.distill_loss([1.0, 0.0], [0.0, 1.0]) == 2.0
    a, b = rng.normal(size=(2, 7))
    assert losses.distill_loss(a, b) == pytest.approx(sum((a[i] - b[i]) ** 2 for i in range(7)), abs=1e-12)
    with pytest.raises(ConfigError):
        losses.distill_loss(a, b[:3])


@given(st.integers(0, 2**31))
def test_distill_nonnegative(seed):
    a, b = np.random.default_rng(seed).normal(size=(2, 4))
    assert losses.distill_loss(a, b) > 0
    assert losses.distill_loss(a, a) == 0


def test_task_ce_examples(rng):
    assert losses.task_ce_loss([0.0, 1.0], 1) == 0.0
    assert losses.task_ce_loss(np.full(4, 0.25), 2) == pytest.approx(math.log(4), abs=1e-15)
    p = rng.dirichlet(np.ones(5))
    assert losses.task_ce_loss(p, 3) == pytest.approx(-math.log(p[3]), abs=1e-12)
    assert losses.task_ce_loss([1.0, 0.0], 1) == pytest.approx(-math.log(losses.PROB_FLOOR))
    with pytest.raises(DataError):
        losses.task_ce_loss([0.5, 0.5], 2)


def test_contrastive_examples(rng):
    a = np.eye(2)
    expected = -math.log(math.e / (math.e + 1))
    assert losses.contrastive_clip_loss(a, a, 1.0) == pytest.approx(expected, abs=1e-12)
    same = np.tile(rng.normal(size=5), (3, 1))
    assert losses.contrastive_clip_loss(same, same, 0.1) == pytest.approx(math.log(3), abs=1e-12)
    with pytest.raises(ConfigError):
        losses.contrastive_clip_loss(a[:1], a[:1], 1.0)


def _infonce_oracle(a, c, tau):
    B = a.shape[0]
    L = np.array([[dc.cosine_sim(a[i], c[j]) / tau for j in range(B)] for i in range(B)])
    row = [-(L[i, i] - math.log(sum(math.exp(v) for v in L[i]))) for i in range(B)]
    col = [-(L[j, j] - math.log(sum(math.exp(L[i, j]) for i in range(B)))) for j in range(B)]
    return (sum(row) / B + sum(col) / B) / 2


def test_contrastive_matches_oracle(rng):
    a, c = rng.normal(size=(2, 4, 6))
    assert losses.contrastive_clip_loss(a, c, 0.5) == pytest.approx(_infonce_oracle(a, c, 0.5), abs=1e-10)


@given(st.integers(0, 2**31))
def test_contrastive_joint_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    a, c = rng.normal(size=(2, 5, 4))
    perm = rng.permutation(5)
    assert losses.contrastive_clip_loss(a[perm], c[perm], 0.2) == pytest.approx(
        losses.contrastive_clip_loss(a, c, 0.2), abs=1e-12)


def test_total_loss_examples():
    assert losses.total_loss(0.7, 1.3, 0).total == 1.3
    assert losses.total_loss(0.2, 1.0, 5).total == pytest.approx(2.0, abs=1e-12)
    with pytest.raises(ConfigError):
        losses.total_loss(0.1, 0.1, -1)
    assert losses.LAMBDA_GRID == (1, 3, 4, 5, 6, 7, 9)
    assert 3 in losses.LAMBDA_GRID and 9 in losses.LAMBDA_GRID


@given(st.floats(0, 10), st.floats(0, 10), st.floats(0, 10), st.floats(0, 10))
def test_total_loss_linear(d, t, lam, k):
    out = losses.total_loss(d, t, lam)
    assert abs(out.total - (lam * d + t)) <= 1e-12 * max(1.0, abs(out.total))
    scaled = losses.total_loss(k * d, t, lam)
    assert scaled.total - t == pytest.approx(k * (out.total - t), abs=1e-9)


def test_tape_forms_match_plain_forms(rng):
    t = Tape()
    a, b = rng.normal(size=(2, 3, 5))
    assert float(losses.distill_node(t.constant(a), b).value) == pytest.approx(
        np.mean([losses.distill_loss(a[i], b[i]) for i in range(3)]), abs=1e-12)
    logits = rng.normal(size=(3, 4))
    labels = np.array([0, 3, 1])
    probs = dc.np_softmax(logits, axis=1)
    assert float(losses.ce_node(t.constant(logits), labels).value) == pytest.approx(
        np.mean([losses.task_ce_loss(probs[i], labels[i]) for i in range(3)]), abs=1e-12)
    assert float(losses.infonce_node(t.constant(a), b, 0.3).value) == pytest.approx(
        losses.contrastive_clip_loss(a, b, 0.3), abs=1e-12)


def test_loss_node_gradients(rng):
    s = ParamStore()
    s.add("a", rng.normal(size=(4, 5)))
    target, caps = rng.normal(size=(2, 4, 5))
    labels = np.array([0, 2, 4, 1])
    fn = lambda t: (losses.distill_node(t.param(s, "a"), target) * 5.0
                    + losses.ce_node(t.param(s, "a"), labels)
                    + losses.infonce_node(t.param(s, "a"), caps, 0.5))
    assert dc.finite_diff_check(fn, s, eps=1e-6) <= 1e-6
