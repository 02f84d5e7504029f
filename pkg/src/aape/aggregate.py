"""Prompt aggregation: condense a set of reference-prompt embeddings into one vector.

The learned aggregator is a single post-norm cross-attention block whose
query is the set mean; it is trained to maximise the clipped cosine reward
against image embeddings. Random, mean and MLP-residual aggregators are the
baselines it is compared against.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import Node, ParamStore, Tape
from .errors import AapeError, ConfigError, DataError

DEFAULT_REWARD_SCALE = 2.5


@dataclass
class AggregationOutput:
    p_a: np.ndarray            # [d]
    scores: np.ndarray         # [heads, n] post-softmax attention of the query over the set
    updated_prompts_discarded: bool = True


def mean_prompt(prompts) -> np.ndarray:
    P = np.asarray(prompts, dtype=np.float64)
    if P.ndim != 2 or P.shape[0] == 0:
        raise DataError("mean_prompt needs a non-empty [n, d] prompt set")
    acc = np.zeros(P.shape[1])
    for row in P:  # fixed summation order
        acc = acc + row
    return acc / P.shape[0]


def aggregate_random(prompts, seed: int) -> np.ndarray:
    P = np.asarray(prompts, dtype=np.float64)
    if P.ndim != 2 or P.shape[0] == 0:
        raise DataError("aggregate_random needs a non-empty [n, d] prompt set")
    i = np.random.default_rng(seed).integers(P.shape[0])
    return P[i].copy()


def clip_s(x, p, s: float = DEFAULT_REWARD_SCALE) -> float:
    """s * max(cos(x, p), 0)."""
    if s <= 0:
        raise ConfigError(f"reward scale must be positive, got {s}")
    return s * max(dc.cosine_sim(x, p), 0.0)


def clip_s_node(x: Node, p: Node, s: float) -> Node:
    """Batched reward on the tape: s * relu(cos) along the last axis."""
    return dc.relu(dc.cosine_rows(x, p)) * s


# ---------------------------------------------------------------------------
# attention aggregator


class AttentionAggregator:
    """Cross-attention aggregator; parameters are `attn.*` (plus `query` in global mode)."""

    kind = "attention"

    def __init__(self, dim: int, heads: int = 4, seed: int = 0, query_mode: str = "mean"):
        if query_mode not in ("mean", "global"):
            raise ConfigError(f"unknown query_mode {query_mode!r}")
        if dim % heads:
            raise ConfigError(f"dim {dim} not divisible by heads {heads}")
        self.dim, self.heads, self.query_mode = dim, heads, query_mode
        self.store = ParamStore()
        rng = np.random.default_rng(seed)
        dc.init_attention_params(self.store, dim, heads, rng)
        if query_mode == "global":
            # one shared query; `init_global_query` seeds it with the mean prompt
            self.store.add("query", np.zeros(dim))

    def init_global_query(self, sets) -> None:
        if self.query_mode == "global":
            self.store.params["query"][...] = np.mean([np.mean(s, axis=0) for s in sets], axis=0)

    def forward(self, tape: Tape, sets: np.ndarray):
        """sets: [S, n, d] (equal-size sets). Returns (p_a [S, d], scores [S, heads, n])."""
        sets = np.asarray(sets, dtype=np.float64)
        if sets.ndim != 3 or sets.shape[2] != self.dim:
            raise ConfigError(f"prompt sets of shape {sets.shape} do not match dim {self.dim}")
        if sets.shape[1] == 0:
            raise DataError("cannot aggregate an empty prompt set")
        means = sets.mean(axis=1)
        if self.query_mode == "global":
            query = tape.constant(np.zeros_like(means)) + tape.param(self.store, "query")
        else:
            query = tape.constant(means)
        return dc.attention_block(query, tape.constant(sets), tape.params(self.store, "attn."), self.heads)

    def aggregate_many(self, sets: list[np.ndarray]) -> tuple[np.ndarray, list[np.ndarray]]:
        """Forward-only aggregation of ragged sets, grouped by size."""
        out = np.zeros((len(sets), self.dim))
        scores: list[np.ndarray] = [None] * len(sets)
        for n, idx in _group_by_size(sets).items():
            p_a, sc = self.forward(Tape(), np.stack([sets[i] for i in idx]))
            out[idx] = p_a.value
            for j, i in enumerate(idx):
                scores[i] = sc.value[j]
        return out, scores

    def aggregate(self, prompts) -> AggregationOutput:
        P = np.asarray(prompts, dtype=np.float64)
        p_a, sc = self.aggregate_many([P])
        return AggregationOutput(p_a[0], sc[0])


def _group_by_size(sets) -> dict[int, list[int]]:
    groups: dict[int, list[int]] = {}
    for i, s in enumerate(sets):
        if len(s) == 0:
            raise DataError(f"prompt set {i} is empty")
        groups.setdefault(len(s), []).append(i)
    return groups


def aggregate_attention(prompts, aggregator: AttentionAggregator) -> AggregationOutput:
    return aggregator.aggregate(prompts)


# ---------------------------------------------------------------------------
# MLP-residual aggregator


class MlpAggregator:
    """p_a = alpha * f(mean) + (1 - alpha) * mean with f a d -> d/4 -> d ReLU MLP."""

    kind = "mlp"

    def __init__(self, dim: int, seed: int = 0):
        self.dim = dim
        hidden = max(1, dim // 4)
        rng = np.random.default_rng(seed)
        self.store = ParamStore()
        self.store.add("mlp.w1", rng.normal(0.0, 1.0 / math.sqrt(dim), (dim, hidden)))
        self.store.add("mlp.b1", np.zeros(hidden))
        self.store.add("mlp.w2", rng.normal(0.0, 1.0 / math.sqrt(hidden), (hidden, dim)))
        self.store.add("mlp.b2", np.zeros(dim))
        self.store.add("mlp.alpha", np.zeros(1))

    def forward(self, tape: Tape, sets: np.ndarray):
        sets = np.asarray(sets, dtype=np.float64)
        if sets.ndim != 3 or sets.shape[1] == 0:
            raise DataError("MLP aggregation needs non-empty prompt sets")
        p = tape.params(self.store, "mlp.")
        mean = tape.constant(sets.mean(axis=1))
        f = dc.linear(dc.relu(dc.linear(mean, p["w1"], p["b1"])), p["w2"], p["b2"])
        alpha = p["alpha"]
        return alpha * f + (1.0 - alpha) * mean, None

    def aggregate_many(self, sets):
        out = np.zeros((len(sets), self.dim))
        for n, idx in _group_by_size(sets).items():
            p_a, _ = self.forward(Tape(), np.stack([sets[i] for i in idx]))
            out[idx] = p_a.value
        return out, None


def aggregate_mlp(prompts, aggregator: MlpAggregator) -> np.ndarray:
    out, _ = aggregator.aggregate_many([np.asarray(prompts, dtype=np.float64)])
    return out[0]


# ---------------------------------------------------------------------------
# score export


def head_averaged_scores(scores: np.ndarray) -> np.ndarray:
    """Average the per-head distributions and renormalise over the set."""
    avg = np.asarray(scores, dtype=np.float64).mean(axis=0)
    return avg / avg.sum()


def attention_score_records(ds, aggregator: AttentionAggregator) -> list[dict]:
    """One record per (class, prompt) with the head-averaged renormalised score."""
    sets = [ds.prompt_set(c) for c in range(ds.num_classes)]
    _, scores = aggregator.aggregate_many(sets)
    records = []
    for c, cls in enumerate(ds.manifest.classes):
        s = head_averaged_scores(scores[c])
        for j, pid in enumerate(cls.prompt_ids):
            rec = {"owner": cls.name, "prompt_id": int(pid), "score": float(s[j])}
            if cls.noise_mask is not None:
                rec["noise_tag"] = cls.noise_mask[j]
            records.append(rec)
    return records


def export_attention_scores(ds, aggregator: AttentionAggregator, path, meta: dict | None = None) -> Path:
    """Write JSON lines `{owner, prompt_id, score, noise_tag?}`; optional first line of metadata."""
    path = Path(path)
    lines = []
    if meta is not None:
        lines.append(json.dumps({"meta": meta}, sort_keys=True))
    lines.extend(json.dumps(r, sort_keys=True) for r in attention_score_records(ds, aggregator))
    try:
        path.write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise AapeError(f"cannot write attention scores to {path}: {exc}") from exc
    return path


def tag_mean_scores(records: list[dict]) -> dict[str, float]:
    out = {}
    for tag in ("relevant", "redundant", "irrelevant"):
        vals = [r["score"] for r in records if r.get("noise_tag") == tag]
        if vals:
            out[tag] = float(np.mean(vals))
    return out
