"""Prompt generator h, projection g and the classification / retrieval heads.

h(x) = W2 relu(W1 x + b1) + b2 produces the adapted prompt embedding (AAPE).
g([w_i; h(x)]) = relu(G [w_i; h(x)] + c) fuses it with a class template into
a per-image classifier weight. Weights are stored as [in, out] so that
row-vector batches multiply on the left.
"""
from __future__ import annotations

import math

import numpy as np

from . import diffcore as dc
from .diffcore import Node, ParamStore, Tape
from .errors import ConfigError, DataError


def init_adapter(dim: int, hidden: int | None = None, seed: int = 0, g_init: str = "template",
                 g_bias: float = 0.0) -> ParamStore:
    """Adapter parameters `h.*` and `g.*`.

    g_init="template" starts g as [I | 0] plus a constant bias so the fused
    weight initially passes the template through; "random" uses a scaled
    Gaussian like h.
    """
    hidden = dim if hidden is None else hidden
    rng = np.random.default_rng(seed)
    store = ParamStore()
    store.add("h.w1", rng.normal(0.0, math.sqrt(2.0 / dim), (dim, hidden)))
    store.add("h.b1", np.zeros(hidden))
    store.add("h.w2", rng.normal(0.0, 1.0 / math.sqrt(hidden), (hidden, dim)))
    store.add("h.b2", np.zeros(dim))
    if g_init == "template":
        w = np.zeros((2 * dim, dim))
        w[:dim] = np.eye(dim)
        w[dim:] = rng.normal(0.0, 1e-3, (dim, dim))
    elif g_init == "random":
        w = rng.normal(0.0, 1.0 / math.sqrt(2 * dim), (2 * dim, dim))
    else:
        raise ConfigError(f"unknown g_init {g_init!r}")
    store.add("g.w", w)
    store.add("g.b", np.full(dim, g_bias))
    return store


def _check_dim(store: ParamStore, v: np.ndarray, what: str) -> None:
    d = store["h.w1"].shape[0]
    if v.shape[-1] != d:
        raise ConfigError(f"{what} has dim {v.shape[-1]}, adapter expects {d}")


# ---------------------------------------------------------------------------
# plain-array forward functions


def generate_aape(x, store: ParamStore) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    _check_dim(store, x, "image embedding")
    hidden = np.maximum(x @ store["h.w1"] + store["h.b1"], 0.0)
    return hidden @ store["h.w2"] + store["h.b2"]


def fuse_classifier_weight(w_i, aape, store: ParamStore, linear: bool = False) -> np.ndarray:
    """g applied to the concatenation [w_i; aape]; `linear=True` drops the ReLU (diagnostic)."""
    w_i = np.asarray(w_i, dtype=np.float64)
    aape = np.asarray(aape, dtype=np.float64)
    if w_i.shape[-1] != aape.shape[-1]:
        raise ConfigError(f"template dim {w_i.shape[-1]} != AAPE dim {aape.shape[-1]}")
    _check_dim(store, w_i, "template")
    pre = np.concatenate([w_i, aape], axis=-1) @ store["g.w"] + store["g.b"]
    return pre if linear else np.maximum(pre, 0.0)


def fused_weights(templates, aape, store: ParamStore, linear: bool = False) -> np.ndarray:
    """[C, d] fused classifier weights for one image's AAPE."""
    templates = np.asarray(templates, dtype=np.float64)
    d = templates.shape[1]
    pre = templates @ store["g.w"][:d] + (np.asarray(aape) @ store["g.w"][d:] + store["g.b"])
    return pre if linear else np.maximum(pre, 0.0)


def _cosines(query: np.ndarray, mats: np.ndarray, names=None) -> np.ndarray:
    qn = np.linalg.norm(query)
    if qn == 0:
        raise DataError("query has zero norm")
    norms = np.linalg.norm(mats, axis=-1)
    bad = np.flatnonzero(norms == 0)
    if bad.size:
        label = bad[0] if names is None else names[bad[0]]
        raise DataError(f"zero-norm classifier weight for class {label}")
    return (mats @ query) / (norms * qn)


def classify(x, templates, aape, store: ParamStore, tau: float = 0.01, linear: bool = False) -> np.ndarray:
    """softmax_i cos(x, g([w_i; h(x)])) / tau."""
    if tau <= 0:
        raise ConfigError("temperature must be positive")
    templates = np.asarray(templates, dtype=np.float64)
    if templates.shape[0] < 2:
        raise ConfigError("classification needs at least 2 classes")
    w = fused_weights(templates, aape, store, linear)
    return dc.np_softmax(_cosines(np.asarray(x, dtype=np.float64), w) / tau)


def classify_hx_only(aape, templates, tau: float = 0.01) -> np.ndarray:
    """softmax_i cos(h(x), w_i) / tau: AAPE used as a proxy image query."""
    if tau <= 0:
        raise ConfigError("temperature must be positive")
    templates = np.asarray(templates, dtype=np.float64)
    return dc.np_softmax(_cosines(np.asarray(aape, dtype=np.float64), templates) / tau)


def retrieval_scores(aape, captions, ids=None) -> tuple[np.ndarray, np.ndarray]:
    """Caption ids sorted by descending cosine to the AAPE, ties by ascending id."""
    captions = np.asarray(captions, dtype=np.float64)
    if captions.ndim != 2 or captions.shape[0] == 0:
        raise DataError("retrieval needs a non-empty caption bank")
    ids = np.arange(captions.shape[0]) if ids is None else np.asarray(ids)
    s = _cosines(np.asarray(aape, dtype=np.float64), captions)
    order = np.lexsort((ids, -s))
    return ids[order], s[order]


# ---------------------------------------------------------------------------
# batched tape versions used for training and fast evaluation


def h_node(tape: Tape, x: Node, p: dict[str, Node]) -> Node:
    return dc.linear(dc.relu(dc.linear(x, p["h.w1"], p["h.b1"])), p["h.w2"], p["h.b2"])


def fused_logits(tape: Tape, x: Node, aape: Node, templates: np.ndarray, p: dict[str, Node],
                 tau: float, linear: bool = False) -> Node:
    """[B, C] logits cos(x_b, g([w_c; h(x_b)])) / tau."""
    C, d = templates.shape
    gw = p["g.w"]
    w_part = dc.matmul(tape.constant(templates), dc.take(gw, np.arange(d), axis=0))       # [C, d]
    h_part = dc.linear(aape, dc.take(gw, np.arange(d, 2 * d), axis=0), p["g.b"])        # [B, d]
    B = x.value.shape[0]
    pre = dc.reshape(h_part, (B, 1, d)) + dc.reshape(w_part, (1, C, d))
    fused = pre if linear else dc.relu(pre)
    cos = dc.cosine_rows(dc.reshape(x, (B, 1, d)), fused)
    return cos * (1.0 / tau)


def hx_only_logits(tape: Tape, aape: Node, templates: np.ndarray, tau: float) -> Node:
    B, d = aape.value.shape
    t = tape.constant(templates[None])
    return dc.cosine_rows(dc.reshape(aape, (B, 1, d)), t) * (1.0 / tau)


def batch_aape(x: np.ndarray, store: ParamStore) -> np.ndarray:
    return generate_aape(x, store)


def batch_fused_probs(x: np.ndarray, templates: np.ndarray, store: ParamStore, tau: float,
                      head: str = "fused") -> np.ndarray:
    """[B, C] class probabilities for a batch of images (no gradient)."""
    x = np.asarray(x, dtype=np.float64)
    aape = generate_aape(x, store)
    if head == "hx_only":
        a = aape / np.linalg.norm(aape, axis=1, keepdims=True)
        t = templates / np.linalg.norm(templates, axis=1, keepdims=True)
        return dc.np_softmax(a @ t.T / tau, axis=1)
    d = templates.shape[1]
    fused = np.maximum((aape @ store["g.w"][d:] + store["g.b"])[:, None, :]
                       + (templates @ store["g.w"][:d])[None], 0.0)
    norms = np.linalg.norm(fused, axis=-1)
    if np.any(norms == 0):
        b, c = np.argwhere(norms == 0)[0]
        raise DataError(f"zero-norm fused classifier weight for class {c} (image {b})")
    cos = np.einsum("bcd,bd->bc", fused, x) / (norms * np.linalg.norm(x, axis=1, keepdims=True))
    return dc.np_softmax(cos / tau, axis=1)
