"""Small reverse-mode autodiff kernel over float64 numpy arrays.

Every trainable model in the package builds its forward pass on a `Tape`
and calls `Tape.backward` once per step. Parameters live in a `ParamStore`
so optimizers, checkpoints and the finite-difference checker can all work
on plain named arrays.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .errors import ConfigError, DataError, EvaluationError, LifecycleError, StateError

LN_EPS = 1e-5


def _check_finite(value: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(value)):
        raise EvaluationError(f"non-finite values produced by {where}")


class ParamStore:
    """Named parameter arrays with matching gradient slots and a step counter."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value) -> np.ndarray:
        if name in self.params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        arr = np.array(value, dtype=np.float64)
        _check_finite(arr, f"parameter {name}")
        self.params[name] = arr
        self.grads[name] = np.zeros_like(arr)
        return arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return list(self.params)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for k, v in self.params.items():
            out.params[k] = v.copy()
            out.grads[k] = self.grads[k].copy()
        out.step = self.step
        return out

    def equals(self, other: "ParamStore") -> bool:
        if self.names() != other.names():
            return False
        return all(np.array_equal(self.params[k], other.params[k]) for k in self.params)

    def num_values(self) -> int:
        return sum(v.size for v in self.params.values())


class Node:
    """A value recorded on a tape, optionally tied to a parameter slot."""

    __slots__ = ("value", "parents", "grad_fn", "tape", "index", "param")

    def __init__(self, value, tape: "Tape", parents=(), grad_fn=None, param=None):
        self.value = value
        self.parents = parents
        self.grad_fn = grad_fn
        self.tape = tape
        self.param = param
        self.index = tape._register(self)

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Node(shape={self.value.shape})"


class Tape:
    """Single-use record of executed ops (the compute record)."""

    def __init__(self):
        self._nodes: list[Node] = []
        self._consumed = False

    def _register(self, node: Node) -> int:
        if self._consumed:
            raise LifecycleError("tape already consumed by backward")
        self._nodes.append(node)
        return len(self._nodes) - 1

    def __len__(self):
        return len(self._nodes)

    def constant(self, value) -> Node:
        arr = np.asarray(value, dtype=np.float64)
        _check_finite(arr, "constant input")
        return Node(arr, self)

    def param(self, store: ParamStore, name: str) -> Node:
        return Node(store.params[name], self, param=(store, name))

    def params(self, store: ParamStore, prefix: str = "") -> dict[str, Node]:
        return {k[len(prefix):]: self.param(store, k) for k in store.names() if k.startswith(prefix)}

    def backward(self, loss: Node) -> None:
        """Accumulate d(loss)/d(param) into the owning stores' grad slots."""
        if self._consumed:
            raise LifecycleError("tape already consumed by backward")
        if loss.tape is not self:
            raise LifecycleError("loss was not produced on this tape")
        if loss.value.size != 1:
            raise ConfigError(f"backward needs a scalar loss, got shape {loss.value.shape}")
        self._consumed = True
        grads: dict[int, np.ndarray] = {loss.index: np.ones_like(loss.value)}
        for node in reversed(self._nodes[: loss.index + 1]):
            g = grads.pop(node.index, None)
            if g is None:
                continue
            if node.param is not None:
                store, name = node.param
                store.grads[name] += g
            if node.grad_fn is None:
                continue
            for parent, pg in zip(node.parents, node.grad_fn(g)):
                if pg is None:
                    continue
                if parent.index in grads:
                    grads[parent.index] = grads[parent.index] + pg
                else:
                    grads[parent.index] = pg
        self._nodes = []


def _lift(x, tape: Tape) -> Node:
    if isinstance(x, Node):
        return x
    return tape.constant(x)


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Node):
            return x.tape
    raise ConfigError("at least one operand must be a tape node")


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    sa, sb = a.value.shape, b.value.shape
    return Node(a.value + b.value, tape, (a, b),
                lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    sa, sb = a.value.shape, b.value.shape
    return Node(a.value - b.value, tape, (a, b),
                lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    av, bv = a.value, b.value
    return Node(av * bv, tape, (a, b),
                lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    av, bv = a.value, b.value
    out = av / bv
    return Node(out, tape, (a, b),
                lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)))


def matmul(a, b) -> Node:
    """Matrix product; leading axes broadcast like numpy.matmul."""
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise ConfigError(f"matmul dimension mismatch: {av.shape} @ {bv.shape}")

    def grad_fn(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return Node(av @ bv, tape, (a, b), grad_fn)


def relu(x: Node) -> Node:
    mask = x.value > 0
    return Node(np.where(mask, x.value, 0.0), x.tape, (x,), lambda g: (g * mask,))


def exp(x: Node) -> Node:
    out = np.exp(x.value)
    return Node(out, x.tape, (x,), lambda g: (g * out,))


def log(x: Node) -> Node:
    xv = x.value
    if np.any(xv <= 0):
        raise EvaluationError("log of non-positive value")
    return Node(np.log(xv), x.tape, (x,), lambda g: (g / xv,))


def sqrt(x: Node) -> Node:
    out = np.sqrt(x.value)
    return Node(out, x.tape, (x,), lambda g: (g / (2.0 * out),))


def total(x: Node, axis=None, keepdims: bool = False) -> Node:
    shape = x.value.shape
    out = x.value.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Node(np.asarray(out), x.tape, (x,), grad_fn)


def mean(x: Node, axis=None, keepdims: bool = False) -> Node:
    count = x.value.size if axis is None else x.value.shape[axis]
    return mul(total(x, axis, keepdims), 1.0 / count)


def reshape(x: Node, shape) -> Node:
    old = x.value.shape
    return Node(x.value.reshape(shape), x.tape, (x,), lambda g: (g.reshape(old),))


def transpose(x: Node, axes) -> Node:
    inv = np.argsort(axes)
    return Node(np.transpose(x.value, axes), x.tape, (x,), lambda g: (np.transpose(g, inv),))


def concat(xs: list, axis: int = -1) -> Node:
    tape = _tape_of(*xs)
    xs = [_lift(x, tape) for x in xs]
    sizes = [x.value.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([x.value for x in xs], axis=axis)
    return Node(out, tape, tuple(xs), lambda g: tuple(np.split(g, splits, axis=axis)))


def take(x: Node, index, axis: int = 0) -> Node:
    """Gather along an axis; repeated indices accumulate gradient."""
    index = np.asarray(index, dtype=np.int64)
    shape = x.value.shape

    def grad_fn(g):
        out = np.zeros(shape)
        moved = np.moveaxis(out, axis, 0)
        np.add.at(moved, index, np.moveaxis(g, axis, 0))
        return (out,)

    return Node(np.take(x.value, index, axis=axis), x.tape, (x,), grad_fn)


def stop_gradient(x: Node) -> Node:
    return x.tape.constant(x.value.copy())


def softmax(x: Node, axis: int = -1) -> Node:
    z = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Node(out, x.tape, (x,), grad_fn)


def log_softmax(x: Node, axis: int = -1) -> Node:
    z = x.value - x.value.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    soft = np.exp(out)

    def grad_fn(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return Node(out, x.tape, (x,), grad_fn)


def layer_norm(x: Node, gain: Node, bias: Node, eps: float = LN_EPS) -> Node:
    """Normalize the last axis to zero mean / unit population variance, then affine."""
    d = x.value.shape[-1]
    if d < 2:
        raise DataError(f"layer_norm needs at least 2 features, got {d}")
    if eps <= 0:
        raise ConfigError("layer_norm eps must be positive")
    mu = x.value.mean(axis=-1, keepdims=True)
    xc = x.value - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gv = gain.value

    def grad_fn(g):
        dxhat = g * gv
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return Node(xhat * gv + bias.value, x.tape, (x, gain, bias), grad_fn)


def l2_normalize(x: Node, axis: int = -1) -> Node:
    norm = np.sqrt((x.value ** 2).sum(axis=axis, keepdims=True))
    if np.any(norm == 0):
        raise DataError("cannot normalize a zero-norm vector")
    out = x.value / norm

    def grad_fn(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,)

    return Node(out, x.tape, (x,), grad_fn)


def cosine_rows(a: Node, b: Node) -> Node:
    """Cosine similarity along the last axis (broadcasting leading axes)."""
    return total(l2_normalize(a) * l2_normalize(b), axis=-1)


def linear(x: Node, weight: Node, bias: Node) -> Node:
    """x @ weight + bias with weight stored as [in, out]."""
    return matmul(x, weight) + bias


# ---------------------------------------------------------------------------
# plain-array helpers shared by the evaluation code


def cosine_sim(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ConfigError(f"cosine_sim shape mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise DataError("cosine_sim of a zero-norm vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def np_softmax(x, axis: int = -1) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    _check_finite(x, "softmax input")
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


# ---------------------------------------------------------------------------
# attention block


def init_attention_params(store: ParamStore, dim: int, heads: int, rng: np.random.Generator,
                          prefix: str = "attn.") -> ParamStore:
    """Post-norm transformer block weights: attention, FFN(4d), two LayerNorms."""
    if dim % heads:
        raise ConfigError(f"dim {dim} not divisible by heads {heads}")
    hidden = 4 * dim
    s = 1.0 / math.sqrt(dim)
    for name in ("wq", "wk", "wv", "wo"):
        store.add(prefix + name, rng.normal(0.0, s, (dim, dim)))
    # no key bias: it shifts every logit of a query equally and cancels in softmax
    for name in ("bq", "bv", "bo"):
        store.add(prefix + name, np.zeros(dim))
    store.add(prefix + "ln1_g", np.ones(dim))
    store.add(prefix + "ln1_b", np.zeros(dim))
    store.add(prefix + "ff1", rng.normal(0.0, s, (dim, hidden)))
    store.add(prefix + "ff1_b", np.zeros(hidden))
    store.add(prefix + "ff2", rng.normal(0.0, 1.0 / math.sqrt(hidden), (hidden, dim)))
    store.add(prefix + "ff2_b", np.zeros(dim))
    store.add(prefix + "ln2_g", np.ones(dim))
    store.add(prefix + "ln2_b", np.zeros(dim))
    return store


@dataclass
class ScoreCounter:
    """Counts query-key score evaluations so the O(n) contract is checkable."""
    count: int = 0


SCORE_COUNTER = ScoreCounter()


def attention_block(query: Node, keys_values: Node, p: dict[str, Node], heads: int):
    """Batched single-query cross-attention block.

    query: [S, d]; keys_values: [S, n, d]. Returns (out [S, d], scores [S, heads, n]).
    No positional information is added, so the output is a set function of the keys.
    """
    S, d = query.value.shape
    if keys_values.value.ndim != 3 or keys_values.value.shape[0] != S or keys_values.value.shape[2] != d:
        raise ConfigError(f"keys/values shape {keys_values.value.shape} does not match query {query.value.shape}")
    if d % heads:
        raise ConfigError(f"dim {d} not divisible by heads {heads}")
    n = keys_values.value.shape[1]
    if n < 1:
        raise DataError("attention over an empty set")
    dh = d // heads

    q = linear(query, p["wq"], p["bq"])                  # [S, d]
    k = matmul(keys_values, p["wk"])                     # [S, n, d]
    v = linear(keys_values, p["wv"], p["bv"])
    qh = reshape(q, (S, heads, 1, dh))
    kh = transpose(reshape(k, (S, n, heads, dh)), (0, 2, 3, 1))   # [S, h, dh, n]
    vh = transpose(reshape(v, (S, n, heads, dh)), (0, 2, 1, 3))   # [S, h, n, dh]
    logits = mul(matmul(qh, kh), 1.0 / math.sqrt(dh))              # [S, h, 1, n]
    SCORE_COUNTER.count += S * heads * n
    scores = softmax(logits, axis=-1)
    ctx = reshape(matmul(scores, vh), (S, d))                      # heads concatenated
    attn = linear(ctx, p["wo"], p["bo"])
    h1 = layer_norm(query + attn, p["ln1_g"], p["ln1_b"])
    ff = linear(relu(linear(h1, p["ff1"], p["ff1_b"])), p["ff2"], p["ff2_b"])
    out = layer_norm(h1 + ff, p["ln2_g"], p["ln2_b"])
    return out, reshape(scores, (S, heads, n))


def mh_cross_attention(query, keys_values, store: ParamStore, heads: int, prefix: str = "attn."):
    """Forward-only convenience wrapper: query [1, d], keys [n, d] -> (out [1, d], scores [heads, n])."""
    tape = Tape()
    q = tape.constant(np.asarray(query, dtype=np.float64).reshape(1, -1))
    kv = np.asarray(keys_values, dtype=np.float64)
    if kv.ndim != 2:
        raise ConfigError(f"keys_values must be [n, d], got {kv.shape}")
    out, scores = attention_block(q, tape.constant(kv[None]), tape.params(store, prefix), heads)
    return out.value, scores.value[0]


# ---------------------------------------------------------------------------
# optimization


@dataclass
class OptimConfig:
    kind: str = "sgd"
    lr: float = 2e-3
    momentum: float = 0.9
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    total_steps: int = 0
    warmup_steps: int = 0
    warmup_lr: float = 1e-5
    schedule: str = "cosine"


def scheduled_lr(cfg: OptimConfig, step: int) -> float:
    """Constant warmup, then cosine annealing to zero at `total_steps`."""
    if step < cfg.warmup_steps:
        return cfg.warmup_lr
    if cfg.schedule == "constant" or cfg.total_steps <= cfg.warmup_steps:
        return cfg.lr
    t = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    t = min(max(t, 0.0), 1.0)
    return 0.5 * cfg.lr * (1.0 + math.cos(math.pi * t))


@dataclass
class Optimizer:
    config: OptimConfig
    state: dict = field(default_factory=dict)

    def step(self, store: ParamStore, names: Iterable[str] | None = None) -> float:
        """Apply one update to `names` (default: all params), then zero their grads."""
        cfg = self.config
        if cfg.kind not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {cfg.kind!r}")
        names = list(store.names() if names is None else names)
        for name in names:
            if name not in store.grads:
                raise StateError(f"no gradient slot for {name!r}")
        lr = scheduled_lr(cfg, store.step)
        store.step += 1
        t = store.step
        for name in names:
            p, g = store.params[name], store.grads[name]
            if cfg.weight_decay:
                g = g + cfg.weight_decay * p
            if cfg.kind == "sgd":
                if cfg.momentum:
                    buf = self.state.get(name)
                    buf = g.copy() if buf is None else cfg.momentum * buf + g
                    self.state[name] = buf
                    g = buf
                p -= lr * g
            else:
                b1, b2 = cfg.betas
                m, v = self.state.get(name, (np.zeros_like(p), np.zeros_like(p)))
                m = b1 * m + (1 - b1) * g
                v = b2 * v + (1 - b2) * g * g
                self.state[name] = (m, v)
                mhat = m / (1 - b1 ** t)
                vhat = v / (1 - b2 ** t)
                p -= lr * mhat / (np.sqrt(vhat) + cfg.eps)
            store.grads[name].fill(0.0)
        return lr


# ---------------------------------------------------------------------------
# gradient checking


def finite_diff_check(loss_fn: Callable[[Tape], Node], store: ParamStore, eps: float = 1e-6,
                      samples: int = 64, seed: int = 0, names: Iterable[str] | None = None) -> float:
    """Worst relative error between tape gradients and central differences.

    `loss_fn(tape)` must build a scalar loss on the given tape reading params
    from `store`. Up to `samples` coordinates per tensor are checked (all of
    them when the tensor is smaller).
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ConfigError(f"eps {eps} outside [1e-7, 1e-3]")
    names = list(store.names() if names is None else names)
    rng = np.random.default_rng(seed)
    saved = {k: g.copy() for k, g in store.grads.items()}
    store.zero_grad()
    tape = Tape()
    loss = loss_fn(tape)
    if not np.isfinite(loss.value).all():
        raise EvaluationError("loss is not finite")
    tape.backward(loss)
    analytic = {k: store.grads[k].copy() for k in names}
    for k, g in saved.items():
        store.grads[k][...] = g

    def value() -> float:
        v = float(loss_fn(Tape()).value)
        if not math.isfinite(v):
            raise EvaluationError("loss is not finite")
        return v

    worst = 0.0
    for name in names:
        flat = store.params[name].reshape(-1)
        count = flat.size
        idx = np.arange(count) if count <= samples else rng.choice(count, samples, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            up = value()
            flat[i] = orig - eps
            down = value()
            flat[i] = orig
            numeric = (up - down) / (2 * eps)
            a = analytic[name].reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
