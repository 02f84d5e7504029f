"""Training loops, checkpoints and experiment protocols.

Stage 1 trains an aggregator with the clipped-cosine reward. Stage 2 trains
the generator h and projection g on lam * distill + task, with distillation
targets taken from the frozen stage-1 aggregator. A joint mode updates both
in one loop with the targets detached from the aggregator.
"""
from __future__ import annotations

import hashlib
import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import adapt, diffcore as dc, evalkit, losses
from .aggregate import AttentionAggregator, MlpAggregator, clip_s_node, mean_prompt
from .diffcore import OptimConfig, Optimizer, ParamStore, Tape
from .embedio import Dataset, EmbeddingBank, _parse_bank, base_new_split, kshot_sample
from .errors import ConfigError, DataError, FormatError, StateError

SEEDS = (0, 1, 2)
SHOTS = (1, 2, 4, 8, 16)
AGGREGATOR_KINDS = ("random", "mean", "mlp", "attention")
PROTOCOLS = ("base2new", "kshot", "lambda_sweep", "aggregator_ablation", "retrieval")


@dataclass
class TrainConfig:
    lam: float = 5.0
    tau: float = 0.01
    s: float = 2.5
    heads: int = 4
    d_h: int | None = None
    mode: str = "two_stage"
    task: str = "classification"
    query_mode: str = "mean"
    aggregator: str = "attention"
    head: str = "fused"
    optimizer: str = "sgd"
    lr_stage1: float = 2e-3
    lr_stage2: float = 2e-3
    momentum: float = 0.9
    weight_decay: float = 0.0
    warmup_epochs: int = 1
    warmup_lr: float = 1e-5
    epochs_stage1: int = 50
    epochs_stage2: int = 100
    batch_size: int = 32
    shots: int = 16
    normalize_targets: bool = True
    g_init: str = "template"
    g_bias: float = 0.0
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.tau <= 0 or self.s <= 0:
            raise ConfigError("tau and s must be positive")
        if self.epochs_stage1 < 0 or self.epochs_stage2 < 0:
            raise ConfigError("epochs must be >= 0")
        if self.seed is None:
            raise ConfigError("seed is mandatory")
        for name, value, allowed in (
            ("mode", self.mode, ("two_stage", "joint")),
            ("task", self.task, ("classification", "retrieval")),
            ("query_mode", self.query_mode, ("mean", "global")),
            ("aggregator", self.aggregator, AGGREGATOR_KINDS),
            ("head", self.head, ("fused", "hx_only")),
            ("optimizer", self.optimizer, ("sgd", "adam")),
        ):
            if value not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}, got {value!r}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        return self

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc).validate()

    def digest(self, data_digest: str = "") -> str:
        blob = json.dumps(self.to_json(), sort_keys=True) + data_digest
        return hashlib.sha256(blob.encode()).hexdigest()


def _optim(cfg: TrainConfig, lr: float, epochs: int, steps_per_epoch: int) -> Optimizer:
    return Optimizer(OptimConfig(
        kind=cfg.optimizer, lr=lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay,
        total_steps=epochs * steps_per_epoch,
        warmup_steps=min(cfg.warmup_epochs, max(epochs - 1, 0)) * steps_per_epoch,
        warmup_lr=cfg.warmup_lr))


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _train_arrays(ds: Dataset):
    x, y, ids = ds.image_arrays("train")
    if len(ids) == 0:
        raise DataError("training fold is empty")
    return x, y, ids


# ---------------------------------------------------------------------------
# stage 1


def make_aggregator(cfg: TrainConfig, dim: int):
    if cfg.aggregator == "attention":
        return AttentionAggregator(dim, cfg.heads, seed=cfg.seed, query_mode=cfg.query_mode)
    if cfg.aggregator == "mlp":
        return MlpAggregator(dim, seed=cfg.seed)
    return None


def _owner_sets(ds: Dataset, cfg: TrainConfig, labels, ids):
    """Per-image aggregation owners: the class (classification) or the image itself (retrieval)."""
    if cfg.task == "classification":
        return [int(c) for c in labels], {int(c): ds.prompt_set(int(c)) for c in set(labels.tolist())}
    return [int(i) for i in ids], {int(i): ds.caption_set(int(i)) for i in ids}


def _aggregate_owners(tape: Tape, agg, owner_list: list[int], sets: dict[int, np.ndarray]):
    """Tape-aggregate the distinct owners in `owner_list`; returns per-item p_a node."""
    uniq = sorted(set(owner_list))
    by_size: dict[int, list[int]] = {}
    for o in uniq:
        by_size.setdefault(len(sets[o]), []).append(o)
    parts, order = [], []
    for n in sorted(by_size):
        group = by_size[n]
        p_a, _ = agg.forward(tape, np.stack([sets[o] for o in group]))
        parts.append(p_a)
        order.extend(group)
    stacked = parts[0] if len(parts) == 1 else dc.concat(parts, axis=0)
    pos = {o: i for i, o in enumerate(order)}
    return dc.take(stacked, [pos[o] for o in owner_list], axis=0)


def mean_reward(ds: Dataset, agg, cfg: TrainConfig) -> float:
    x, y, ids = _train_arrays(ds)
    owners, sets = _owner_sets(ds, cfg, y, ids)
    tape = Tape()
    p_a = _aggregate_owners(tape, agg, owners, sets)
    return float(dc.mean(clip_s_node(tape.constant(x), p_a, cfg.s)).value)


def reward_loss(tape: Tape, agg, x: np.ndarray, owners, sets, s: float):
    p_a = _aggregate_owners(tape, agg, owners, sets)
    return -dc.mean(clip_s_node(tape.constant(x), p_a, s)), p_a


def train_aggregator(ds: Dataset, agg, cfg: TrainConfig) -> list[float]:
    """Maximise the mean reward over training images; returns per-epoch mean reward (epoch 0 = init)."""
    x, y, ids = _train_arrays(ds)
    owners, sets = _owner_sets(ds, cfg, y, ids)
    if getattr(agg, "query_mode", None) == "global":
        agg.init_global_query(list(sets.values()))
    rng = np.random.default_rng([cfg.seed, 1])
    steps = math.ceil(len(ids) / cfg.batch_size)
    opt = _optim(cfg, cfg.lr_stage1, cfg.epochs_stage1, steps)
    trace = [mean_reward(ds, agg, cfg)]
    for _ in range(cfg.epochs_stage1):
        for b in _batches(len(ids), cfg.batch_size, rng):
            tape = Tape()
            loss, _ = reward_loss(tape, agg, x[b], [owners[i] for i in b], sets, cfg.s)
            tape.backward(loss)
            opt.step(agg.store)
        trace.append(mean_reward(ds, agg, cfg))
    return trace


def train_stage1(ds: Dataset, cfg: TrainConfig):
    """Build and train the configured aggregator; returns (aggregator or None, reward trace)."""
    cfg.validate()
    agg = make_aggregator(cfg, ds.dim)
    if agg is None:
        return None, []
    trace = train_aggregator(ds, agg, cfg)
    return agg, trace


# ---------------------------------------------------------------------------
# distillation targets


def _unit_rows(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return np.where(n > 0, v / np.where(n > 0, n, 1.0), v)


def distill_targets(ds: Dataset, cfg: TrainConfig, agg, owners: list[int]) -> dict[int, np.ndarray]:
    """Target vector per owner (class or image) from the configured aggregator kind."""
    owners = sorted(set(owners))
    if cfg.task == "classification":
        sets = [ds.prompt_set(o) for o in owners]
    else:
        sets = [ds.caption_set(o) for o in owners]
    if cfg.aggregator == "mean":
        vecs = np.stack([mean_prompt(s) for s in sets])
    elif cfg.aggregator == "random":
        rng = np.random.default_rng([cfg.seed, 2])
        vecs = np.stack([s[rng.integers(len(s))] for s in sets])
    else:
        if agg is None:
            raise StateError("distillation with a learned aggregator needs stage-1 parameters")
        vecs, _ = agg.aggregate_many(sets)
    if cfg.normalize_targets:
        vecs = _unit_rows(vecs)
    return {o: vecs[i] for i, o in enumerate(owners)}


# ---------------------------------------------------------------------------
# stage 2


def _class_index(ds: Dataset, labels: np.ndarray):
    classes = sorted(set(labels.tolist()))
    local = {c: i for i, c in enumerate(classes)}
    return classes, np.array([local[c] for c in labels.tolist()], dtype=np.int64)


def adapter_loss(tape: Tape, store: ParamStore, cfg: TrainConfig, x: np.ndarray, targets: np.ndarray | None,
                 task_fn):
    """lam * distill + task on one batch; returns (total node, distill node or None, task node)."""
    p = tape.params(store)
    xn = tape.constant(x)
    aape = adapt.h_node(tape, xn, p)
    task = task_fn(tape, xn, aape, p)
    if cfg.lam > 0:
        distill = losses.distill_node(aape, targets)
        return distill * cfg.lam + task, distill, task
    return task, None, task


def _classification_task(ds: Dataset, cfg: TrainConfig, templates: np.ndarray, labels: np.ndarray):
    def task_fn(tape, xn, aape, p):
        if cfg.head == "hx_only":
            logits = adapt.hx_only_logits(tape, aape, templates, cfg.tau)
        else:
            logits = adapt.fused_logits(tape, xn, aape, templates, p, cfg.tau)
        return losses.ce_node(logits, labels)
    return task_fn


def _retrieval_task(captions: np.ndarray, cfg: TrainConfig):
    def task_fn(tape, xn, aape, p):
        return losses.infonce_node(aape, captions, cfg.tau)
    return task_fn


@dataclass
class Stage2Result:
    store: ParamStore
    trace: list[dict] = field(default_factory=list)


def init_adapter_store(cfg: TrainConfig, dim: int) -> ParamStore:
    return adapt.init_adapter(dim, cfg.d_h, seed=cfg.seed, g_init=cfg.g_init, g_bias=cfg.g_bias)


def train_stage2(ds: Dataset, agg, cfg: TrainConfig, store: ParamStore | None = None) -> Stage2Result:
    """Train h and g on lam * distill + task with frozen-aggregator targets."""
    cfg.validate()
    if cfg.lam > 0 and agg is None and cfg.aggregator in ("attention", "mlp"):
        raise StateError("stage-1 aggregator required when lambda > 0")
    x, y, ids = _train_arrays(ds)
    store = init_adapter_store(cfg, ds.dim) if store is None else store
    owners = [int(c) for c in y] if cfg.task == "classification" else [int(i) for i in ids]
    targets = distill_targets(ds, cfg, agg, owners) if cfg.lam > 0 else None
    rng = np.random.default_rng([cfg.seed, 3])
    steps = math.ceil(len(ids) / cfg.batch_size)
    opt = _optim(cfg, cfg.lr_stage2, cfg.epochs_stage2, steps)
    classes, local = _class_index(ds, y)
    templates = ds.templates(classes) if cfg.task == "classification" else None
    result = Stage2Result(store)
    for epoch in range(cfg.epochs_stage2):
        tot = dist = task_sum = 0.0
        for b in _batches(len(ids), cfg.batch_size, rng):
            if len(b) < 2 and cfg.task == "retrieval":
                continue
            tgt = np.stack([targets[owners[i]] for i in b]) if targets is not None else None
            if cfg.task == "classification":
                task_fn = _classification_task(ds, cfg, templates, local[b])
            else:
                caps = np.stack([ds.caption_set(ids[i])[rng.integers(len(ds.manifest.captions[ids[i]]))]
                                 for i in b])
                task_fn = _retrieval_task(caps, cfg)
            tape = Tape()
            total, distill, task = adapter_loss(tape, store, cfg, x[b], tgt, task_fn)
            tot += float(total.value) * len(b)
            dist += (float(distill.value) if distill is not None else 0.0) * len(b)
            task_sum += float(task.value) * len(b)
            tape.backward(total)
            opt.step(store)
        n = len(ids)
        result.trace.append({"epoch": epoch + 1, "total": tot / n, "distill": dist / n, "task": task_sum / n})
    return result


def train_joint(ds: Dataset, cfg: TrainConfig):
    """One loop: aggregator on -reward, adapter on lam * distill + task with detached targets."""
    cfg.validate()
    x, y, ids = _train_arrays(ds)
    agg = make_aggregator(cfg, ds.dim)
    if agg is None:
        raise ConfigError("joint mode needs a learned aggregator (attention or mlp)")
    store = init_adapter_store(cfg, ds.dim)
    owners, sets = _owner_sets(ds, cfg, y, ids)
    if getattr(agg, "query_mode", None) == "global":
        agg.init_global_query(list(sets.values()))
    epochs = max(cfg.epochs_stage1, cfg.epochs_stage2)
    steps = math.ceil(len(ids) / cfg.batch_size)
    opt_agg = _optim(cfg, cfg.lr_stage1, epochs, steps)
    opt_ad = _optim(cfg, cfg.lr_stage2, epochs, steps)
    rng = np.random.default_rng([cfg.seed, 4])
    classes, local = _class_index(ds, y)
    templates = ds.templates(classes) if cfg.task == "classification" else None
    trace = [mean_reward(ds, agg, cfg)]
    for _ in range(epochs):
        for b in _batches(len(ids), cfg.batch_size, rng):
            joint_step(agg, store, opt_agg, opt_ad, cfg, x[b], [owners[i] for i in b], sets,
                       local[b] if templates is not None else None, templates,
                       None if templates is not None else
                       np.stack([ds.caption_set(ids[i])[0] for i in b]))
        trace.append(mean_reward(ds, agg, cfg))
    return agg, Stage2Result(store, [{"epoch": i, "reward": r} for i, r in enumerate(trace)])


def joint_step(agg, store: ParamStore, opt_agg, opt_ad, cfg: TrainConfig, x, owners, sets, labels,
               templates, captions=None) -> None:
    """One joint update. The adapter's targets are detached copies of the live aggregator output."""
    tape = Tape()
    loss, p_a = reward_loss(tape, agg, x, owners, sets, cfg.s)
    target = dc.stop_gradient(p_a).value
    if cfg.normalize_targets:
        target = _unit_rows(target)
    tape.backward(loss)
    if opt_agg is not None:
        opt_agg.step(agg.store)
    if templates is not None:
        task_fn = _classification_task(None, cfg, templates, labels)
    else:
        task_fn = _retrieval_task(captions, cfg)
    tape2 = Tape()
    total, _, _ = adapter_loss(tape2, store, cfg, x, target, task_fn)
    tape2.backward(total)
    if opt_ad is not None:
        opt_ad.step(store)


# ---------------------------------------------------------------------------
# evaluation helpers


def classification_accuracy(ds: Dataset, store: ParamStore, cfg: TrainConfig, fold: str = "test",
                            classes=None) -> float:
    """Top-1 accuracy among `classes` (default: classes present in the fold)."""
    x, y, ids = ds.image_arrays(fold)
    if len(ids) == 0:
        raise DataError(f"no {fold} images to evaluate")
    classes = sorted(set(y.tolist())) if classes is None else list(classes)
    local = {c: i for i, c in enumerate(classes)}
    probs = adapt.batch_fused_probs(x, ds.templates(classes), store, cfg.tau, head=cfg.head)
    preds = evalkit.argmax_lowest(probs)
    return evalkit.top1_accuracy(preds, np.array([local[c] for c in y.tolist()]))


def zero_shot_accuracy(ds: Dataset, tau: float = 0.01, fold: str = "test") -> float:
    x, y, _ = ds.image_arrays(fold)
    classes = sorted(set(y.tolist()))
    t = ds.templates(classes)
    t = t / np.linalg.norm(t, axis=1, keepdims=True)
    local = {c: i for i, c in enumerate(classes)}
    return evalkit.top1_accuracy(np.argmax(x @ t.T, axis=1), np.array([local[c] for c in y.tolist()]))


def retrieval_recalls(ds: Dataset, store: ParamStore, ks=(1, 5, 10), fold: str = "test") -> dict[int, float]:
    """AAPE-as-query text retrieval over the captions of the fold's images."""
    x, _, ids = ds.image_arrays(fold)
    cap_ids = [c for i in ids for c in ds.manifest.captions[i]]
    bank = ds.texts.rows(cap_ids)
    aape = adapt.generate_aape(x, store)
    rankings, truth = [], []
    for row, i in enumerate(ids):
        ranked, _ = adapt.retrieval_scores(aape[row], bank, np.array(cap_ids))
        rankings.append(ranked.tolist())
        truth.append(ds.manifest.captions[i])
    return {k: evalkit.recall_at_k(rankings, truth, k) for k in ks}


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"AAPC"
CKPT_VERSION = 1


@dataclass
class Checkpoint:
    config: TrainConfig
    aggregator: ParamStore | None
    adapter: ParamStore | None
    epoch: int = 0
    trace: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)


def _store_tensors(prefix: str, store: ParamStore | None):
    if store is None:
        return []
    return [(prefix + k, v) for k, v in store.params.items()]


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    """magic | u32 version | u32 header length | header JSON | tensors in bank format | sha256."""
    tensors = _store_tensors("aggregator/", ckpt.aggregator) + _store_tensors("adapter/", ckpt.adapter)
    header = {
        "config": ckpt.config.to_json(), "epoch": ckpt.epoch, "trace": ckpt.trace, "meta": ckpt.meta,
        "has_aggregator": ckpt.aggregator is not None, "has_adapter": ckpt.adapter is not None,
        "tensors": [{"name": n, "shape": list(v.shape)} for n, v in tensors],
        "steps": {"aggregator": ckpt.aggregator.step if ckpt.aggregator else 0,
                  "adapter": ckpt.adapter.step if ckpt.adapter else 0},
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<II", CKPT_VERSION, len(hbytes)))
    buf.write(hbytes)
    for _, v in tensors:
        buf.write(EmbeddingBank(v.reshape(1, -1) if v.ndim < 2 else v.reshape(v.shape[0], -1), "f64").to_bytes())
    body = buf.getvalue()
    path = Path(path)
    path.write_bytes(body + hashlib.sha256(body).digest())
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    data = path.read_bytes()
    src = str(path)
    if len(data) < 12 + 32:
        raise FormatError(f"{src}: truncated checkpoint")
    body, digest = data[:-32], data[-32:]
    if body[:4] != CKPT_MAGIC:
        raise FormatError(f"{src}: bad magic {body[:4]!r}")
    version, hlen = struct.unpack_from("<II", body, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"{src}: unsupported checkpoint version {version}")
    if hashlib.sha256(body).digest() != digest:
        raise FormatError(f"{src}: checksum mismatch (corrupted or truncated)")
    try:
        header = json.loads(body[12:12 + hlen])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{src}: bad header: {exc}") from exc
    offset = 12 + hlen
    stores = {"aggregator": ParamStore(), "adapter": ParamStore()}
    for t in header["tensors"]:
        bank, offset = _parse_bank(body, offset, src)
        owner, name = t["name"].split("/", 1)
        stores[owner].add(name, bank.vectors.astype(np.float64).reshape(t["shape"]))
    if offset != len(body):
        raise FormatError(f"{src}: {len(body) - offset} unexpected trailing bytes")
    stores["aggregator"].step = header["steps"]["aggregator"]
    stores["adapter"].step = header["steps"]["adapter"]
    return Checkpoint(
        TrainConfig.from_json(header["config"]),
        stores["aggregator"] if header["has_aggregator"] else None,
        stores["adapter"] if header["has_adapter"] else None,
        header["epoch"], header["trace"], header["meta"])


def aggregator_from_store(cfg: TrainConfig, dim: int, store: ParamStore | None):
    agg = make_aggregator(cfg, dim)
    if agg is None or store is None:
        return agg
    if set(store.names()) != set(agg.store.names()):
        raise FormatError("checkpoint aggregator parameters do not match the configured aggregator")
    agg.store = store
    return agg


# ---------------------------------------------------------------------------
# protocols


def train_pipeline(train_ds: Dataset, cfg: TrainConfig, agg=None):
    """Stage 1 (unless given) then stage 2, or joint mode. Returns (aggregator, adapter store)."""
    if cfg.mode == "joint":
        agg, res = train_joint(train_ds, cfg)
        return agg, res.store
    if agg is None and cfg.lam > 0:
        agg, _ = train_stage1(train_ds, cfg)
    return agg, train_stage2(train_ds, agg, cfg).store


def _unit_path(workdir: Path | None, name: str) -> Path | None:
    return None if workdir is None else workdir / f"{name}.aapc"


def _run_unit(workdir, name, train_ds, cfg, agg=None):
    """Train (or resume from a saved checkpoint) one protocol unit."""
    path = _unit_path(workdir, name)
    if path is not None and path.exists():
        ck = load_checkpoint(path)
        if ck.config != cfg:
            raise StateError(f"{path} was written with a different config; remove it or change workdir")
        return aggregator_from_store(ck.config, train_ds.dim, ck.aggregator), ck.adapter
    agg, store = train_pipeline(train_ds, cfg, agg)
    if path is not None:
        save_checkpoint(Checkpoint(cfg, getattr(agg, "store", None), store,
                                   epoch=cfg.epochs_stage2), path)
    return agg, store


def base2new_metrics(ds: Dataset, store: ParamStore, cfg: TrainConfig) -> dict[str, float]:
    base_view, new_view = base_new_split(ds)
    base = classification_accuracy(base_view, store, cfg, "test")
    new = classification_accuracy(new_view, store, cfg, "test")
    return {"base": base, "new": new, "H": evalkit.nan_safe_harmonic(base, new)}


def _seed_views(ds: Dataset, cfg: TrainConfig, seed: int):
    sampled = kshot_sample(ds, cfg.shots, seed)
    base_view, _ = base_new_split(sampled)
    return sampled, base_view


def run_protocol(protocol: str, ds: Dataset, cfg: TrainConfig, seeds=SEEDS, workdir=None,
                 grid=None) -> evalkit.MetricReport:
    """Run a named protocol over `seeds`; every unit is checkpointed under `workdir` when given."""
    if protocol not in PROTOCOLS:
        raise ConfigError(f"unknown protocol {protocol!r}; choose from {PROTOCOLS}")
    cfg.validate()
    workdir = None if workdir is None else Path(workdir)
    if workdir is not None:
        workdir.mkdir(parents=True, exist_ok=True)
    report = evalkit.MetricReport(protocol, list(seeds), config_digest=cfg.digest(ds.digest()))
    cols: dict[str, list[float]] = {}

    def put(metric, value):
        cols.setdefault(metric, []).append(value)

    for seed in seeds:
        scfg = replace(cfg, seed=seed)
        if protocol == "base2new":
            sampled, base_view = _seed_views(ds, scfg, seed)
            _, store = _run_unit(workdir, f"base2new_s{seed}", base_view, scfg)
            for k, v in base2new_metrics(sampled, store, scfg).items():
                put(k, v)
        elif protocol == "kshot":
            for k in (grid or SHOTS):
                kcfg = replace(scfg, shots=k)
                sampled = kshot_sample(ds, k, seed)
                _, store = _run_unit(workdir, f"kshot_k{k}_s{seed}", sampled, kcfg)
                put(f"acc@{k}shot", classification_accuracy(sampled, store, kcfg, "test"))
        elif protocol == "lambda_sweep":
            sampled, base_view = _seed_views(ds, scfg, seed)
            agg = None
            for lam in (grid or losses.LAMBDA_GRID):
                lcfg = replace(scfg, lam=float(lam))
                if agg is None and lcfg.mode == "two_stage":
                    agg, _ = _stage1_unit(workdir, f"lambda_stage1_s{seed}", base_view, lcfg)
                _, store = _run_unit(workdir, f"lambda_{lam}_s{seed}", base_view, lcfg, agg)
                m = base2new_metrics(sampled, store, lcfg)
                for k in ("base", "new", "H"):
                    put(f"{k}@lambda={lam}", m[k])
        elif protocol == "aggregator_ablation":
            sampled, base_view = _seed_views(ds, scfg, seed)
            for kind in (grid or AGGREGATOR_KINDS):
                acfg = replace(scfg, aggregator=kind)
                _, store = _run_unit(workdir, f"agg_{kind}_s{seed}", base_view, acfg)
                m = base2new_metrics(sampled, store, acfg)
                for k in ("base", "new", "H"):
                    put(f"{kind}/{k}", m[k])
        elif protocol == "retrieval":
            rcfg = replace(scfg, task="retrieval")
            untrained = init_adapter_store(rcfg, ds.dim)
            _, store = _run_unit(workdir, f"retrieval_s{seed}", ds, rcfg)
            for k, v in retrieval_recalls(ds, untrained).items():
                put(f"untrained/R@{k}", v)
            for k, v in retrieval_recalls(ds, store).items():
                put(f"trained/R@{k}", v)
    for metric, values in cols.items():
        report.add(metric, values)
    return report


def _stage1_unit(workdir, name, train_ds, cfg):
    path = _unit_path(workdir, name)
    if path is not None and path.exists():
        ck = load_checkpoint(path)
        if ck.config != cfg:
            raise StateError(f"{path} was written with a different config; remove it or change workdir")
        return aggregator_from_store(ck.config, train_ds.dim, ck.aggregator), ck.trace
    agg, trace = train_stage1(train_ds, cfg)
    if path is not None:
        save_checkpoint(Checkpoint(cfg, getattr(agg, "store", None), None,
                                   epoch=cfg.epochs_stage1, trace=trace), path)
    return agg, trace
