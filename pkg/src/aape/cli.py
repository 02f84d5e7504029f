"""Command-line entry point: synth, train, eval, ablate, attn-export.

Settings resolve as defaults < --config JSON < flags < AAPE_SEED. Every
command prints its effective config (and writes it to the output directory)
before doing any work. Exit codes: 0 ok, 2 usage, 3 state, 4 data/format.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import fields, replace
from pathlib import Path

from . import evalkit, train as tr
from .aggregate import AttentionAggregator, export_attention_scores
from .embedio import SynthConfig, base_new_split, kshot_sample, load_dataset, save_dataset, synth_dataset
from .errors import AapeError, ConfigError, StateError, UsageError

_ALIASES = {"lambda": "lam"}
_PATH_KEYS = ("data", "out", "checkpoint", "aggregator_ckpt")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _key(name: str) -> str:
    name = name.replace("-", "_")
    return _ALIASES.get(name, name)


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"config {path} must be a flat JSON object")
    return {_key(k): v for k, v in doc.items()}


def _env_seed(env: str) -> int:
    try:
        return int(env)
    except ValueError:
        raise ConfigError(f"AAPE_SEED must be an integer, got {env!r}") from None


def resolve_train_config(args, base: tr.TrainConfig | None = None) -> tuple[tr.TrainConfig, dict]:
    """Merge defaults, config file, explicit flags and AAPE_SEED; returns (config, path settings)."""
    doc = _load_config_file(getattr(args, "config", None))
    paths = {k: doc.pop(k) for k in _PATH_KEYS if k in doc}
    known = {f.name for f in fields(tr.TrainConfig)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    cfg = replace(base or tr.TrainConfig(), **doc)
    flags = {k: v for k, v in vars(args).items() if v is not None}
    for k in _PATH_KEYS:
        if k in flags:
            paths[k] = flags[k]
    over = {k: flags[k] for k in known if k in flags}
    cfg = replace(cfg, **over)
    env = os.environ.get("AAPE_SEED")
    if env is not None:
        cfg = replace(cfg, seed=_env_seed(env))
    return cfg.validate(), paths


def _echo(effective: dict, out: Path | None) -> None:
    text = json.dumps(effective, indent=1, sort_keys=True)
    print(text)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "effective_config.json").write_text(text + "\n")


def _need(paths: dict, key: str) -> Path:
    if key not in paths:
        raise UsageError(f"--{key.replace('_', '-')} is required (flag or config file)")
    return Path(paths[key])


def _parse_fracs(text: str) -> tuple[float, float, float]:
    try:
        vals = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"--noise-fracs expects three comma-separated numbers, got {text!r}") from None
    if len(vals) != 3:
        raise UsageError(f"--noise-fracs expects three values, got {len(vals)}")
    return vals


def _seeds(text: str | None) -> list[int]:
    if text is None:
        return list(tr.SEEDS)
    try:
        return [int(s) for s in text.split(",")]
    except ValueError:
        raise UsageError(f"--seeds expects comma-separated integers, got {text!r}") from None


def _write_report(report: evalkit.MetricReport, out: Path, stem: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    evalkit.emit_report(report, out / f"{stem}.json", "json")
    evalkit.emit_report(report, out / f"{stem}.txt", "text")
    print(report.to_text(), end="")


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    kw = {"classes": args.classes, "dim": args.dim, "images_per_class": args.images_per_class,
          "prompts": args.prompts, "seed": args.seed, "train_per_class": args.train_per_class,
          "captions_per_image": args.captions_per_image}
    kw = {k: v for k, v in kw.items() if v is not None}
    if args.noise_fracs is not None:
        kw["fractions"] = _parse_fracs(args.noise_fracs)
    env = os.environ.get("AAPE_SEED")
    if env is not None:
        kw["seed"] = _env_seed(env)
    scfg = SynthConfig(**kw)
    try:
        scfg.validate()
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc
    out = Path(args.out)
    _echo({"command": "synth", "synth": scfg.to_json(), "out": str(out)}, out)
    digests = save_dataset(synth_dataset(scfg), out)
    for name, digest in digests.items():
        print(f"{digest}  {out / name}")
    return 0


def _train_view(ds, cfg: tr.TrainConfig):
    if cfg.task == "retrieval":
        if not ds.manifest.captions:
            raise ConfigError("retrieval training needs a dataset with captions")
        return ds
    return base_new_split(kshot_sample(ds, cfg.shots, cfg.seed))[0]


def cmd_train(args) -> int:
    cfg, paths = resolve_train_config(args)
    if args.epochs is not None:
        if args.stage in ("aggregator", "joint"):
            cfg = replace(cfg, epochs_stage1=args.epochs)
        if args.stage in ("generator", "joint"):
            cfg = replace(cfg, epochs_stage2=args.epochs)
    if args.stage == "joint":
        cfg = replace(cfg, mode="joint")
    data, out = _need(paths, "data"), _need(paths, "out")
    _echo({"command": "train", "stage": args.stage, "config": cfg.to_json(),
           **{k: str(v) for k, v in paths.items()}}, out)
    view = _train_view(load_dataset(data), cfg)
    if args.stage == "aggregator":
        agg, trace = tr.train_stage1(view, cfg)
        if agg is None:
            raise ConfigError(f"aggregator kind {cfg.aggregator!r} has no stage-1 parameters")
        ck = tr.Checkpoint(cfg, agg.store, None, epoch=cfg.epochs_stage1, trace=trace)
        trace_doc = [{"epoch": i, "reward": r} for i, r in enumerate(trace)]
    elif args.stage == "generator":
        agg = None
        if "aggregator_ckpt" in paths:
            stage1 = tr.load_checkpoint(paths["aggregator_ckpt"])
            if stage1.config.aggregator != cfg.aggregator:
                raise ConfigError(f"stage-1 checkpoint holds a {stage1.config.aggregator!r} aggregator, "
                                  f"config asks for {cfg.aggregator!r}")
            agg = tr.aggregator_from_store(stage1.config, view.dim, stage1.aggregator)
        elif cfg.lam > 0 and cfg.aggregator in ("attention", "mlp"):
            raise StateError("generator training with lambda > 0 needs --aggregator-ckpt from --stage aggregator")
        res = tr.train_stage2(view, agg, cfg)
        ck = tr.Checkpoint(cfg, getattr(agg, "store", None), res.store, epoch=cfg.epochs_stage2,
                           trace=res.trace)
        trace_doc = res.trace
    else:
        agg, res = tr.train_joint(view, cfg)
        ck = tr.Checkpoint(cfg, agg.store, res.store, epoch=max(cfg.epochs_stage1, cfg.epochs_stage2),
                           trace=res.trace)
        trace_doc = res.trace
    tr.save_checkpoint(ck, out / "checkpoint.aapc")
    (out / "trace.json").write_text(json.dumps(trace_doc, indent=1) + "\n")
    print(f"wrote {out / 'checkpoint.aapc'}")
    return 0


def _checkpoint_adapter(paths: dict):
    ck = tr.load_checkpoint(_need(paths, "checkpoint"))
    if ck.adapter is None:
        raise StateError("checkpoint has no generator parameters; train --stage generator or joint first")
    return ck


def cmd_eval(args) -> int:
    cfg, paths = resolve_train_config(args)
    data, out = _need(paths, "data"), _need(paths, "out")
    _echo({"command": "eval", "protocol": args.protocol, "config": cfg.to_json(),
           **{k: str(v) for k, v in paths.items()}}, out)
    ds = load_dataset(data)
    if args.protocol == "gap":
        x, _, _ = ds.image_arrays("test")
        text_ids = sorted({c.template_id for c in ds.manifest.classes}
                          | {p for c in ds.manifest.classes for p in c.prompt_ids})
        report = evalkit.MetricReport("gap", [cfg.seed], config_digest=cfg.digest(ds.digest()))
        report.add("modality_gap", [evalkit.modality_gap(x, ds.texts.rows(text_ids))])
    elif args.protocol == "kshot":
        report = tr.run_protocol("kshot", ds, cfg, _seeds(args.seeds), workdir=out / "units")
    elif "checkpoint" in paths:
        ck = _checkpoint_adapter(paths)
        ecfg = ck.config
        report = evalkit.MetricReport(args.protocol, [ecfg.seed], config_digest=ecfg.digest(ds.digest()))
        if args.protocol == "retrieval":
            if ecfg.task != "retrieval":
                raise ConfigError("retrieval evaluation needs a retrieval-trained checkpoint")
            for k, v in tr.retrieval_recalls(ds, ck.adapter).items():
                report.add(f"R@{k}", [v])
        else:
            if ecfg.task != "classification":
                raise ConfigError("base2new evaluation needs a classification checkpoint")
            sampled = kshot_sample(ds, ecfg.shots, ecfg.seed)
            for k, v in tr.base2new_metrics(sampled, ck.adapter, ecfg).items():
                report.add(k, [v])
    else:
        report = tr.run_protocol(args.protocol, ds, cfg, _seeds(args.seeds), workdir=out / "units")
    _write_report(report, out, f"report_{args.protocol}")
    return 0


def cmd_ablate(args) -> int:
    cfg, paths = resolve_train_config(args)
    data, out = _need(paths, "data"), _need(paths, "out")
    protocol = {"lambda": "lambda_sweep", "aggregator": "aggregator_ablation"}[args.sweep]
    _echo({"command": "ablate", "sweep": args.sweep, "config": cfg.to_json(),
           **{k: str(v) for k, v in paths.items()}}, out)
    ds = load_dataset(data)
    report = tr.run_protocol(protocol, ds, cfg, _seeds(args.seeds), workdir=out / "units")
    _write_report(report, out, f"report_{protocol}")
    return 0


def cmd_attn_export(args) -> int:
    paths = {k: v for k, v in vars(args).items() if k in _PATH_KEYS and v is not None}
    data, out, ckpt_path = _need(paths, "data"), _need(paths, "out"), _need(paths, "checkpoint")
    ck = tr.load_checkpoint(ckpt_path)
    _echo({"command": "attn-export", "config": ck.config.to_json(),
           **{k: str(v) for k, v in paths.items()}}, out)
    agg = tr.aggregator_from_store(ck.config, None if ck.aggregator is None else _dim(ck), ck.aggregator)
    if not isinstance(agg, AttentionAggregator) or ck.aggregator is None:
        raise StateError("checkpoint holds no attention aggregator")
    untrained = ck.aggregator.step == 0
    meta = {"checkpoint": str(ckpt_path), "untrained": untrained, "steps": ck.aggregator.step,
            "config_digest": ck.config.digest()}
    if untrained:
        print("warning: aggregator checkpoint has no optimizer steps (untrained)", file=sys.stderr)
    path = export_attention_scores(load_dataset(data), agg, out / "attention_scores.jsonl", meta)
    print(f"wrote {path}")
    return 0


def _dim(ck) -> int:
    return int(ck.aggregator["attn.wq"].shape[0])


# ---------------------------------------------------------------------------
# parser


def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat JSON config (TrainConfig keys plus data/out paths)")
    p.add_argument("--data", help="dataset directory (images.aapb, texts.aapb, manifest.json)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--lambda", dest="lam", type=float, help="distillation weight")
    p.add_argument("--seed", type=int)
    p.add_argument("--aggregator", choices=tr.AGGREGATOR_KINDS)
    p.add_argument("--task", choices=("classification", "retrieval"))
    p.add_argument("--optimizer", choices=("sgd", "adam"))
    p.add_argument("--shots", type=int)
    p.add_argument("--query-mode", dest="query_mode", choices=("mean", "global"))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="aape", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate the planted synthetic benchmark")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--images-per-class", dest="images_per_class", type=int)
    p.add_argument("--train-per-class", dest="train_per_class", type=int)
    p.add_argument("--prompts", type=int)
    p.add_argument("--captions-per-image", dest="captions_per_image", type=int)
    p.add_argument("--noise-fracs", dest="noise_fracs", help="relevant,redundant,irrelevant (sum 1)")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the aggregator, the generator, or both jointly")
    p.add_argument("--stage", required=True, choices=("aggregator", "generator", "joint"))
    p.add_argument("--epochs", type=int, help="epochs for the selected stage(s)")
    p.add_argument("--aggregator-ckpt", dest="aggregator_ckpt", help="stage-1 checkpoint for --stage generator")
    _train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint or run an evaluation protocol")
    p.add_argument("--protocol", required=True, choices=("base2new", "kshot", "retrieval", "gap"))
    p.add_argument("--checkpoint")
    p.add_argument("--seeds", help="comma-separated seeds for protocol runs (default 0,1,2)")
    _train_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="lambda or aggregator sweep over seeds")
    p.add_argument("--sweep", required=True, choices=("lambda", "aggregator"))
    p.add_argument("--seeds")
    _train_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("attn-export", help="write per-prompt attention scores as JSON lines")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_attn_export)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except AapeError as exc:
        print(f"aape: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
