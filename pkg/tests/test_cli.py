import json

import pytest

from aape.cli import main
from aape.embedio import SynthConfig, save_dataset, synth_dataset
from aape.evalkit import parse_report
from aape.train import load_checkpoint

QUICK = {"epochs_stage1": 2, "epochs_stage2": 2, "heads": 2, "shots": 4}


@pytest.fixture
def data(tmp_path):
    d = tmp_path / "data"
    save_dataset(synth_dataset(SynthConfig(classes=6, dim=16, images_per_class=8, train_per_class=5,
                                           prompts=8, captions_per_image=2, seed=1)), d)
    return d


@pytest.fixture
def config(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(QUICK))
    return p


def test_synth_defaults_and_digests(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path / "a")]) == 0
    first = capsys.readouterr().out
    eff = json.loads((tmp_path / "a" / "effective_config.json").read_text())
    assert eff["synth"]["classes"] == 20 and eff["synth"]["dim"] == 64
    assert main(["synth", "--out", str(tmp_path / "b")]) == 0
    second = capsys.readouterr().out
    digests = lambda text: [line.split()[0] for line in text.splitlines() if line.endswith((".aapb", ".json"))
                            and len(line.split()[0]) == 64]
    assert digests(first) == digests(second) and len(digests(first)) == 3


def test_synth_bad_fracs_is_usage_error(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path), "--noise-fracs", "0.5,0.5,0.5"]) == 2
    assert "sum to 1" in capsys.readouterr().err
    assert main(["synth", "--out", str(tmp_path), "--noise-fracs", "a,b"]) == 2


def test_unknown_command_and_sweep(tmp_path):
    assert main(["frobnicate"]) == 2
    assert main(["ablate", "--sweep", "depth", "--data", "x", "--out", str(tmp_path)]) == 2


def test_generator_without_stage1_is_state_error(tmp_path, data, config):
    assert main(["train", "--stage", "generator", "--config", str(config), "--data", str(data),
                 "--out", str(tmp_path / "g")]) == 3


def test_lambda_zero_generator_runs_alone(tmp_path, data, config):
    out = tmp_path / "g"
    assert main(["train", "--stage", "generator", "--lambda", "0", "--config", str(config),
                 "--data", str(data), "--out", str(out)]) == 0
    ck = load_checkpoint(out / "checkpoint.aapc")
    assert ck.config.lam == 0 and ck.aggregator is None
    assert len(json.loads((out / "trace.json").read_text())) == 2


def test_zero_epochs_checkpoint_is_init(tmp_path, data, config):
    from aape.aggregate import AttentionAggregator
    out = tmp_path / "s1"
    assert main(["train", "--stage", "aggregator", "--epochs", "0", "--config", str(config),
                 "--data", str(data), "--out", str(out)]) == 0
    assert load_checkpoint(out / "checkpoint.aapc").aggregator.equals(AttentionAggregator(16, 2, seed=0).store)


def test_flags_override_file_and_env_overrides_last(tmp_path, data, config, monkeypatch):
    out = tmp_path / "s1"
    monkeypatch.setenv("AAPE_SEED", "7")
    assert main(["train", "--stage", "aggregator", "--config", str(config), "--seed", "3", "--lambda", "4",
                 "--data", str(data), "--out", str(out)]) == 0
    eff = json.loads((out / "effective_config.json").read_text())
    assert eff["config"]["seed"] == 7 and eff["config"]["lam"] == 4.0
    assert eff["config"]["epochs_stage1"] == 2


def test_unknown_config_key(tmp_path, data):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"learning_rate": 1}))
    assert main(["train", "--stage", "aggregator", "--config", str(bad), "--data", str(data),
                 "--out", str(tmp_path / "o")]) == 2


def test_config_file_can_carry_paths(tmp_path, data):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({**QUICK, "data": str(data), "out": str(tmp_path / "o"), "lambda": 0}))
    assert main(["train", "--stage", "generator", "--config", str(cfg)]) == 0
    assert (tmp_path / "o" / "checkpoint.aapc").exists()


def test_two_stage_then_eval_and_export(tmp_path, data, config):
    s1, s2 = tmp_path / "s1", tmp_path / "s2"
    common = ["--config", str(config), "--data", str(data)]
    assert main(["train", "--stage", "aggregator", *common, "--out", str(s1)]) == 0
    assert main(["train", "--stage", "generator", *common, "--out", str(s2),
                 "--aggregator-ckpt", str(s1 / "checkpoint.aapc")]) == 0
    ev = tmp_path / "ev"
    assert main(["eval", "--protocol", "base2new", "--checkpoint", str(s2 / "checkpoint.aapc"),
                 "--data", str(data), "--out", str(ev)]) == 0
    rep = parse_report(ev / "report_base2new.json")
    assert rep.metrics() == ["base", "new", "H"]
    first = (ev / "report_base2new.json").read_bytes()
    assert main(["eval", "--protocol", "base2new", "--checkpoint", str(s2 / "checkpoint.aapc"),
                 "--data", str(data), "--out", str(ev)]) == 0
    assert (ev / "report_base2new.json").read_bytes() == first
    assert (ev / "report_base2new.txt").read_text().startswith("# base2new")
    # retrieval eval on a classification checkpoint
    assert main(["eval", "--protocol", "retrieval", "--checkpoint", str(s2 / "checkpoint.aapc"),
                 "--data", str(data), "--out", str(ev)]) == 2
    ax = tmp_path / "ax"
    assert main(["attn-export", "--checkpoint", str(s1 / "checkpoint.aapc"), "--data", str(data),
                 "--out", str(ax)]) == 0
    lines = (ax / "attention_scores.jsonl").read_text().splitlines()
    assert json.loads(lines[0])["meta"]["untrained"] is False
    assert len(lines) == 1 + 6 * 8


def test_attn_export_flags_untrained(tmp_path, data, config):
    s0 = tmp_path / "s0"
    assert main(["train", "--stage", "aggregator", "--epochs", "0", "--config", str(config),
                 "--data", str(data), "--out", str(s0)]) == 0
    assert main(["attn-export", "--checkpoint", str(s0 / "checkpoint.aapc"), "--data", str(data),
                 "--out", str(tmp_path / "ax")]) == 0
    meta = json.loads((tmp_path / "ax" / "attention_scores.jsonl").read_text().splitlines()[0])["meta"]
    assert meta["untrained"] is True


def test_gap_protocol_single_number(tmp_path, data):
    assert main(["eval", "--protocol", "gap", "--data", str(data), "--out", str(tmp_path / "e")]) == 0
    rep = parse_report(tmp_path / "e" / "report_gap.json")
    assert rep.metrics() == ["modality_gap"] and rep.row("modality_gap").mean > 0


def test_retrieval_train_and_eval(tmp_path, data, config):
    out = tmp_path / "r"
    assert main(["train", "--stage", "generator", "--task", "retrieval", "--lambda", "0", "--config", str(config),
                 "--data", str(data), "--out", str(out)]) == 0
    assert main(["eval", "--protocol", "retrieval", "--checkpoint", str(out / "checkpoint.aapc"),
                 "--data", str(data), "--out", str(tmp_path / "e")]) == 0
    rep = parse_report(tmp_path / "e" / "report_retrieval.json")
    vals = [rep.row(f"R@{k}").mean for k in (1, 5, 10)]
    assert vals == sorted(vals)


def test_joint_stage(tmp_path, data, config):
    out = tmp_path / "j"
    assert main(["train", "--stage", "joint", "--config", str(config), "--data", str(data), "--out", str(out)]) == 0
    ck = load_checkpoint(out / "checkpoint.aapc")
    assert ck.config.mode == "joint" and ck.aggregator is not None and ck.adapter is not None


def test_ablate_is_byte_stable(tmp_path, data, config):
    args = ["ablate", "--sweep", "aggregator", "--seeds", "0", "--config", str(config), "--data", str(data)]
    assert main([*args, "--out", str(tmp_path / "a")]) == 0
    assert main([*args, "--out", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "report_aggregator_ablation.json").read_bytes()
    assert a == (tmp_path / "b" / "report_aggregator_ablation.json").read_bytes()
    # rerun in place resumes from saved units and merges to the same bytes
    assert main([*args, "--out", str(tmp_path / "a")]) == 0
    assert (tmp_path / "a" / "report_aggregator_ablation.json").read_bytes() == a
    rows = {m.split("/")[0] for m in parse_report(tmp_path / "a" / "report_aggregator_ablation.json").metrics()}
    assert rows == {"random", "mean", "mlp", "attention"}


def test_lambda_sweep_columns(tmp_path, data, config):
    assert main(["ablate", "--sweep", "lambda", "--seeds", "0", "--config", str(config), "--data", str(data),
                 "--out", str(tmp_path)]) == 0
    metrics = parse_report(tmp_path / "report_lambda_sweep.json").metrics()
    assert sorted({float(m.split("=")[1]) for m in metrics}) == [1, 3, 4, 5, 6, 7, 9]


def test_missing_data_is_data_error(tmp_path):
    assert main(["eval", "--protocol", "gap", "--data", str(tmp_path / "none"), "--out", str(tmp_path)]) == 4


def test_inputs_not_mutated(tmp_path, data, config):
    before = {p.name: p.read_bytes() for p in data.iterdir()}
    main(["train", "--stage", "generator", "--lambda", "0", "--config", str(config), "--data", str(data),
          "--out", str(tmp_path / "o")])
    assert {p.name: p.read_bytes() for p in data.iterdir()} == before


def test_bad_env_seed_is_config_error(tmp_path, monkeypatch):
    monkeypatch.setenv("AAPE_SEED", "x")
    assert main(["synth", "--out", str(tmp_path)]) == 2
