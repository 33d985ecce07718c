import json

import numpy as np
import pytest

from fozo.core_math import derive_seed
from fozo.engine import read_metrics_csv
from fozo.harness.cli import apply_overrides, main, parse_value
from fozo.harness.experiment import (ExperimentConfig, MissingCheckpointError, auc, run_experiment,
                                     running_accuracy, source_stats_for, summarize_rows)
from fozo.model import forward_with_prompts, load_checkpoint, predict
from fozo.streams import StreamSchedule, build_stream

from conftest import CHECKPOINT

SHORT = {"segments": [{"kind": "gaussian-noise", "severity": 5, "n_batches": 2, "batch_size": 16},
                      {"kind": "contrast-shift", "severity": 5, "n_batches": 2, "batch_size": 16}]}


def config(tmp_path, **kw):
    base = dict(checkpoint=str(CHECKPOINT), schedule=SHORT, seeds=(0, 1), source_samples=256, out=str(tmp_path))
    base.update(kw)
    return ExperimentConfig(**base)


def test_running_accuracy_and_auc():
    assert running_accuracy([1, 0, 1]).tolist() == [1.0, 0.5, 2 / 3]
    assert auc([0.7] * 5) == pytest.approx(0.7)
    assert auc([0.4]) == 0.4
    # same mean accuracy, reached sooner, gives a larger area
    assert auc([0.9, 0.9, 0.5, 0.5]) > auc([0.5, 0.5, 0.9, 0.9])


def test_config_validation():
    with pytest.raises(ValueError):
        ExperimentConfig(arms=())
    with pytest.raises(ValueError):
        ExperimentConfig(seeds=())
    with pytest.raises(ValueError):
        ExperimentConfig(arms=("dynamic", "tent"))
    with pytest.raises(ValueError):
        ExperimentConfig(mode="offline")
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({"seedz": [1]})


def test_config_dict_round_trip():
    doc = json.loads(json.dumps(ExperimentConfig(arms=("fixed",), seeds=(3,)).to_dict()))
    cfg = ExperimentConfig.from_dict(doc)
    assert cfg.arms == ("fixed",) and cfg.seeds == (3,)
    assert cfg.optimizer.eta == 0.08 and cfg.task.noise_scale == 2.0


def test_default_schedules():
    assert ExperimentConfig().stream_schedule() == StreamSchedule.continual()
    assert ExperimentConfig(mode="mixed").stream_schedule().mixed


def test_missing_checkpoint_has_hint(tmp_path):
    with pytest.raises(MissingCheckpointError, match="fozo pretrain"):
        run_experiment(config(tmp_path, checkpoint=str(tmp_path / "absent.json")))


def test_no_adapt_equals_frozen_evaluation(tmp_path, model):
    cfg = config(tmp_path, arms=("no-adapt",), seeds=(0,))
    summary = run_experiment(cfg)
    stream = build_stream(cfg.task, cfg.stream_schedule(), derive_seed(0, 0x57))
    direct = np.mean([np.mean(predict(forward_with_prompts(model, None, b.inputs).logits) == b.labels)
                      for b in stream])
    assert summary["arms"]["no-adapt"]["mean_acc"] == pytest.approx(direct, abs=1e-15)
    assert summary["arms"]["no-adapt"]["fp_total"] == 4


def test_identical_runs_write_identical_csvs(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    run_experiment(config(a, arms=("dynamic", "fixed", "zero-lr")))
    run_experiment(config(b, arms=("dynamic", "fixed", "zero-lr")))
    names = sorted(p.name for p in a.glob("*.csv"))
    assert len(names) == 6
    for n in names:
        assert (a / n).read_bytes() == (b / n).read_bytes()


def test_summary_is_recomputable_from_csv(tmp_path):
    summary = run_experiment(config(tmp_path, arms=("dynamic",)))
    for run in summary["arms"]["dynamic"]["runs"]:
        rows = read_metrics_csv(tmp_path / run["csv"])
        again = summarize_rows(rows)
        assert all(again[k] == run[k] for k in again)
        assert run["fp_total"] == 2 * len(rows)
    doc = json.loads((tmp_path / "summary.json").read_text())
    assert doc["format"] == "fozo-summary" and doc["arms"]["dynamic"]["fp_total"] == 16


def test_quantized_and_reset_modes_run(tmp_path):
    s = run_experiment(config(tmp_path, arms=("dynamic",), seeds=(0,), quantized=True, mode="reset-on-switch"))
    rows = read_metrics_csv(tmp_path / "dynamic_seed0.csv")
    assert [r["reset"] for r in rows] == [False] * 4
    assert rows[2]["eps"] == rows[0]["eps"]
    assert 0 <= s["arms"]["dynamic"]["mean_acc"] <= 1


def test_source_stats_file_is_used(tmp_path, model):
    cfg = config(tmp_path)
    stats = source_stats_for(model, cfg)
    stats.save(tmp_path / "s.json")
    cfg.source_stats = str(tmp_path / "s.json")
    assert np.array_equal(source_stats_for(model, cfg).mu_deep, stats.mu_deep)


def test_parse_value_and_overrides():
    assert parse_value("3") == 3 and parse_value("[1, 2]") == [1, 2] and parse_value("abc") == "abc"
    doc = apply_overrides({}, ["optimizer.eta=0.01", "seeds=[0]", "checkpoint=x.json"])
    assert doc == {"optimizer": {"eta": 0.01}, "seeds": [0], "checkpoint": "x.json"}
    with pytest.raises(ValueError):
        apply_overrides({}, ["novalue"])
    with pytest.raises(ValueError):
        apply_overrides({"seeds": 1}, ["seeds.x=2"])


def test_cli_missing_checkpoint_exit_code(tmp_path, capsys):
    code = main(["adapt", "--set", f"checkpoint={tmp_path / 'none.json'}"])
    assert code == 2
    assert "fozo pretrain" in capsys.readouterr().err


def test_cli_unknown_key_exit_code(capsys):
    assert main(["experiment", "--set", "bogus=1"]) == 2


def test_cli_adapt_stats_quantize_experiment(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"checkpoint": str(CHECKPOINT), "schedule": SHORT, "source_samples": 256,
                               "arms": ["dynamic", "no-adapt"], "seeds": [0, 1]}))
    assert main(["stats", "--config", str(cfg), "--out", str(tmp_path / "stats.json")]) == 0
    assert main(["quantize", "--config", str(cfg), "--out", str(tmp_path / "q.json")]) == 0
    assert load_checkpoint(tmp_path / "q.json").kind == "int8"
    assert main(["adapt", "--config", str(cfg), "--seed", "1", "--set", f"source_stats={tmp_path / 'stats.json'}",
                 "--set", "optimizer.n_spsa=2", "--out", str(tmp_path / "m.csv")]) == 0
    rows = read_metrics_csv(tmp_path / "m.csv")
    assert len(rows) == 4 and all(r["fp_count"] == 4 for r in rows)
    assert main(["experiment", "--config", str(cfg), "--out", str(tmp_path / "exp")]) == 0
    summary = json.loads((tmp_path / "exp" / "summary.json").read_text())
    assert set(summary["arms"]) == {"dynamic", "no-adapt"}
    assert "mean acc" in capsys.readouterr().out


def test_cli_diagnose_writes_report(tmp_path):
    small = {"eps_values": [1e-3, 1e-2], "bias_draws": 5, "variance_trials": 20, "floor_steps": 2,
             "floor_seeds": [0], "source_samples": 128, "batch_size": 4}
    code = main(["diagnose", "--set", f"checkpoint={CHECKPOINT}", "--set", f"diagnostics={json.dumps(small)}",
                 "--out", str(tmp_path / "r.json")])
    assert code in (0, 1)
    report = json.loads((tmp_path / "r.json").read_text())
    assert report["eps_values"] == [1e-3, 1e-2] and len(report["final_grad_norms"]) == 1


def test_cli_pretrain_small(tmp_path):
    overrides = ["model.n_layers=2", "model.embed_dim=8", "model.n_patches=4", "model.n_classes=2",
                 "model.input_dim=3", "model.mlp_dim=8", "task.n_classes=2", "task.input_dim=3",
                 "task.n_patches=4", "task.noise_scale=0.5", "pretrain.n_train=512", "pretrain.n_val=256",
                 "pretrain.max_steps=100", "pretrain.eval_every=20"]
    args = ["pretrain", "--seed", "0", "--out", str(tmp_path / "ck.json")]
    for o in overrides:
        args += ["--set", o]
    assert main(args) == 0
    m = load_checkpoint(tmp_path / "ck.json")
    assert m.pretrain_seed == 0 and m.meta["source_accuracy"] >= 0.95
