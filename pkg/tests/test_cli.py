"""Command-line interface tests: config resolution and validation, the
manifest round trip, artifact layout of each command, and exit codes
(0 success, 2 configuration/usage, 1 runtime failure)."""

import json

import numpy as np
import pytest

from deeplstm.cli import ConfigError, _resolve, _train_schema, run
from deeplstm.datagen import load_dataset, save_lattices, make_lattices
from deeplstm.model import load_model, save_model, xavier_init, ModelLayout


@pytest.fixture()
def corpus(tmp_path):
    """A small generated corpus plus its directory."""
    out = tmp_path / "data"
    code = run(["gen-data", "--out", str(out), "--num-states", "4",
                "--feature-dim", "3", "--count", "14", "--val-count", "6",
                "--seed", "3"])
    assert code == 0
    return out


def _train_args(corpus, out, extra=()):
    return ["train", "--data", str(corpus / "train.jsonl"),
            "--val", str(corpus / "val.jsonl"), "--out", str(out),
            "--hidden", "6", "--stack", "2", "--workers", "2",
            "--epochs", "1", "--mini-batch", "2", "--seed", "1",
            *extra]


# ------------------------------------------------------------- resolution

def test_resolve_rejects_unknown_keys():
    with pytest.raises(ConfigError, match="bogus"):
        _resolve(_train_schema(), {"bogus": 1, "hidden": [4]}, {})


def test_resolve_flag_overrides_file():
    cfg = _resolve(_train_schema(), {"hidden": [4], "lr": 0.5},
                   {"lr": 0.25})
    assert cfg["lr"] == 0.25
    assert cfg["hidden"] == [4]


def test_resolve_requires_hidden():
    with pytest.raises(ConfigError, match="hidden"):
        _resolve(_train_schema(), {}, {})


def test_resolve_validates_types():
    with pytest.raises(ConfigError, match="workers"):
        _resolve(_train_schema(), {"hidden": [4], "workers": "two"}, {})
    with pytest.raises(ConfigError, match="hidden"):
        _resolve(_train_schema(), {"hidden": [0]}, {})
    with pytest.raises(ConfigError, match="strategy"):
        _resolve(_train_schema(), {"hidden": [4], "strategy": "ring"}, {})


# --------------------------------------------------------------- gen-data

def test_gen_data_writes_corpus_and_manifest(corpus):
    train = load_dataset(corpus / "train.jsonl")
    val = load_dataset(corpus / "val.jsonl")
    assert len(train) == 14
    assert len(val) == 6
    manifest = json.loads((corpus / "manifest.json").read_text())
    assert manifest["command"] == "gen-data"
    assert manifest["config"]["num_states"] == 4
    assert set(manifest) == {"command", "version", "config"}


def test_gen_data_train_and_val_share_the_emission_model(corpus):
    # same Gaussians, fresh noise: per-state means agree across the splits
    train = load_dataset(corpus / "train.jsonl")
    val = load_dataset(corpus / "val.jsonl")
    t_frames = np.concatenate([u.frames for u in train])
    t_labels = np.concatenate([u.labels for u in train])
    v_frames = np.concatenate([u.frames for u in val])
    v_labels = np.concatenate([u.labels for u in val])
    for s in range(4):
        if (t_labels == s).sum() > 30 and (v_labels == s).sum() > 30:
            diff = t_frames[t_labels == s].mean(0) - v_frames[v_labels == s].mean(0)
            assert np.max(np.abs(diff)) < 1.0


# ------------------------------------------------------------------ train

def test_train_writes_models_report_and_manifest(corpus, tmp_path):
    out = tmp_path / "run"
    assert run(_train_args(corpus, out)) == 0
    final = load_model(out / "final.model")
    assert final.layout.lstm_layers == (6,)
    assert final.layout.input_dim == 6       # 3 features x stack 2
    assert (out / "ema.model").exists()
    assert (out / "metrics.csv").exists()
    assert (out / "loss_curves.png").exists()
    assert (out / "val_fer.png").exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "train"
    assert manifest["config"]["hidden"] == [6]
    assert manifest["config"]["num_classes"] == 4  # resolved and recorded


def test_manifest_reruns_as_config(corpus, tmp_path):
    first = tmp_path / "first"
    assert run(_train_args(corpus, first)) == 0
    second = tmp_path / "second"
    code = run(["train", "--config", str(first / "manifest.json"),
                "--data", str(corpus / "train.jsonl"),
                "--val", str(corpus / "val.jsonl"), "--out", str(second)])
    assert code == 0
    a = (first / "final.model").read_bytes()
    b = (second / "final.model").read_bytes()
    assert a == b  # identical configuration, identical model bits


def test_train_rejects_soft_weight(corpus, tmp_path, capsys):
    out = tmp_path / "run"
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"hidden": [6], "w_hard": 0.5, "w_soft": 0.5}))
    code = run(["train", "--config", str(cfg),
                "--data", str(corpus / "train.jsonl"),
                "--val", str(corpus / "val.jsonl"), "--out", str(out)])
    assert code == 2
    assert "w_soft" in capsys.readouterr().err


def test_unknown_config_key_fails_with_its_name(corpus, tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"hidden": [6], "leraning_rate": 0.1}))
    code = run(["train", "--config", str(cfg),
                "--data", str(corpus / "train.jsonl"),
                "--val", str(corpus / "val.jsonl"),
                "--out", str(tmp_path / "x")])
    assert code == 2
    assert "leraning_rate" in capsys.readouterr().err


def test_missing_required_field_is_usage_error(corpus, tmp_path, capsys):
    code = run(["train", "--data", str(corpus / "train.jsonl"),
                "--val", str(corpus / "val.jsonl"),
                "--out", str(tmp_path / "x")])
    assert code == 2
    assert "hidden" in capsys.readouterr().err


def test_missing_data_file_is_runtime_error(tmp_path, capsys):
    code = run(["train", "--data", str(tmp_path / "none.jsonl"),
                "--val", str(tmp_path / "none.jsonl"),
                "--out", str(tmp_path / "x"), "--hidden", "4"])
    assert code == 1


def test_bad_log_level_is_usage_error(monkeypatch, capsys):
    monkeypatch.setenv("DST_LOG", "verbose")
    code = run(["gen-data", "--out", "/tmp/whatever"])
    assert code == 2
    assert "DST_LOG" in capsys.readouterr().err


# ------------------------------------------------------------------- eval

def test_eval_reports_fer_and_speed(corpus, tmp_path):
    run_dir = tmp_path / "run"
    assert run(_train_args(corpus, run_dir)) == 0
    out = tmp_path / "eval"
    code = run(["eval", "--model", str(run_dir / "final.model"),
                "--data", str(corpus / "val.jsonl"), "--stack", "2",
                "--out", str(out)])
    assert code == 0
    result = json.loads((out / "eval.json").read_text())
    assert 0.0 <= result["fer"] <= 1.0
    assert result["ms_per_frame"] > 0.0
    assert result["utterances"] == 6


def test_eval_on_garbage_model_is_runtime_error(tmp_path, capsys):
    bad = tmp_path / "bad.model"
    bad.write_bytes(b"not a model at all")
    code = run(["eval", "--model", str(bad), "--data", str(bad),
                "--out", str(tmp_path / "out")])
    assert code == 1
    assert "magic" in capsys.readouterr().err


# --------------------------------------------------------------- distill

def test_distill_command(corpus, tmp_path):
    teacher_dir = tmp_path / "teacher"
    assert run(_train_args(corpus, teacher_dir,
                           extra=["--hidden", "8,8"])) == 0
    out = tmp_path / "student"
    code = run(["distill", "--teacher", str(teacher_dir / "final.model"),
                "--data", str(corpus / "train.jsonl"),
                "--val", str(corpus / "val.jsonl"), "--out", str(out),
                "--hidden", "5", "--stack", "2", "--workers", "2",
                "--epochs", "1", "--mini-batch", "2"])
    assert code == 0
    student = load_model(out / "student.model")
    assert student.layout.lstm_layers == (5,)
    assert student.layout.num_classes == 4


# -------------------------------------------------------------- layerwise

def test_layerwise_command(corpus, tmp_path):
    out = tmp_path / "grown"
    code = run(["layerwise", "--data", str(corpus / "train.jsonl"),
                "--val", str(corpus / "val.jsonl"), "--out", str(out),
                "--hidden", "5,5", "--stack", "2", "--workers", "2",
                "--epochs", "1", "--mini-batch", "2"])
    assert code == 0
    assert load_model(out / "stage1.model").layout.lstm_layers == (5,)
    assert load_model(out / "stage2.model").layout.lstm_layers == (5, 5)
    final = load_model(out / "final.model")
    assert final.layout.lstm_layers == (5, 5)
    assert (out / "metrics.csv").exists()


# --------------------------------------------------------------- transfer

def test_transfer_command(corpus, tmp_path):
    base_dir = tmp_path / "base"
    assert run(_train_args(corpus, base_dir)) == 0
    base = load_model(base_dir / "final.model")

    from deeplstm.datagen import stack_dataset
    stacked = stack_dataset(load_dataset(corpus / "train.jsonl"), 2)
    lat_path = tmp_path / "train.lat.jsonl"
    save_lattices(make_lattices(stacked, base, 2, seed=5), lat_path)

    out = tmp_path / "adapted"
    code = run(["transfer", "--base", str(base_dir / "final.model"),
                "--data", str(corpus / "train.jsonl"),
                "--lattices", str(lat_path),
                "--val", str(corpus / "val.jsonl"), "--out", str(out),
                "--stack", "2", "--workers", "2", "--epochs", "1",
                "--mini-batch", "2"])
    assert code == 0
    adapted = load_model(out / "adapted.model")
    assert adapted.layout == base.layout
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["lr"] == 0.01  # sequence-level default


def test_transfer_rejects_mismatched_lattices(corpus, tmp_path, capsys):
    base_dir = tmp_path / "base"
    assert run(_train_args(corpus, base_dir)) == 0
    lat_path = tmp_path / "short.lat.jsonl"
    from deeplstm.datagen import stack_dataset
    stacked = stack_dataset(load_dataset(corpus / "train.jsonl"), 2)
    smbr = make_lattices(stacked, None, 1, seed=0, num_classes=4)
    save_lattices(list(smbr.lattices)[:-1], lat_path)  # drop one
    code = run(["transfer", "--base", str(base_dir / "final.model"),
                "--data", str(corpus / "train.jsonl"),
                "--lattices", str(lat_path),
                "--val", str(corpus / "val.jsonl"),
                "--out", str(tmp_path / "x"), "--stack", "2"])
    assert code == 2
    assert "line up" in capsys.readouterr().err


# --------------------------------------------------------- allreduce-bench

def test_allreduce_bench_memory(tmp_path):
    out = tmp_path / "bench"
    code = run(["allreduce-bench", "--out", str(out), "--workers", "3",
                "--length", "1000", "--rounds", "2"])
    assert code == 0
    stats = json.loads((out / "bench.json").read_text())
    assert stats["verified_bit_exact"] is True
    assert stats["messages_observed"] == 2 * 3 * 2 * 2  # 2N(N-1) x rounds
    assert stats["ms_per_round"] > 0.0


def test_allreduce_bench_tcp(tmp_path):
    out = tmp_path / "bench"
    code = run(["allreduce-bench", "--out", str(out), "--workers", "2",
                "--length", "64", "--rounds", "1", "--transport", "tcp",
                "--base-port", "29870"])
    assert code == 0
    stats = json.loads((out / "bench.json").read_text())
    assert stats["verified_bit_exact"] is True
    assert stats["transport"] == "tcp"


# ---------------------------------------------------------------- general

def test_version_flag():
    # argparse handles --version via SystemExit; run() converts it to a code
    assert run(["--version"]) == 0


def test_no_command_is_usage_error():
    assert run([]) == 2


def test_model_and_data_must_agree(corpus, tmp_path, capsys):
    model = xavier_init(ModelLayout(5, (4,), 4), 0)
    path = tmp_path / "m.model"
    save_model(model, path)
    code = run(["distill", "--teacher", str(path),
                "--data", str(corpus / "train.jsonl"),
                "--val", str(corpus / "val.jsonl"),
                "--out", str(tmp_path / "x"), "--hidden", "4", "--stack", "2"])
    assert code == 2
    assert "stack" in capsys.readouterr().err
