import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from lleaks import cli
from lleaks.config import ConfigError, apply_seed_override, load_config

CONF = """
[dataset]
name = toy
n = 120
num_classes = 4
seed = 7

[split]
target_train = 40
shadow_train = 60
test = 20
seed = 11

[target]
arch = mlp-tabular
learning_rate = 0.15
momentum = 0.9
batch_size = 10
epochs = 30
seed = 21

[shadow]
arch = mlp-tabular
temperature = 2.0
alpha = 0.3
beta = 0.7
learning_rate = 0.15
momentum = 0.9
batch_size = 10
epochs = 30
seed = 31

[attack]
learning_rate = 0.2
momentum = 0.9
batch_size = 8
epochs = 30
seed = 41
balance_seed = 51
eval_seed = 61
eval_cap = 10

[experiment]
seeds = 1
epoch_grid = 5,15,30
missing_class = 2
workers = 1
history_cap = 0
"""


@pytest.fixture
def conf(tmp_path):
    path = tmp_path / "run.conf"
    path.write_text(CONF)
    return path


@pytest.fixture
def out(tmp_path):
    return tmp_path / "out"


def run_cli(*argv):
    return cli.main([str(a) for a in argv])


PHASES = ["prepare-data", "train-target", "distill-shadow",
          "build-attack", "train-attack", "evaluate"]


def run_all(conf, out):
    for phase in PHASES:
        assert run_cli(phase, "--config", conf, "--out", out) == 0


def test_config_parses(conf):
    cfg = load_config(conf)
    assert cfg.split_sizes == (40, 60, 20)
    assert cfg.distill.temperature == 2.0
    assert cfg.attack_sgd.epochs == 30
    assert len(cfg.config_hash()) == 64


def test_config_missing_seed_rejected(tmp_path):
    bad = tmp_path / "bad.conf"
    bad.write_text(CONF.replace("seed = 21\n", "", 1))
    with pytest.raises(ConfigError, match="seed"):
        load_config(bad)


def test_config_unknown_dataset(tmp_path):
    bad = tmp_path / "bad.conf"
    bad.write_text(CONF.replace("name = toy", "name = cifar"))
    with pytest.raises(ConfigError, match="unknown dataset"):
        load_config(bad)


def test_seed_override_changes_hash(conf):
    cfg = load_config(conf)
    over = apply_seed_override(cfg, 123)
    assert over.split_seed == 124
    assert over.target_sgd.seed == 125
    assert over.config_hash() != cfg.config_hash()


def test_prepare_data_records_sizes(conf, out, capsys):
    assert run_cli("prepare-data", "--config", conf, "--out", out) == 0
    doc = json.loads((out / "manifest.json").read_text())
    info = doc["phases"]["prepare-data"]["info"]
    assert (info["target_train"], info["shadow_train"], info["test"]) == (40, 60, 20)


def test_prepare_data_idempotent_hashes(conf, out):
    assert run_cli("prepare-data", "--config", conf, "--out", out) == 0
    first = json.loads((out / "manifest.json").read_text())
    assert run_cli("prepare-data", "--config", conf, "--out", out) == 0
    second = json.loads((out / "manifest.json").read_text())
    a = first["phases"]["prepare-data"]["artifacts"]
    b = second["phases"]["prepare-data"]["artifacts"]
    assert {k: v["sha256"] for k, v in a.items()} == {k: v["sha256"] for k, v in b.items()}


def test_missing_prerequisite_names_phase(conf, out, capsys):
    assert run_cli("prepare-data", "--config", conf, "--out", out) == 0
    code = run_cli("build-attack", "--config", conf, "--out", out)
    assert code == cli.EXIT_MISSING
    assert "distill-shadow" in capsys.readouterr().err


def test_deleted_artifact_detected(conf, out, capsys):
    assert run_cli("prepare-data", "--config", conf, "--out", out) == 0
    assert run_cli("train-target", "--config", conf, "--out", out) == 0
    (out / "target.ckpt").unlink()
    code = run_cli("distill-shadow", "--config", conf, "--out", out)
    assert code == cli.EXIT_INTEGRITY


def test_tampered_artifact_fails_integrity(conf, out, capsys):
    assert run_cli("prepare-data", "--config", conf, "--out", out) == 0
    assert run_cli("train-target", "--config", conf, "--out", out) == 0
    path = out / "target.ckpt"
    blob = bytearray(path.read_bytes())
    blob[-1] ^= 0xFF
    path.write_bytes(bytes(blob))
    code = run_cli("distill-shadow", "--config", conf, "--out", out)
    assert code == cli.EXIT_INTEGRITY
    assert "stale artifact" in capsys.readouterr().err


def test_full_pipeline_report_schema(conf, out):
    run_all(conf, out)
    doc = json.loads((out / "report.json").read_text())
    assert set(doc) == {"metrics", "confusion", "per_class", "metadata"}
    assert set(doc["metrics"]) == {"ap", "ar", "f1"}
    assert set(doc["confusion"]) == {"tp", "fp", "tn", "fn"}
    counts = doc["confusion"]
    assert sum(counts.values()) == doc["metadata"]["members"] + doc["metadata"]["nonmembers"]


def test_report_command(conf, out, capsys):
    run_all(conf, out)
    assert run_cli("report", "--out", out) == 0
    text = capsys.readouterr().out
    for needle in ("AP", "AR", "F1", "config hash"):
        assert needle in text


def test_report_empty_manifest(tmp_path, capsys):
    empty = tmp_path / "empty"
    empty.mkdir()
    assert run_cli("report", "--out", empty) == 0
    assert "no runs" in capsys.readouterr().out


def test_report_tampered_artifact_nonzero(conf, out, capsys):
    run_all(conf, out)
    blob = bytearray((out / "shadow.ckpt").read_bytes())
    blob[-2] ^= 0x1
    (out / "shadow.ckpt").write_bytes(bytes(blob))
    assert run_cli("report", "--out", out) == cli.EXIT_INTEGRITY


def test_lock_excludes_concurrent_run(conf, out):
    out.mkdir(parents=True)
    (out / ".lock").write_text("12345\n")
    assert run_cli("prepare-data", "--config", conf, "--out", out) == cli.EXIT_USAGE
    (out / ".lock").unlink()
    assert run_cli("prepare-data", "--config", conf, "--out", out) == 0


def test_unknown_experiment_rejected(conf, out, capsys):
    assert run_cli("prepare-data", "--config", conf, "--out", out) == 0
    with pytest.raises(SystemExit):
        run_cli("experiment", "nonsense", "--config", conf, "--out", out)


def test_experiment_ablation_csv_schema(conf, out):
    assert run_cli("prepare-data", "--config", conf, "--out", out) == 0
    assert run_cli("experiment", "ablation", "--config", conf, "--out", out) == 0
    lines = (out / "experiment_ablation.csv").read_text().splitlines()
    header = lines[0].split(",")
    assert header[:3] == ["arm", "seed", "f1"]
    # one seed x three arms
    assert len(lines) == 1 + 3
    doc = json.loads((out / "experiment_ablation.json").read_text())
    assert set(doc["summary"]) == {"label", "softmax", "mi"}


def test_experiment_overfit_sweep_csv_columns(conf, out):
    assert run_cli("prepare-data", "--config", conf, "--out", out) == 0
    assert run_cli("experiment", "overfit-sweep", "--config", conf, "--out", out) == 0
    lines = (out / "experiment_overfit-sweep.csv").read_text().splitlines()
    assert lines[0] == "epochs,target_overfit,shadow_overfit,f1"
    assert len(lines) == 1 + 3  # grid 5,15,30


def test_experiment_missing_class_json(conf, out):
    assert run_cli("prepare-data", "--config", conf, "--out", out) == 0
    assert run_cli("experiment", "missing-class", "--config", conf, "--out", out) == 0
    doc = json.loads((out / "experiment_missing-class.json").read_text())
    acc = doc["removed_class_accuracy"]
    assert set(acc) == {"distilled", "distilled_with_bias", "label_baseline"}


def test_out_dir_from_environment(conf, tmp_path, monkeypatch):
    env_out = tmp_path / "envout"
    monkeypatch.setenv("LLEAKS_OUT", str(env_out))
    assert run_cli("prepare-data", "--config", conf) == 0
    assert (env_out / "dataset.bin").is_file()


def test_no_out_dir_is_usage_error(conf, monkeypatch, capsys):
    monkeypatch.delenv("LLEAKS_OUT", raising=False)
    assert run_cli("prepare-data", "--config", conf) == cli.EXIT_USAGE
    assert "output directory" in capsys.readouterr().err
