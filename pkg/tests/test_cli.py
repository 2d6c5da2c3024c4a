import dataclasses
import json

import pytest
import yaml

from gsrhypo.cli import OUT_ENV, main
from gsrhypo.config import DEFAULTS, load_config
from gsrhypo.errors import ConfigError
from gsrhypo.models import TrainConfig

FAST = [
    "--set", "data.synth.n_subjects=2",
    "--set", "data.synth.steps_per_subject=1500",
    "--set", "models.train.max_epochs=1",
    "--set", "models.train.n_trees=5",
    "--set", "models.train.gbdt_rounds=5",
    "--set", "eval.bootstrap_iterations=50",
]

# -- configuration ----------------------------------------------------------


def test_empty_config_file_gives_defaults(tmp_path):
    p = tmp_path / "empty.yaml"
    p.write_text("")
    cfg = load_config(p)
    assert cfg == load_config()
    assert cfg.fractions == (0.8, 0.1, 0.1)
    assert (cfg.width, cfg.stride, cfg.iqr_k) == (12, 1, 1.5)
    assert (cfg.filter.order, cfg.filter.cutoff) == (2, 0.1)
    assert cfg.train.batch_size == 64 and cfg.hypo_threshold == 70.0


def test_flag_beats_file(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text(yaml.safe_dump({"split": {"fractions": [0.7, 0.2, 0.1]}}))
    assert load_config(p).fractions == (0.7, 0.2, 0.1)
    assert load_config(p, {"split.fractions": [0.8, 0.1, 0.1]}).fractions == (0.8, 0.1, 0.1)


def test_fractions_must_sum_to_one():
    with pytest.raises(ConfigError, match="summing to 1"):
        load_config(None, {"split.fractions": [0.8, 0.1, 0.2]})


def test_unknown_key_lists_valid_keys():
    with pytest.raises(ConfigError) as err:
        load_config(None, {"preprocess.filter_ordr": 3})
    assert "filter_order" in str(err.value)


@pytest.mark.parametrize("key,value", [
    ("preprocess.filter_cutoff", 0.5),
    ("models.train.dropout_rate", 1.0),
    ("models.train.batch_size", 0),
    ("models.families", []),
    ("models.families", ["svm"]),
    ("windows.hypo_threshold", 80),
])
def test_invalid_values(key, value):
    with pytest.raises(ConfigError):
        load_config(None, {key: value})


def test_resolved_config_covers_every_knob():
    raw = load_config().resolved()
    fields = {f.name for f in dataclasses.fields(TrainConfig)} - {"seed", "class_weights"}
    assert fields <= set(raw["models"]["train"])
    assert set(raw) == set(DEFAULTS)


def test_family_overrides():
    cfg = load_config(None, {"models.overrides": {"lstm": {"learning_rate": 0.01}}})
    assert cfg.train_config("lstm").learning_rate == 0.01
    assert cfg.train_config("mlp").learning_rate == 1e-3


# -- exit codes -------------------------------------------------------------


def test_unknown_subcommand(capsys):
    assert main(["frobnicate"]) == 1
    assert "usage" in capsys.readouterr().err


def test_bad_flag_value_is_usage_error(tmp_path):
    assert main(["evaluate", "--feature-mode", "sideways", "--out", str(tmp_path)]) == 1


def test_config_error_exit(tmp_path):
    assert main(["evaluate", "--out", str(tmp_path), "--set", "split.fractions=[0.5,0.5,0.5]"]) == 1


def test_preprocess_without_glucose_exits_2_and_names_file(tmp_path, capsys):
    f = tmp_path / "p042-ws-training.xml"
    f.write_text('<patient id="42"><basis_gsr><event ts="01-01-2020 00:00:00" value="1.0"/></basis_gsr>'
                 "</patient>")
    assert main(["preprocess", str(f), "--out", str(tmp_path / "out")]) == 2
    assert "p042-ws-training.xml" in capsys.readouterr().err


def test_malformed_file_is_data_error(tmp_path):
    f = tmp_path / "broken.xml"
    f.write_text("<patient>")
    assert main(["ingest", str(f), "--out", str(tmp_path / "out")]) == 2


def test_report_without_evaluate(tmp_path):
    assert main(["report", "--out", str(tmp_path)]) == 1


# -- subcommands ------------------------------------------------------------


def test_synth_then_ingest_round_trip(tmp_path):
    out = tmp_path / "run"
    assert main(["synth", "--out", str(out), *FAST]) == 0
    files = sorted((out / "data").glob("*.csv"))
    assert [f.name for f in files] == ["syn00.csv", "syn01.csv"]
    assert main(["ingest", *map(str, files), "--out", str(out)]) == 0
    for f in files:
        assert (out / "ingested" / f.name).read_bytes() == f.read_bytes()


def test_preprocess_writes_series_and_cache(tmp_path):
    assert main(["preprocess", "--synthetic", "--out", str(tmp_path), *FAST]) == 0
    assert (tmp_path / "preprocessed" / "syn00.csv").read_text().startswith("timestamp,glucose,gsr,stage\n")
    assert list((tmp_path / "cache").glob("*/windows.csv"))


def test_ablate_restricted_to_requested_families(tmp_path, capsys):
    assert main(["ablate", "--synthetic", "--models", "lstm,cnn", "--out", str(tmp_path), *FAST]) == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    assert [(r["family"], r["feature_mode"]) for r in rep["models"]] == [
        ("cnn", "sequence"), ("cnn", "static"), ("lstm", "sequence"), ("lstm", "static")]
    assert (tmp_path / "resolved_config.yaml").exists()
    assert (tmp_path / "roc_cnn_static.csv").exists()
    assert sorted(p.name for p in (tmp_path / "models").iterdir()) == [
        "cnn_sequence.model", "cnn_static.model", "lstm_sequence.model", "lstm_static.model"]
    log_lines = (tmp_path / "run.log").read_text().splitlines()
    assert log_lines and all(" seed=7 " in line for line in log_lines)


def test_train_saves_models(tmp_path):
    args = ["train", "--synthetic", "--models", "lr,gbdt", "--feature-mode", "static", "--out", str(tmp_path)]
    assert main([*args, *FAST]) == 0
    assert sorted(p.name for p in (tmp_path / "models").iterdir()) == ["gbdt_static.model", "lr_static.model"]


def test_evaluate_deterministic_and_report_rerenders(tmp_path, monkeypatch):
    args = ["evaluate", "--synthetic", "--models", "lr,rf", "--seed", "3", *FAST]
    assert main([*args, "--out", str(tmp_path / "a")]) == 0
    monkeypatch.setenv(OUT_ENV, str(tmp_path / "b"))
    assert main(args) == 0
    a = (tmp_path / "a" / "report.json").read_bytes()
    assert a == (tmp_path / "b" / "report.json").read_bytes()
    # a cached rerun into the same directory changes nothing either
    assert main([*args, "--out", str(tmp_path / "a")]) == 0
    assert (tmp_path / "a" / "report.json").read_bytes() == a

    md = tmp_path / "a" / "report.md"
    before = md.read_bytes()
    md.unlink()
    assert main(["report", "--out", str(tmp_path / "a")]) == 0
    assert md.read_bytes() == before


def test_version(capsys):
    assert main(["--version"]) == 0
    assert "gsrhypo" in capsys.readouterr().out
