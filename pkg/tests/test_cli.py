import json

import pytest

from provgraph.cli import build_parser, main
from provgraph.hetgraph import deserialize

from conftest import FIXTURES

SUBCOMMANDS = ["convert", "stats", "generate", "featurize", "train", "evaluate", "report"]
TINY = {"epochs": 2, "hidden_dim": 8, "feature_mode": "degree", "batch_size": 4, "learning_rate": 0.01}


@pytest.fixture
def dataset(tmp_path):
    out = tmp_path / "ds"
    assert main(["-q", "generate", "--vector", "brute-force", "--benign", "6", "--attack", "6",
                 "--seed", "1", "--scale", "0.01", "--out", str(out)]) == 0
    return out


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(TINY))
    return path


def test_convert_w3c(tmp_path, capsys):
    out = tmp_path / "g.pgrf"
    assert main(["convert", "--in", str(FIXTURES / "w3c_browser.json"), "--out", str(out)]) == 0
    assert out.exists()
    assert deserialize(out.read_bytes()).num_nodes > 0
    assert capsys.readouterr().out.startswith("nodes=")


def test_convert_auto_matches_explicit_spade(tmp_path):
    src = str(FIXTURES / "spade_array.json")
    assert main(["-q", "convert", "--in", src, "--format", "auto", "--out", str(tmp_path / "a")]) == 0
    assert main(["-q", "convert", "--in", src, "--format", "spade", "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_convert_json_then_stats(tmp_path, capsys):
    out = tmp_path / "g.json"
    assert main(["-q", "convert", "--in", str(FIXTURES / "w3c_minimal.json"), "--to", "json",
                 "--label", "attack", "--out", str(out)]) == 0
    capsys.readouterr()
    assert main(["stats", "--in", str(out)]) == 0
    st = json.loads(capsys.readouterr().out)
    assert st["num_nodes"] > 0
    assert deserialize(out.read_bytes()).label.name == "ATTACK"


def test_truncated_json(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_bytes((FIXTURES / "w3c_minimal.json").read_bytes()[:-15])
    assert main(["convert", "--in", str(bad), "--out", str(tmp_path / "x")]) == 2
    err = capsys.readouterr().err
    assert "line" in err and "column" in err
    assert not (tmp_path / "x").exists()


def test_missing_input(tmp_path):
    assert main(["-q", "convert", "--in", str(tmp_path / "nope.json"), "--out", str(tmp_path / "x")]) == 3


def test_unknown_vector(tmp_path, capsys):
    assert main(["generate", "--vector", "phishing", "--out", str(tmp_path)]) == 1
    assert "unknown attack vector" in capsys.readouterr().err
    assert not any(tmp_path.iterdir())


def test_generate_rerun_identical(tmp_path, dataset):
    files = sorted(p.relative_to(dataset) for p in dataset.rglob("*.pgrf"))
    assert len(files) == 12
    again = tmp_path / "again"
    assert main(["-q", "generate", "--vector", "brute-force", "--benign", "6", "--attack", "6",
                 "--seed", "1", "--scale", "0.01", "--out", str(again)]) == 0
    assert (again / "manifest.json").read_bytes() == (dataset / "manifest.json").read_bytes()


@pytest.mark.parametrize("cmd", SUBCOMMANDS)
def test_help_exits_zero(cmd, capsys):
    assert main([cmd, "--help"]) == 0
    text = capsys.readouterr().out
    sub = build_parser()._subparsers._group_actions[0].choices[cmd]
    for action in sub._actions:
        for flag in action.option_strings:
            assert flag in text


def test_no_subcommand():
    assert main([]) == 1


def test_train_missing_config(tmp_path, dataset):
    assert main(["-q", "train", "--dataset", str(dataset), "--config", str(tmp_path / "missing.json"),
                 "--out", str(tmp_path / "run")]) == 3


def test_train_one_fold(tmp_path, dataset, config):
    assert main(["-q", "train", "--dataset", str(dataset), "--config", str(config), "--folds", "1",
                 "--out", str(tmp_path / "run")]) == 1
    assert not (tmp_path / "run").exists()


def test_train_bad_config_field(tmp_path, dataset):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"epochz": 3}))
    assert main(["-q", "train", "--dataset", str(dataset), "--config", str(cfg),
                 "--out", str(tmp_path / "run")]) == 2


def test_train_evaluate_report(tmp_path, dataset, config, capsys):
    run = tmp_path / "run"
    assert main(["-q", "train", "--dataset", str(dataset), "--config", str(config), "--folds", "2",
                 "--out", str(run)]) == 0
    printed = capsys.readouterr().out
    assert "F1" in printed
    summary = json.loads((run / "summary.json").read_text())
    assert len(summary["folds"]) == 2
    ckpt = run / "checkpoints" / "fold0" / "best.ckpt"
    assert ckpt.exists() and (run / "checkpoints" / "fold1" / "last.ckpt").exists()

    assert main(["-q", "evaluate", "--checkpoint", str(ckpt), "--dataset", str(dataset),
                 "--out", str(tmp_path / "m.json")]) == 0
    metrics = json.loads(capsys.readouterr().out)
    assert metrics == json.loads((tmp_path / "m.json").read_text())
    assert metrics["tp"] + metrics["fp"] + metrics["fn"] + metrics["tn"] == 12

    for fmt in ("text", "json", "csv"):
        out = tmp_path / f"r.{fmt}"
        assert main(["report", "--summary", str(run / "summary.json"), "--format", fmt, "--out", str(out)]) == 0
        assert out.stat().st_size > 0
    assert main(["report", "--summary", str(run / "summary.json")]) == 0
    assert capsys.readouterr().out == printed


def test_report_rejects_non_summary(tmp_path):
    bad = tmp_path / "s.json"
    bad.write_text("{}")
    assert main(["-q", "report", "--summary", str(bad)]) == 2


def test_featurize(tmp_path, capsys):
    out = tmp_path / "f.pgrf"
    assert main(["featurize", "--in", str(FIXTURES / "w3c_browser.json"), "--out", str(out),
                 "--mode", "combined", "--k", "2"]) == 0
    assert "feature_dim=" in capsys.readouterr().out
    assert out.read_bytes()[:4] == b"PGRF"
