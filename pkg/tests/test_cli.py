import json

import pytest

from cardioseg.cli import main


@pytest.fixture
def config(tmp_path, tiny_synth):
    cfg = {
        "data": {"synth": tiny_synth},
        "model": {"depth": 1, "base_channels": 2},
        "train": {"epochs": 1, "batch_size": 4, "runs": 1},
        "sweep": {"lambdas": [0.2, 0.3], "runs": 1},
    }
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return str(path)


def test_usage_errors_exit_1(capsys, config):
    assert main([]) == 1
    assert main(["train"]) == 1
    assert main(["bogus"]) == 1
    assert main(["train", "--config", config, "--out", "x"]) == 1  # no train manifest
    assert main(["sweep", "--config", config, "--out", "x", "--lambdas", "0.4,0.2"]) == 1
    assert main(["train", "--config", config, "--out", "x", "--set", "novalue"]) == 1


def test_runtime_errors_exit_2(tmp_path, config):
    assert main(["eval", "--config", config, "--runset", str(tmp_path / "none"),
                 "--test-manifest", str(tmp_path / "none.json")]) == 2
    (tmp_path / "bad.json").write_text('{"nonsense": {}}')
    assert main(["synth", "--config", str(tmp_path / "bad.json"), "--out", str(tmp_path / "d")]) == 2


def test_full_pipeline(tmp_path, config, capsys):
    data, runs, rep = tmp_path / "data", tmp_path / "runs", tmp_path / "report"
    assert main(["synth", "--config", config, "--seed", "1", "--out", str(data)]) == 0
    assert (data / "train_manifest.json").is_file()
    assert main(["train", "--config", config, "--train-manifest", str(data / "train_manifest.json"),
                 "--arm", "nts+ctd", "--arm", "mts+itd", "--out", str(runs)]) == 0
    index = json.loads((runs / "index.json").read_text())
    assert sorted(r["arm"] for r in index["runs"]) == ["mts+itd", "nts+ctd"]
    assert json.loads((runs / "config.json").read_text())["model"]["base_channels"] == 2
    assert main(["eval", "--config", config, "--runset", str(runs),
                 "--test-manifest", str(data / "test_manifest.json")]) == 0
    assert (runs / "eval" / "synth-acdc" / "metrics.csv").is_file()
    assert main(["crossval", "--runset", str(runs), "--test-manifest", str(data / "test_manifest.json"),
                 "--out", str(tmp_path / "cv")]) == 0
    assert main(["probe", "--runset", str(runs), "--out", str(tmp_path / "probe")]) == 0
    assert main(["report", "--runset", str(runs), "--out", str(rep)]) == 0
    assert json.loads((rep / "report_manifest.json").read_text())["partial"] is True
    assert main(["sweep", "--config", config, "--train-manifest", str(data / "train_manifest.json"),
                 "--test-manifest", str(data / "test_manifest.json"), "--out", str(tmp_path / "sw")]) == 0
    assert (tmp_path / "sw" / "sweep.csv").read_text().count("\n") == 3


def test_set_override(tmp_path, config):
    data = tmp_path / "data"
    assert main(["synth", "--config", config, "--set", "data.synth.dataset_name=\"other\"", "--out", str(data)]) == 0
    assert json.loads((data / "test_manifest.json").read_text())["dataset_name"] == "other"


def test_literal_center_range_flag(tmp_path, config):
    data, runs = tmp_path / "data", tmp_path / "runs"
    assert main(["synth", "--config", config, "--out", str(data)]) == 0
    assert main(["train", "--config", config, "--train-manifest", str(data / "train_manifest.json"),
                 "--arm", "mts+itd", "--paper-literal-center-range", "--out", str(runs)]) == 0
    saved = json.loads((runs / "config.json").read_text())
    assert saved["mask"]["paper_literal_center_range"] is True
    index = json.loads((runs / "index.json").read_text())
    assert index["config"]["mask"]["paper_literal_center_range"] is True
