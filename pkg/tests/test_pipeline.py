import csv
import json

import pytest

from cardioseg.analysis import SweepSpec, class_averaged, probe_l1, report, sweep_lambda
from cardioseg.data import build_disease_datasets
from cardioseg.metrics import cross_validate, evaluate
from cardioseg.segmenter import ModelConfig, file_sha256, load_checkpoint
from cardioseg.synth import merge_config, synth_generate
from cardioseg.training import ARMS, TrainConfig, read_index, run_matrix


@pytest.fixture(scope="module")
def world(tmp_path_factory):
    from conftest import TINY_SYNTH

    root = tmp_path_factory.mktemp("world")
    a = synth_generate(TINY_SYNTH, 0, root / "A")
    b = synth_generate(merge_config(TINY_SYNTH, {"dataset_name": "synth-b", "noise_sigma": 0.1}), 1, root / "B")
    ds = build_disease_datasets(a["train"], 32, 32)
    cfg = TrainConfig(epochs=2, batch_size=4, seed=0, model=ModelConfig(depth=1, base_channels=2, input_size=(32, 32)))
    runset = root / "runs"
    run_matrix(ds, cfg, ARMS, 2, runset, dataset_name="synth-acdc")
    return {"root": root, "A": a, "B": b, "ds": ds, "cfg": cfg, "runset": runset}


def test_cross_validate_matches_direct_evaluation(world):
    runset = world["runset"]
    hashes = {p: file_sha256(p) for p in runset.rglob("*.ckpt")}
    table = cross_validate(runset, world["A"]["test"])
    assert table.complete and len({(r["arm"], r["run"]) for r in table.case_rows}) == 8
    entry = read_index(runset)["runs"][0]
    direct = evaluate(load_checkpoint(runset / entry["checkpoint"]), world["A"]["test"], entry["arm"], run=entry["run"])
    mine = [r for r in table.case_rows if (r["arm"], r["run"]) == (entry["arm"], entry["run"])]
    assert mine == direct.case_rows
    cross = cross_validate(runset, world["B"]["test"])
    assert {r["dataset"] for r in cross.case_rows} == {"synth-b"}
    assert hashes == {p: file_sha256(p) for p in runset.rglob("*.ckpt")}


def test_cross_validate_records_bad_checkpoint(world, tmp_path):
    import shutil

    copy = tmp_path / "runs"
    shutil.copytree(world["runset"], copy)
    entry = read_index(copy)["runs"][0]
    (copy / entry["checkpoint"]).write_bytes(b"garbage")
    table = cross_validate(copy, world["A"]["test"])
    assert len(table.failures) == 1 and table.failures[0]["arm"] == entry["arm"]
    assert len({(r["arm"], r["run"]) for r in table.case_rows}) == 7


def test_sweep_counts_and_averages(world, tmp_path):
    spec = SweepSpec("ideal", [0.1, 0.3], "mts+itd", 2)
    path, rows, n_models = sweep_lambda(spec, world["cfg"], world["ds"], world["A"]["test"], tmp_path)
    assert n_models == 4 and [r["lambda"] for r in rows] == [0.1, 0.3]
    with open(path) as fh:
        assert len(list(csv.DictReader(fh))) == 2
    from cardioseg.metrics import MetricsTable

    table = MetricsTable.from_cases_csv(tmp_path / "lambda_0.1" / "metrics_cases.csv")
    dice, hd = class_averaged(table.rows())
    assert rows[0]["mean_dice_avg"] == pytest.approx(dice) and rows[0]["mean_hd_avg"] == pytest.approx(hd)


@pytest.mark.parametrize("spec", [
    SweepSpec("ideal", [0.3, 0.1]),
    SweepSpec("ideal", [0.0, 0.2]),
    SweepSpec("ideal", [0.2], arm="mts+ctd"),
    SweepSpec("ideal", []),
])
def test_sweep_spec_rejects(spec):
    with pytest.raises(ValueError):
        spec.validate()


def test_probe_curves_and_summary(world, tmp_path):
    curve_path, _, summary = probe_l1(world["runset"], tmp_path)
    with open(curve_path) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4 * 2 * 2  # arms x seeds x epochs
    assert {s["strategy"] for s in summary} == {"NTS", "MTS"}
    assert all(s["n_pairs"] == 2 for s in summary)
    with pytest.raises(FileNotFoundError):
        probe_l1(tmp_path / "nothing", tmp_path / "o")


def test_report_is_deterministic_and_labelled(world, tmp_path):
    runset = world["runset"]
    cross_validate(runset, world["A"]["test"]).save(runset / "eval" / "synth-acdc")
    m1 = report([runset], tmp_path / "r1")
    report([runset], tmp_path / "r2")
    for f in sorted((tmp_path / "r1").iterdir()):
        assert f.read_bytes() == (tmp_path / "r2" / f.name).read_bytes()
    assert not m1["partial"] and m1["runs_per_arm"] == {a: 2 for a in ("mts+ctd", "mts+itd", "nts+ctd", "nts+itd")}
    with open(tmp_path / "r1" / "diagonal.csv") as fh:
        diag = list(csv.DictReader(fh))
    assert {r["comparison"] for r in diag} == {"NTS+CTD vs MTS+ITD"}
    assert len(diag) == 3 * 2 * 3 * 2  # disease(+ALL) x phase x class x metric
    labels = [a["comparison"] for a in m1["artifacts"]["ablations"]]
    assert labels == ["NTS+CTD vs MTS+CTD", "NTS+ITD vs MTS+ITD", "NTS+CTD vs NTS+ITD", "MTS+CTD vs MTS+ITD"]


def test_report_flags_missing_arms(world, tmp_path):
    ds, cfg = world["ds"], world["cfg"]
    runset = tmp_path / "half"
    run_matrix(ds, cfg, [("MTS", True)], 1, runset)
    cross_validate(runset, world["A"]["test"]).save(runset / "eval" / "synth-acdc")
    m = report([runset], tmp_path / "rep")
    assert m["partial"] and "NTS+CTD vs MTS+ITD" in m["missing_comparisons"]
    assert json.loads((tmp_path / "rep" / "report_manifest.json").read_text())["partial"] is True
