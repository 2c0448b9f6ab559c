import csv
import json

import numpy as np
import pytest
from PIL import Image

from flatrecon.cli import ABLATION_HEADER, EXIT_CONFIG, EXIT_IO, ExperimentConfig, main
from flatrecon.autodiff import ConfigError
from flatrecon.datagen import load_dataset
from flatrecon.train import METRICS_HEADER, TRAIN_LOG_HEADER

SMALL = {"schema_version": 1, "data": {"counts": {"train": 4, "val": 2, "test": 2}},
         "train": {"K": 3, "epochs": 1}, "verify": {"n_instances": 3}}


@pytest.fixture()
def config(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(SMALL))
    return path


@pytest.fixture()
def data(tmp_path, config):
    out = tmp_path / "data"
    assert main(["gen-data", "--config", str(config), "--out", str(out)]) == 0
    return out


def test_gen_data_files(data):
    assert (data / "manifest.json").exists() and (data / "mask.json").exists()
    assert len(list(data.glob("*/*.fla"))) == 3 * 8


def test_gen_data_default_counts(tmp_path):
    assert main(["gen-data", "--out", str(tmp_path / "d")]) == 0
    assert len(list((tmp_path / "d").glob("*/*.fla"))) == 3 * 280


def test_gen_data_guard(data, config):
    before = (data / "manifest.json").read_bytes()
    assert main(["gen-data", "--config", str(config), "--out", str(data), "--seed", "7"]) == EXIT_IO
    assert (data / "manifest.json").read_bytes() == before


def test_seed_override_changes_every_sample(tmp_path, config, data):
    other = tmp_path / "other"
    assert main(["gen-data", "--config", str(config), "--out", str(other), "--seed", "7"]) == 0
    a, b = load_dataset(data), load_dataset(other)
    for split in a.splits:
        for s, t in zip(a.splits[split], b.splits[split]):
            assert not np.array_equal(s.x1, t.x1)


def test_config_rejections(tmp_path):
    for doc in ({"schema_version": 2}, {"schema_version": 1, "extra": 1},
                {"schema_version": 1, "train": {"bogus": 1}}, {"schema_version": 1, "train": {"epochs": 0}}):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_json(doc)
    bad = tmp_path / "bad.json"
    bad.write_text('{"schema_version": 1, "data": {"nope": 0}}')
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "x")]) == EXIT_CONFIG
    bad.write_text("{not json")
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "x")]) == EXIT_CONFIG


def test_config_roundtrip():
    cfg = ExperimentConfig.from_json(SMALL)
    again = ExperimentConfig.from_json(json.loads(json.dumps(cfg.to_json())))
    assert again.to_json() == cfg.to_json()


def test_train_eval_trajectory(tmp_path, config, data):
    run = tmp_path / "run"
    assert main(["train", "--config", str(config), "--dataset", str(data), "--out", str(run)]) == 0
    with open(run / "train_log.csv") as fh:
        assert next(csv.reader(fh)) == TRAIN_LOG_HEADER
    ev = tmp_path / "eval"
    assert main(["eval", "--checkpoint", str(run / "checkpoint"), "--dataset", str(data),
                 "--split", "val", "--out", str(ev)]) == 0
    with open(ev / "metrics_val.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == METRICS_HEADER and len(rows) == 3
    summary = json.loads((ev / "summary_val.json").read_text())
    assert summary["n"] == 2 and "stability" in summary
    tr = tmp_path / "traj"
    assert main(["trajectory", "--checkpoint", str(run / "checkpoint"), "--dataset", str(data),
                 "--sample", "1", "--out", str(tr)]) == 0
    with open(tr / "trajectory_test_0001.csv") as fh:
        assert len(list(csv.reader(fh))) == 1 + 4
    img = Image.open(tr / "trajectory_test_0001.png")
    assert img.mode == "L" and img.size == (32 * 5, 64)
    assert main(["train", "--config", str(config), "--dataset", str(data), "--out", str(run)]) == EXIT_IO
    assert main(["eval", "--checkpoint", str(tmp_path / "missing"), "--dataset", str(data)]) == EXIT_IO


def test_train_needs_dataset(tmp_path, config):
    assert main(["train", "--config", str(config), "--out", str(tmp_path / "r")]) == EXIT_CONFIG


def test_verify_ode(tmp_path, config):
    out = tmp_path / "v"
    assert main(["verify-ode", "--config", str(config), "--out", str(out)]) == 0
    report = json.loads((out / "verify_report.json").read_text())
    assert report["passed"] and report["n_instances"] == 3
    assert report["max_step_discrepancy"] <= 1e-12 and 0.8 <= report["slope_min"] <= report["slope_max"] <= 1.2


def test_ablate_table3(tmp_path, config, data):
    out = tmp_path / "ab"
    assert main(["ablate", "--config", str(config), "--dataset", str(data), "--out", str(out)]) == 0
    with open(out / "ablation.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ABLATION_HEADER and [r[0] for r in rows[1:]] == ["base", "grounded", "supervised", "flat"]
    assert all((out / name / "checkpoint" / "manifest.json").exists() for name, *_ in rows[1:])
