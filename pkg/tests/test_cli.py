"""End-to-end command-line behavior: artifacts on disk and exit codes."""

import json

import numpy as np
import pytest

from nocguard import cli
from nocguard.dataset import load_dataset
from nocguard.model import load_checkpoint
from nocguard.simulator import load_trace


def run(argv):
    return cli.main(argv)


def test_topo_command_writes_json(tmp_path, capsys):
    out = tmp_path / "topo.json"
    assert run(["topo", "--kind", "mesh2d", "--n", "4", "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert doc["n"] == 4
    assert sorted(doc["mc_nodes"]) == [0, 3, 12, 15]
    assert "mc=[0, 3, 12, 15]" in capsys.readouterr().out


def test_topo_bad_size_exit_code(tmp_path):
    out = tmp_path / "t.json"
    assert run(["topo", "--kind", "mesh2d", "--n", "0", "--out", str(out)]) == 2


def test_simulate_writes_trace(tmp_path):
    cfg = tmp_path / "sim.json"
    cfg.write_text(json.dumps({
        "topology": {"kind": "mesh2d", "n": 4},
        "profile": "uniform-low",
        "duration": 300,
        "attack": {"mips": [5], "vips": [0], "pir": 0.05},
    }))
    out = tmp_path / "run.ngtr"
    assert run(["--seed", "3", "simulate", "--config", str(cfg),
                "--out", str(out)]) == 0
    tr = load_trace(out)
    assert tr.num_nodes == 16
    assert tr.attack.mips == (5,)


def test_simulate_missing_config_is_io_error(tmp_path):
    assert run(["simulate", "--config", str(tmp_path / "nope.json"),
                "--out", str(tmp_path / "x.ngtr")]) == 3


def test_simulate_invalid_json_is_config_error(tmp_path):
    cfg = tmp_path / "bad.json"
    cfg.write_text("{not json")
    assert run(["simulate", "--config", str(cfg),
                "--out", str(tmp_path / "x.ngtr")]) == 2


def test_simulate_bad_scenario_is_validation_error(tmp_path):
    cfg = tmp_path / "sim.json"
    cfg.write_text(json.dumps({
        "topology": {"kind": "mesh2d", "n": 4},
        "duration": 100,
        "attack": {"mips": [0], "vips": [3], "pir": 0.05},  # MC as MIP
    }))
    assert run(["simulate", "--config", str(cfg),
                "--out", str(tmp_path / "x.ngtr")]) == 4


def test_full_pipeline_through_cli(tmp_path):
    """gen-dataset -> train -> eval -> infer on a miniature configuration."""
    dcfg = tmp_path / "data.json"
    dcfg.write_text(json.dumps({
        "topology": {"kind": "mesh2d", "n": 4},
        "profiles": ["nearest-mc"],
        "mappings_per_profile": 1,
        "duration": 300,
        "l": 60,
    }))
    data = tmp_path / "d.ngds"
    assert run(["--seed", "5", "gen-dataset", "--config", str(dcfg),
                "--out", str(data)]) == 0
    ds = load_dataset(data)
    assert len(ds.graphs) == 6

    tcfg = tmp_path / "train.json"
    tcfg.write_text(json.dumps({
        "model": {"series_len": 60, "conv_channels": [4, 4],
                  "conv_kernels": [5, 5], "conv_strides": [1, 1],
                  "pool_kernels": [3, 3], "pool_strides": [2, 2],
                  "conv_dropout": 0.0, "graph_widths": [8],
                  "fc_widths": [8, 1], "fc_dropout": 0.0},
        "train": {"batch_size": 4, "max_epochs": 2, "val_fraction": 0.34},
    }))
    ckpt = tmp_path / "m.ngck"
    hist = tmp_path / "hist.csv"
    assert run(["train", "--data", str(data), "--config", str(tcfg),
                "--out", str(ckpt), "--history", str(hist)]) == 0
    net = load_checkpoint(ckpt)
    assert net.meta["epochs_run"] >= 1
    rows = hist.read_text().strip().splitlines()
    assert rows[0] == "epoch,train_loss,val_loss,lr"
    assert len(rows) - 1 == net.meta["epochs_run"]

    report = tmp_path / "report.json"
    assert run(["eval", "--model", str(ckpt), "--data", str(data),
                "--split", "all", "--report", str(report)]) == 0
    rep = json.loads(report.read_text())
    assert {"detection", "localization"} <= set(rep)
    assert 0.0 <= rep["detection"]["accuracy"] <= 1.0

    topo_json = tmp_path / "t.json"
    assert run(["topo", "--kind", "mesh2d", "--n", "4",
                "--out", str(topo_json)]) == 0
    scfg = tmp_path / "one.json"
    scfg.write_text(json.dumps({
        "topology": {"kind": "mesh2d", "n": 4},
        "profile": "nearest-mc",
        "duration": 300,
        "attack": {"mips": [5], "vips": [0], "pir": 0.05},
    }))
    trace = tmp_path / "one.ngtr"
    assert run(["simulate", "--config", str(scfg), "--out", str(trace)]) == 0
    verdict = tmp_path / "verdict.json"
    assert run(["infer", "--model", str(ckpt), "--trace", str(trace),
                "--topo", str(topo_json), "--out", str(verdict)]) == 0
    v = json.loads(verdict.read_text())
    assert v["g_pred"] in (0, 1)
    assert len(v["n_scores"]) == 16
    assert v["g_pred"] == int(any(v["n_pred"]))


def test_eval_missing_model_is_io_error(tmp_path):
    assert run(["eval", "--model", str(tmp_path / "no.ngck"),
                "--data", str(tmp_path / "no.ngds"),
                "--report", str(tmp_path / "r.json")]) == 3


def test_data_dir_env_resolution(tmp_path, monkeypatch):
    monkeypatch.setenv("NOCGUARD_DATA_DIR", str(tmp_path))
    assert run(["topo", "--kind", "mesh3d", "--n", "3",
                "--out", "sub.json"]) == 0
    assert (tmp_path / "sub.json").exists()


def test_experiment_unknown_name_is_config_error(tmp_path):
    cfg = tmp_path / "exp.json"
    cfg.write_text(json.dumps({"name": "does-not-exist"}))
    assert run(["experiment", "--config", str(cfg),
                "--out-dir", str(tmp_path)]) == 2
