import json

import numpy as np
import pytest

from m4gn.cli import EXIT_IO, EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, run
from pipeline import run_pipeline, snapshot


@pytest.fixture(scope="module")
def pipeline_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    codes = run_pipeline(root / "a")
    return root, codes


def test_pipeline_succeeds(pipeline_run):
    root, codes = pipeline_run
    assert codes == [EXIT_OK] * len(codes)
    a = root / "a"
    for f in ("data/case_000/mesh.json", "data/case_001/trajectory.json", "modal/modal.json",
              "seg/segmentation.json", "train/checkpoint/manifest.json", "train/history.json",
              "roll/rollout.json", "roll/rollout_summary.json", "met/metrics.json",
              "oracle/oracle.json", "rep/report.json", "rep/segments.csv"):
        assert (a / f).is_file(), f
    for d in ("modal", "seg", "train", "roll", "met", "rep"):
        assert "config" in json.loads((a / d / "run.json").read_text())


def test_pipeline_byte_identical(pipeline_run):
    root, _ = pipeline_run
    run_pipeline(root / "b")
    a, b = snapshot(root / "a"), snapshot(root / "b")
    assert a.keys() == b.keys()
    assert [k for k in a if a[k] != b[k]] == []


def test_segmentation_echoes_config(pipeline_run):
    root, _ = pipeline_run
    doc = json.loads((root / "a/seg/segmentation.json").read_text())
    assert doc["K"] == 4 and doc["delta"] == 0 and len(doc["labels"]) == 36
    assert doc["config"]["variant"] == "mdod_e" and doc["config"]["tau"] == 0.5


def test_oracle_flag(tmp_path):
    assert run(["metrics", "--oracle", "--oracle-cases", "4", "--out", str(tmp_path)]) == EXIT_OK
    assert json.loads((tmp_path / "oracle.json").read_text())["match"] is True


def test_oracle_mismatch_exits_validation(tmp_path, monkeypatch):
    from m4gn import metrics
    monkeypatch.setattr(metrics, "chamfer", lambda a, b: -1.0)
    assert run(["metrics", "--oracle", "--out", str(tmp_path)]) == EXIT_VALIDATION


def test_beam_paper_knobs(tmp_path):
    assert run(["gen", "--case", "beam", "--T", "2", "--out", str(tmp_path / "d")]) == EXIT_OK
    assert run(["segment", "--mesh", str(tmp_path / "d/case_000"), "--k", "19", "--variant", "mdod_e",
                "--tau", "0.5", "--out", str(tmp_path / "s")]) == EXIT_OK
    labels = json.loads((tmp_path / "s/segmentation.json").read_text())["labels"]
    assert sorted(set(labels)) == list(range(19))


def test_usage_errors(tmp_path, capsys):
    assert run(["bogus"]) == EXIT_USAGE
    assert run(["segment", "--out", str(tmp_path), "--k", "x"]) == EXIT_USAGE
    assert run(["segment", "--out", str(tmp_path), "--unknown-flag"]) == EXIT_USAGE
    assert run(["segment", "--out", str(tmp_path)]) == EXIT_USAGE  # no --mesh


def test_missing_file_is_io_error(tmp_path):
    assert run(["modal", "--mesh", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == EXIT_IO


def test_schema_violation_is_validation_error(tmp_path):
    bad = tmp_path / "mesh.json"
    bad.write_text("{}")
    assert run(["modal", "--mesh", str(bad), "--out", str(tmp_path / "o")]) == EXIT_VALIDATION
    bad.write_text(json.dumps({"dim": 2, "nodes": [{"pos": [0, 0], "type": 0}], "cells": [[0, 5]]}))
    assert run(["modal", "--mesh", str(bad), "--out", str(tmp_path / "o")]) == EXIT_VALIDATION


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "run.toml"
    cfg.write_text('seed = 3\n[gen]\ncase = "diffusion"\nn = 5\nT = 2\ncount = 1\n')
    assert run(["gen", "--config", str(cfg), "--T", "3", "--out", str(tmp_path / "g")]) == EXIT_OK
    echoed = json.loads((tmp_path / "g/run.json").read_text())["config"]
    assert echoed["n"] == 5 and echoed["T"] == 3 and echoed["seed"] == 3
    assert len(json.loads((tmp_path / "g/case_000/trajectory.json").read_text())) == 4
    assert json.loads((tmp_path / "g/case_000/case.json").read_text())["seed"] == 3


def test_unknown_config_key_rejected(tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"gen": {"nonsense": 1}}))
    assert run(["gen", "--config", str(cfg), "--out", str(tmp_path / "g")]) == EXIT_VALIDATION


def test_rollout_summary_reports_persistence(pipeline_run):
    root, _ = pipeline_run
    s = json.loads((root / "a/roll/rollout_summary.json").read_text())
    assert s["T"] == 6 and np.isfinite(s["rmse_all"]) and s["persistence_rmse_all"] > 0
