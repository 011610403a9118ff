import json

import pytest

from pose_distill.cli import EXIT_CONFIG, EXIT_EVAL, EXIT_OK, EXIT_TRAIN, OUTPUT_ENV, build_parser, main
from pose_distill.nets import load_checkpoint


@pytest.fixture
def tiny_config(tmp_path, tiny_overrides):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(tiny_overrides))
    return path


def test_parser_lists_subcommands():
    help_text = build_parser().format_help()
    for cmd in ("data", "train-teacher", "phase1", "phase2", "baseline", "eval", "ablate", "report"):
        assert cmd in help_text


def test_bad_config_exits_1(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"phase2": {"nonsense": 1}}))
    assert main(["data", "--config", str(bad), "--out", str(tmp_path / "d")]) == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_missing_teacher_exits_2(tmp_path, tiny_config):
    code = main(["phase1", "--config", str(tiny_config), "--teacher", str(tmp_path / "none.pt"),
                 "--out", str(tmp_path / "p1")])
    assert code == EXIT_TRAIN


def test_missing_checkpoint_eval_exits_3(tmp_path, tiny_config):
    code = main(["eval", "--config", str(tiny_config), "--ckpt", str(tmp_path / "none.pt"),
                 "--out", str(tmp_path / "r.json")])
    assert code == EXIT_EVAL


def test_stage_by_stage_commands(tmp_path, tiny_config):
    cfg = ["--config", str(tiny_config)]
    assert main(["data", *cfg, "--out", str(tmp_path / "data")]) == EXIT_OK
    assert (tmp_path / "data" / "train" / "manifest.json").exists()
    assert main(["train-teacher", *cfg, "--data", str(tmp_path / "data"), "--out", str(tmp_path / "t")]) == EXIT_OK
    teacher = tmp_path / "t" / "teacher.pt"
    assert load_checkpoint(teacher)[1]["role"] == "teacher"
    assert main(["phase1", *cfg, "--teacher", str(teacher), "--data", str(tmp_path / "data"),
                 "--out", str(tmp_path / "p1")]) == EXIT_OK
    # the teacher path is recovered from the phase1 sidecar
    assert main(["phase2", *cfg, "--init", str(tmp_path / "p1" / "generator.pt"),
                 "--out", str(tmp_path / "p2")]) == EXIT_OK
    assert load_checkpoint(tmp_path / "p2" / "generator.pt")[1]["role"] == "phase2"
    assert main(["baseline", *cfg, "--method", "add", "--teacher", str(teacher),
                 "--out", str(tmp_path / "add")]) == EXIT_OK
    assert main(["eval", *cfg, "--ckpt", str(tmp_path / "p2" / "generator.pt"), "--steps", "1",
                 "--out", str(tmp_path / "report.json")]) == EXIT_OK
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["nfe"] == 1


def test_pipeline_and_report_use_env_root(tmp_path, tiny_config, monkeypatch, capsys):
    monkeypatch.setenv(OUTPUT_ENV, str(tmp_path / "runs"))
    assert main(["pipeline", "--config", str(tiny_config)]) == EXIT_OK
    assert (tmp_path / "runs" / "manifest.jsonl").exists()
    assert main(["report", "--config", str(tiny_config)]) == EXIT_OK
    csv = (tmp_path / "runs" / "report" / "comparison.csv").read_text()
    assert "POSE" in csv and "Teacher" in csv


def test_diverging_run_exits_2(tmp_path, tiny_overrides):
    tiny_overrides["phase2"].update(divergence_limit=0.0, divergence_patience=1)
    path = tmp_path / "div.json"
    path.write_text(json.dumps(tiny_overrides))
    assert main(["pipeline", "--config", str(path), "--out", str(tmp_path / "runs")]) == EXIT_TRAIN
    entries = [json.loads(l) for l in (tmp_path / "runs" / "manifest.jsonl").read_text().splitlines()]
    assert any(e.get("status") == "failed" and e["stage"] == "phase2" for e in entries)
