import json
from pathlib import Path

import pytest

from suturesim.cli import (
    EXIT_MISSING_WEIGHTS,
    EXIT_OK,
    EXIT_POLICY_STUCK,
    EXIT_USAGE,
    main,
)


def test_run_quiet_scenario(tmp_path, capsys):
    out = tmp_path / "run"
    code = main(["run", "--scenario", "quiet", "--seed", "3", "--out", str(out)])
    assert code == EXIT_OK
    assert (out / "run.jsonl").exists()
    assert (out / "metrics.json").exists()
    assert (out / "samples.csv").exists()
    printed = capsys.readouterr().out
    assert "status: done" in printed
    assert "stitches: 25" in printed


def test_run_deterministic_artifacts(tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    assert main(["run", "--scenario", "default", "--seed", "7", "--out", str(a)]) == EXIT_OK
    assert main(["run", "--scenario", "default", "--seed", "7", "--out", str(b)]) == EXIT_OK
    assert (a / "run.jsonl").read_bytes() == (b / "run.jsonl").read_bytes()
    assert (a / "metrics.json").read_bytes() == (b / "metrics.json").read_bytes()


def test_run_reports_three_replans(tmp_path, capsys):
    out = tmp_path / "run"
    code = main(["run", "--scenario", "default", "--seed", "1", "--out", str(out)])
    assert code == EXIT_OK
    assert "replans: 3" in capsys.readouterr().out


def test_run_policy_stuck_exit_code(tmp_path):
    scenario = {
        "name": "fault",
        "tool_failures": [{"wall": "back", "stitch": 2}],
    }
    path = tmp_path / "fault.json"
    path.write_text(json.dumps(scenario))
    code = main(
        ["run", "--scenario", str(path), "--policy", "auto_approve", "--out", str(tmp_path / "o")]
    )
    assert code == EXIT_POLICY_STUCK


def test_run_unknown_scenario_usage_error(tmp_path, capsys):
    code = main(["run", "--scenario", "nope", "--out", str(tmp_path / "o")])
    assert code == EXIT_USAGE


def test_replay_round_trip(tmp_path, capsys):
    out = tmp_path / "run"
    main(["run", "--scenario", "default", "--seed", "9", "--out", str(out)])
    code = main(["replay", "--log", str(out / "run.jsonl"), "--out", str(tmp_path / "rep")])
    assert code == EXIT_OK
    printed = capsys.readouterr().out
    assert "event sequence identical: True" in printed
    assert "byte identical: True" in printed
    assert (tmp_path / "rep" / "replay.jsonl").exists()


def test_report_from_log(tmp_path):
    out = tmp_path / "run"
    main(["run", "--scenario", "quiet", "--seed", "2", "--out", str(out)])
    code = main(["report", "--log", str(out / "run.jsonl"), "--out", str(tmp_path / "rpt")])
    assert code == EXIT_OK
    report = json.loads((tmp_path / "rpt" / "metrics.json").read_text())
    assert report["stitches"] == 25
    assert "published_reference" in report


def test_motion_bench_requires_weights(tmp_path):
    code = main(
        [
            "motion-bench", "--distances", "65", "--orientations", "1", "--cycles", "1",
            "--out", str(tmp_path / "mb"),
        ]
    )
    assert code == EXIT_MISSING_WEIGHTS


def test_motion_bench_usage_error_zero_cycles(tmp_path):
    code = main(
        ["motion-bench", "--cycles", "0", "--out", str(tmp_path / "mb")]
    )
    assert code == EXIT_USAGE


def test_landmark_train_then_eval(tmp_path, capsys):
    data = tmp_path / "data"
    out = tmp_path / "lm"
    code = main(
        [
            "landmark", "--mode", "train", "--data", str(data), "--out", str(out),
            "--frames", "50", "--epochs", "60", "--seed", "0",
        ]
    )
    assert code == EXIT_OK
    assert (out / "landmark_seg.npz").exists()
    code = main(
        [
            "landmark", "--mode", "eval", "--data", str(data), "--out", str(out),
            "--weights-dir", str(out),
        ]
    )
    assert code == EXIT_OK
    summary = json.loads((out / "landmark_summary.json").read_text())
    assert summary["passes"] is True
    assert (out / "landmark_eval.csv").exists()


def test_landmark_eval_missing_weights(tmp_path):
    data = tmp_path / "data"
    main(
        ["landmark", "--mode", "train", "--data", str(data), "--out", str(tmp_path / "w"),
         "--frames", "8", "--epochs", "2"]
    )
    code = main(
        ["landmark", "--mode", "eval", "--data", str(data), "--out", str(tmp_path / "empty"),
         "--weights-dir", str(tmp_path / "nothing")]
    )
    assert code == EXIT_MISSING_WEIGHTS
