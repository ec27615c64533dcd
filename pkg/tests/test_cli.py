import json
import os

import pytest

from memnav.cli import main
from memnav.persistence import load_memory


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    for key in list(os.environ):
        if key.startswith("HIMM_"):
            monkeypatch.delenv(key)


def summary(out: str) -> dict:
    return json.loads(out[out.index("{"):])


def test_run_episode_writes_log_map_and_memory(tmp_path, capsys):
    mem = tmp_path / "mem"
    code = main(["run-episode", "--scene", "three_room", "--question", "Find the refrigerator.",
                 "--memory-dir", str(mem), "--log-out", str(tmp_path / "log.json"),
                 "--map-out", str(tmp_path / "map.png")])
    assert code == 0
    s = summary(capsys.readouterr().out)
    assert s["success"] and s["steps"] <= 50
    log = json.loads((tmp_path / "log.json").read_text())
    assert len(log) == s["steps"]
    assert (tmp_path / "map.png").read_bytes()[:4] == b"\x89PNG"
    assert len(load_memory(mem).episodic) == 1

    # a second visit recalls the first and needs fewer steps
    assert main(["run-episode", "--scene", "three_room", "--question", "Find the refrigerator.",
                 "--memory-dir", str(mem)]) == 0
    s2 = summary(capsys.readouterr().out)
    assert s2["steps"] < s["steps"]
    assert len(load_memory(mem).episodic) == 2


def test_run_episode_failure_exit_code(capsys):
    code = main(["run-episode", "--scene", "three_room", "--question", "Find the refrigerator.", "--budget", "2"])
    assert code == 1
    assert summary(capsys.readouterr().out)["success"] is False


@pytest.mark.parametrize("argv", [
    ["run-episode", "--scene", "nowhere", "--question", "Find the sofa."],
    ["run-episode", "--scene", "three_room", "--question", "Find the unicorn."],
    ["run-episode", "--scene", "three_room"],
    ["run-episode", "--scene", "three_room", "--question", "Find the bed."],
    ["run-episode", "--scene", "three_room", "--question", "Find the sofa.", "--rules", "missing.mem"],
    ["run-suite", "missing.yaml"],
    ["inspect-memory", "empty-dir"],
    ["export-map", "--out", "x.png"],
])
def test_input_errors_exit_two(tmp_path, monkeypatch, argv, capsys):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == 2
    assert "memnav: error:" in capsys.readouterr().err


def test_bad_config_exit_two(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("agent: {step_budget: -1}\n")
    assert main(["run-episode", "--config", str(cfg), "--scene", "three_room", "--question", "Find the sofa."]) == 2


def test_bad_flag_value_is_usage_error():
    with pytest.raises(SystemExit) as info:
        main(["run-episode", "--scene", "three_room", "--recall", "maybe"])
    assert info.value.code == 2


def test_gen_scenes_then_run_suite_with_reports(tmp_path, capsys):
    assert main(["gen-scenes", "--count", "1", "--seed", "2", "--out", str(tmp_path / "gen")]) == 0
    suite = tmp_path / "gen" / "suite.yaml"
    assert suite.is_file()
    code = main(["run-suite", str(suite), "--recall", "off", "--out", str(tmp_path / "res" / "r"),
                 "--report-dir", str(tmp_path / "rep"), "--jobs", "2"])
    assert code in (0, 1)
    out = capsys.readouterr().out
    assert "episodes" in out and "success" in out
    data = json.loads((tmp_path / "res" / "r.json").read_text())
    assert data["flags"] == {"recall": False, "rules": False}
    assert (tmp_path / "res" / "r.csv").read_text().startswith("index,script_id")
    pngs = sorted(p.name for p in (tmp_path / "rep").glob("*.png"))
    assert len(pngs) == 3


def test_build_rules_and_inspect(tmp_path, capsys):
    mem = tmp_path / "mem"
    assert main(["build-semantic-memory", "--out", str(mem), "--seed", "1"]) == 0
    out = capsys.readouterr().out
    assert "rule(s) written" in out
    assert len(load_memory(mem).rules) > 0
    assert main(["inspect-memory", str(mem), "--question", "Where is the oven?", "--top-k", "2"]) == 0
    out = capsys.readouterr().out
    assert "top 2 rules" in out and "answer_question" in out

    # rules from the memory directory switch location answers to room names
    assert main(["run-episode", "--scene", "three_room", "--question", "Where is the oven?",
                 "--rules", str(mem), "--recall", "off"]) == 0
    s = summary(capsys.readouterr().out)
    assert s["matched"] and s["answer"] == "kitchen"
    assert main(["run-episode", "--scene", "three_room", "--question", "Where is the oven?",
                 "--rules", "off", "--recall", "off"]) == 1
    assert not summary(capsys.readouterr().out)["matched"]


def test_rules_file_output(tmp_path, capsys):
    train = tmp_path / "train"
    main(["gen-scenes", "--count", "1", "--seed", "4", "--out", str(train)])
    assert main(["build-semantic-memory", "--train-dir", str(train), "--out", str(tmp_path / "r.mem")]) == 0
    assert (tmp_path / "r.mem").is_file()


def test_inspect_query_and_export(tmp_path, capsys):
    mem = tmp_path / "mem"
    main(["run-episode", "--scene", "three_room", "--question", "Find the oven.", "--memory-dir", str(mem),
          "--episode-id", "first"])
    capsys.readouterr()
    assert main(["inspect-memory", str(mem), "--query", "sofa", "--top-k", "3"]) == 0
    out = capsys.readouterr().out
    assert "1 episode(s)" in out and "sofa" in out
    assert main(["export-map", "--memory-dir", str(mem), "--episode", "first", "--out", str(tmp_path / "m.pgm")]) == 0
    assert (tmp_path / "m.pgm").read_bytes().startswith(b"P5")
    assert main(["export-map", "--scene", "three_room", "--out", str(tmp_path / "s.png")]) == 0
    assert (tmp_path / "s.png").is_file()
