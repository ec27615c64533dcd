import dataclasses

import pytest

from memnav.config import load_config
from memnav.episodic_memory import EpisodicStore
from memnav.simulator import EpisodeScript, load_scene
from memnav.suite import (
    Runtime,
    Suite,
    SuiteEntry,
    build_revisit_suite,
    build_semantic_memory,
    build_training_suite,
    load_suite,
    run_suite,
    save_suite,
    soundness_problems,
    write_generated,
)

CFG = load_config(env={})


@pytest.fixture(scope="module")
def small_revisit():
    return build_revisit_suite(seed=3, n_coverage=2, n_location=1, name="mini")


def test_empty_suite_reports_na():
    res = run_suite(Suite("empty", {}, []), CFG)
    assert res.aggregates["episodes"] == 0
    assert res.aggregates["success_rate"] is None
    assert "n/a" in res.table()
    assert res.to_csv().count("\n") == 1


def test_rerun_writes_identical_files(tmp_path, small_revisit):
    a = run_suite(small_revisit, CFG, recall=True).write(tmp_path / "a" / "res")
    b = run_suite(small_revisit, CFG, recall=True).write(tmp_path / "b" / "res")
    for pa, pb in zip(a, b):
        assert pa.read_bytes() == pb.read_bytes()


def test_parallel_matches_serial(small_revisit):
    s1, s2 = EpisodicStore(CFG.gateway.embed_dim), EpisodicStore(CFG.gateway.embed_dim)
    serial = run_suite(small_revisit, CFG, recall=True, episodic=s1, jobs=1)
    parallel = run_suite(small_revisit, CFG, recall=True, episodic=s2, jobs=3)
    assert serial.rows == parallel.rows
    assert [(r.episode_id, r.created_at) for r in s1] == [(r.episode_id, r.created_at) for r in s2]


def test_aggregates_checked_against_rows(small_revisit):
    res = run_suite(small_revisit.subset(visit=1), CFG, recall=False)
    assert res.aggregates["episodes"] == 3
    assert soundness_problems(res, CFG.agent.step_budget) == []
    res.aggregates["mean_steps"] += 1
    with pytest.raises(ValueError):
        res.to_json()


def test_broken_episode_is_aborted_not_fatal():
    scene = load_scene("three_room")
    good = EpisodeScript("ok", "three_room", "Find the oven.", "oven", "oven")
    bad = EpisodeScript("bad", "elsewhere", "Find the oven.", "oven", "oven")
    res = run_suite(Suite("s", {"three_room": scene}, [SuiteEntry(good), SuiteEntry(bad)]), CFG, recall=False)
    assert [r["status"] for r in res.rows] == ["answered", "aborted"]
    assert res.aggregates["aborted"] == 1


def test_suite_file_round_trip(tmp_path, small_revisit):
    save_suite(small_revisit, tmp_path / "suite.yaml")
    back = load_suite(tmp_path / "suite.yaml")
    assert back.name == small_revisit.name
    assert sorted(back.scenes) == sorted(small_revisit.scenes)
    assert [(e.script.id, e.visit, e.pair, e.script.group) for e in back.entries] == \
           [(e.script.id, e.visit, e.pair, e.script.group) for e in small_revisit.entries]
    rows_a = run_suite(back.subset(visit=1), CFG, recall=False).rows
    rows_b = run_suite(small_revisit.subset(visit=1), CFG, recall=False).rows
    assert rows_a == rows_b


def test_suite_with_file_entries_and_builtin_scene(tmp_path):
    (tmp_path / "e.yaml").write_text("id: x\nscene: three_room\nquestion: Find the sink.\ntarget: sink\n")
    (tmp_path / "suite.yaml").write_text(
        "format: suite\nversion: 1\nname: t\nscenes: [three_room]\nepisodes:\n  - {file: e.yaml, visit: 2}\n")
    suite = load_suite(tmp_path / "suite.yaml")
    assert suite.entries[0].script.gt_answer == "sink" and suite.entries[0].visit == 2


def test_revisit_suite_shape(small_revisit):
    assert len(small_revisit) == 6
    assert [e.visit for e in small_revisit.entries] == [1, 2] * 3
    assert {e.script.group for e in small_revisit.entries} == {"coverage", "location"}
    for first, second in zip(small_revisit.entries[::2], small_revisit.entries[1::2]):
        assert first.pair == second.pair
        assert dataclasses.replace(first.script, id="") == dataclasses.replace(second.script, id="")


def test_build_semantic_memory_from_training_runs():
    suite = build_training_suite(seed=7, n_scenes=1)
    rules, reports = build_semantic_memory(suite, CFG, seed=0)
    assert len(reports) == 2 and all(not r.error for r in reports)
    assert len(rules) == sum(r.rules for r in reports) > 0
    assert {r.anchor for r in rules.rules} <= {"answer_question", "select_frontier", "verify_target"}
    again, _ = build_semantic_memory(suite, CFG, seed=0)
    assert [r.to_dict() for r in again.rules] == [r.to_dict() for r in rules.rules]


def test_write_generated(tmp_path):
    path = write_generated(tmp_path, 2, seed=1)
    suite = load_suite(path)
    assert len(suite.scenes) == 2 and len(suite) > 0
    assert all(e.script.gt_trajectory is not None for e in suite.entries)


def test_runtime_shared_between_runs(small_revisit):
    rt = Runtime.create(CFG, list(small_revisit.scenes.values()))
    a = run_suite(small_revisit.subset(visit=1), CFG, recall=False, runtime=rt)
    b = run_suite(small_revisit.subset(visit=1), CFG, recall=False)
    assert a.rows == b.rows
