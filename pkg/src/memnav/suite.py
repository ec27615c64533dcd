"""Suites of scripted episodes, their aggregate metrics, and offline rule building.

A suite file (YAML) lists scene files and episodes::

    format: suite
    version: 1
    name: demo
    scenes: [scenes/gen0001.yaml, three_room]   # paths relative to this file, or built-in names
    episodes:
      - {id: a, scene: gen0001, question: "Find the sofa.", target: sofa, gt_answer: sofa}
      - {file: scripts/b.yaml, visit: 2, pair: b}

Episodes run in file order. With recall on they share one episodic store,
so later episodes can recall earlier ones.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from memnav.config import RunConfig, agent_config, make_chat, make_embedder, make_simulator
from memnav.controller import Agent, EpisodeResult, check_log, run_episode
from memnav.episodic_memory import EpisodeRecord, EpisodicStore
from memnav.errors import ExtractionError, MemNavError, SceneError
from memnav.gateway import ChatClient, Embedder
from memnav.physical_space import Pose
from memnav.semantic_memory import (
    ReasoningLog,
    RuleStore,
    ThresholdSchedule,
    deviation_series,
    detect_deviations,
    extract_pseudocode,
    extract_rules,
)
from memnav.simulator import (
    EpisodeEnvironment,
    EpisodeScript,
    SceneSpec,
    Simulator,
    bind_script,
    generate_scene,
    generate_scripts,
    load_scene,
    save_scene,
    script_from_dict,
    script_to_dict,
)

logger = logging.getLogger(__name__)

SUITE_FORMAT_VERSION = 1
RESULT_FORMAT_VERSION = 1


@dataclass
class SuiteEntry:
    script: EpisodeScript
    visit: int = 1
    pair: str = ""


@dataclass
class Suite:
    name: str
    scenes: dict[str, SceneSpec]
    entries: list[SuiteEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def subset(self, group: str | None = None, visit: int | None = None) -> "Suite":
        keep = [e for e in self.entries
                if (group is None or e.script.group == group) and (visit is None or e.visit == visit)]
        return Suite(self.name, self.scenes, keep)


def load_suite(path: str | Path) -> Suite:
    p = Path(path)
    if not p.is_file():
        raise SceneError(f"suite file {p} not found")
    data = yaml.safe_load(p.read_text()) or {}
    if data.get("format", "suite") != "suite":
        raise SceneError(f"{p} is not a suite file")
    if data.get("version", SUITE_FORMAT_VERSION) != SUITE_FORMAT_VERSION:
        raise SceneError(f"unsupported suite version {data.get('version')}")
    scenes = {}
    for ref in data.get("scenes", []):
        candidate = p.parent / ref
        scene = load_scene(candidate if candidate.exists() else ref)
        scenes[scene.name] = scene
    entries = []
    for item in data.get("episodes", []) or []:
        item = dict(item)
        visit = int(item.pop("visit", 1))
        pair = str(item.pop("pair", ""))
        if "file" in item:
            item = {**yaml.safe_load((p.parent / item.pop("file")).read_text()), **item}
        script = script_from_dict(item)
        if script.scene not in scenes:
            scenes[script.scene] = load_scene(script.scene)
        entries.append(SuiteEntry(script, visit, pair))
    return Suite(str(data.get("name", p.stem)), scenes, entries)


def save_suite(suite: Suite, path: str | Path, scene_dir: str = "scenes") -> None:
    """Write the suite file plus one scene file per scene next to it."""
    p = Path(path)
    (p.parent / scene_dir).mkdir(parents=True, exist_ok=True)
    refs = []
    for name in sorted(suite.scenes):
        save_scene(suite.scenes[name], p.parent / scene_dir / f"{name}.yaml")
        refs.append(f"{scene_dir}/{name}.yaml")
    episodes = []
    for e in suite.entries:
        d = script_to_dict(e.script)
        d.pop("format")
        d.pop("version")
        d["visit"] = e.visit
        d["pair"] = e.pair
        episodes.append(d)
    doc = {"format": "suite", "version": SUITE_FORMAT_VERSION, "name": suite.name, "scenes": refs,
           "episodes": episodes}
    p.write_text(yaml.safe_dump(doc, sort_keys=False))


# ------------------------------------------------------------------- results


def _mean(values: Sequence[float]) -> float | None:
    return float(np.mean(values)) if len(values) else None


def aggregate(rows: Sequence[dict]) -> dict:
    """Aggregates over result rows; None (reported as n/a) for an empty suite."""
    return {
        "episodes": len(rows),
        "success_rate": _mean([float(r["success"]) for r in rows]),
        "mean_spl": _mean([r["spl"] for r in rows]),
        "mean_steps": _mean([r["steps"] for r in rows]),
        "match_rate": _mean([float(r["matched"]) for r in rows]),
        "aborted": sum(r["status"] == "aborted" for r in rows),
    }


@dataclass
class SuiteResult:
    name: str
    rows: list[dict]
    aggregates: dict
    fingerprint: str
    seed: int
    flags: dict = field(default_factory=dict)
    results: list[EpisodeResult] = field(default_factory=list, repr=False)

    def check(self) -> None:
        """Aggregates must equal an independent recomputation from the rows."""
        rows = self.rows
        expect = {
            "episodes": len(rows),
            "success_rate": sum(bool(r["success"]) for r in rows) / len(rows) if rows else None,
            "mean_spl": math.fsum(r["spl"] for r in rows) / len(rows) if rows else None,
            "mean_steps": sum(r["steps"] for r in rows) / len(rows) if rows else None,
            "match_rate": sum(bool(r["matched"]) for r in rows) / len(rows) if rows else None,
            "aborted": sum(1 for r in rows if r["status"] == "aborted"),
        }
        for key, want in expect.items():
            got = self.aggregates[key]
            if (want is None) != (got is None) or (want is not None and abs(want - got) > 1e-9):
                raise ValueError(f"aggregate {key} = {got} disagrees with rows ({want})")

    def to_dict(self) -> dict:
        return {
            "format": "suite-result",
            "version": RESULT_FORMAT_VERSION,
            "suite": self.name,
            "seed": self.seed,
            "config_fingerprint": self.fingerprint,
            "flags": self.flags,
            "aggregates": {k: (round(v, 6) if isinstance(v, float) else v) for k, v in self.aggregates.items()},
            "episodes": self.rows,
        }

    def to_json(self) -> str:
        self.check()
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    CSV_COLUMNS = ("index", "script_id", "scene", "group", "pair", "visit", "task", "status", "success",
                   "matched", "steps", "path_len", "shortest_len", "spl", "answer")

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, self.CSV_COLUMNS, extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for row in self.rows:
            writer.writerow(row)
        return buf.getvalue()

    def table(self) -> str:
        lines = [f"suite {self.name}  seed {self.seed}  config {self.fingerprint}"]
        header = f"{'#':>3}  {'script':<28} {'status':<9} {'ok':<3} {'match':<5} {'steps':>5} {'path':>7} {'spl':>6}"
        lines += [header, "-" * len(header)]
        for r in self.rows:
            lines.append(
                f"{r['index']:>3}  {r['script_id'][:28]:<28} {r['status']:<9} {'y' if r['success'] else 'n':<3} "
                f"{'y' if r['matched'] else 'n':<5} {r['steps']:>5} {r['path_len']:>7.2f} {r['spl']:>6.3f}"
            )
        a = self.aggregates

        def fmt(v, pct=False):
            if v is None:
                return "n/a"
            return f"{100 * v:.1f}%" if pct else f"{v:.3f}"

        lines.append("-" * len(header))
        lines.append(
            f"episodes {a['episodes']}  success {fmt(a['success_rate'], True)}  spl {fmt(a['mean_spl'])}  "
            f"steps {fmt(a['mean_steps'])}  match {fmt(a['match_rate'], True)}  aborted {a['aborted']}"
        )
        return "\n".join(lines)

    def write(self, out: str | Path) -> list[Path]:
        """Write ``<out>.json``, ``<out>.csv`` and ``<out>.txt``."""
        base = Path(out)
        base.parent.mkdir(parents=True, exist_ok=True)
        paths = [base.with_suffix(".json"), base.with_suffix(".csv"), base.with_suffix(".txt")]
        paths[0].write_text(self.to_json())
        paths[1].write_text(self.to_csv())
        paths[2].write_text(self.table() + "\n")
        return paths


# ------------------------------------------------------------------- running


@dataclass
class Runtime:
    """Clients and simulators shared by every episode of a run."""

    config: RunConfig
    chat: ChatClient
    embedder: Embedder
    sims: dict[str, Simulator]
    judge: ChatClient | None = None

    @classmethod
    def create(cls, config: RunConfig, scenes: Sequence[SceneSpec], chat: ChatClient | None = None,
               embedder: Embedder | None = None) -> "Runtime":
        embedder = embedder or make_embedder(config)
        sims = {s.name: make_simulator(s, config, embedder) for s in scenes}
        chat = chat or make_chat(config, sims.values())
        judge = chat if config.run.judge == "model" else None
        return cls(config, chat, embedder, sims, judge)


def _row(i: int, entry: SuiteEntry, result: EpisodeResult, flags: dict) -> dict:
    s = entry.script
    row = {"index": i, "script_id": s.id, "scene": s.scene, "group": s.group, "pair": entry.pair,
           "visit": entry.visit, "task": s.task, **result.summary(), **flags}
    return row


def _run_one(rt: Runtime, i: int, entry: SuiteEntry, suite_name: str, recall: bool, rules: RuleStore | None,
             store: EpisodicStore | None) -> EpisodeResult:
    script = entry.script
    cfg = dataclasses.replace(agent_config(rt.config, rt.embedder.dim), recall_enabled=recall,
                              rules_enabled=rules is not None)
    episode_id = f"{suite_name}/{i:03d}/{script.id}"
    try:
        sim = rt.sims[script.scene]
        if script.gt_trajectory is None:
            bind_script(script, sim)
        env = EpisodeEnvironment(sim, script, rt.judge, cfg.success_radius)
        agent = Agent(script.question, cfg, rt.chat, rt.embedder, store if recall else None, rules, episode_id)
        return run_episode(agent, env)
    except Exception as exc:  # a broken episode must not take the suite down
        logger.exception("episode %s aborted", episode_id)
        return EpisodeResult(episode_id, "", False, 0, 0.0, 0.0, ReasoningLog(), "aborted",
                             error=f"{type(exc).__name__}: {exc}")


def run_suite(
    suite: Suite,
    config: RunConfig,
    recall: bool | None = None,
    rules: RuleStore | None = None,
    episodic: EpisodicStore | None = None,
    jobs: int | None = None,
    runtime: Runtime | None = None,
) -> SuiteResult:
    """Run every entry; with recall on, episodes share ``episodic`` (a fresh store if None).

    With ``jobs > 1`` episodes of different scenes run concurrently. Each
    scene's episodes then recall from the starting store plus earlier
    episodes of the same scene, and new episodes are appended to the shared
    store in suite order once all are done, so results stay reproducible.
    """
    recall = config.agent.recall_enabled if recall is None else recall
    use_rules = rules if (rules is not None and config.agent.rules_enabled) else None
    jobs = jobs or config.run.jobs
    rt = runtime or Runtime.create(config, list(suite.scenes.values()))
    store = episodic if episodic is not None else EpisodicStore(rt.embedder.dim)
    n = len(suite.entries)
    results: list[EpisodeResult | None] = [None] * n

    if jobs <= 1 or n <= 1:
        for i, entry in enumerate(suite.entries):
            results[i] = _run_one(rt, i, entry, suite.name, recall, use_rules, store)
    else:
        chains: dict[str, list[int]] = {}
        for i, entry in enumerate(suite.entries):
            chains.setdefault(entry.script.scene, []).append(i)
        base = list(store)

        def run_chain(indices: list[int]) -> list[tuple[int, EpisodeResult, EpisodicStore]]:
            private = EpisodicStore(store.dim)
            for rec in base:
                private.append(rec)
            out = []
            for i in indices:
                out.append((i, _run_one(rt, i, suite.entries[i], suite.name, recall, use_rules, private), private))
            return out

        new_records: dict[str, EpisodeRecord] = {}
        with ThreadPoolExecutor(jobs) as pool:
            for chain in pool.map(run_chain, chains.values()):
                for i, res, private in chain:
                    results[i] = res
                    if res.episode_id in private:
                        new_records[res.episode_id] = private.get(res.episode_id)
        for res in results:
            rec = new_records.get(res.episode_id)
            if rec is not None and res.episode_id not in store:
                store.append(dataclasses.replace(rec, created_at=store.next_timestamp()))

    flags = {"recall": recall, "rules": use_rules is not None}
    rows = [_row(i, e, r, flags) for i, (e, r) in enumerate(zip(suite.entries, results))]
    out = SuiteResult(suite.name, rows, aggregate(rows), config.fingerprint(), config.run.seed, flags,
                      list(results))
    out.check()
    return out


def soundness_problems(result: SuiteResult, budget: int) -> list[str]:
    problems = []
    for res in result.results:
        problems += [f"{res.episode_id}: {p}" for p in check_log(res.log, budget)]
        if res.status not in ("answered", "stopped", "aborted"):
            problems.append(f"{res.episode_id}: ended with status {res.status}")
    return problems


# ------------------------------------------------------------ built-in suites


def farthest_object(sim: Simulator, spawn: Pose):
    best = None
    for obj in sim.scene.objects:
        path = sim.geodesic(spawn.xy, obj.category)
        if path is not None and (best is None or path.length > best[0]):
            best = (path.length, obj)
    return best[1]


def nearest_object(sim: Simulator, spawn: Pose):
    best = None
    for obj in sim.scene.objects:
        path = sim.geodesic(spawn.xy, obj.category)
        if path is not None and (best is None or path.length < best[0]):
            best = (path.length, obj)
    return best[1]


def build_revisit_suite(seed: int = 0, n_coverage: int = 10, n_location: int = 10, name: str = "revisit") -> Suite:
    """Paired first/second visits on generated scenes.

    The coverage group asks for the object farthest from the spawn, so a
    first visit has to cover most of the building. The location group asks
    where that object is, with the room name as reference answer.
    """
    scenes, entries = {}, []
    for k in range(n_coverage + n_location):
        scene = generate_scene(seed * 1000 + k, name=f"{name}{k:02d}")
        sim = Simulator(scene)
        obj = farthest_object(sim, scene.spawns[0])
        if k < n_coverage:
            base = EpisodeScript(f"{scene.name}-find", scene.name, f"Find the {obj.category}.", obj.category,
                                 obj.category, 0, "navigation", "category", group="coverage")
        else:
            base = EpisodeScript(f"{scene.name}-where", scene.name, f"Where is the {obj.category}?", obj.category,
                                 obj.area, 0, "qa", "category", group="location")
        bind_script(base, sim)
        scenes[scene.name] = scene
        for visit in (1, 2):
            entries.append(SuiteEntry(dataclasses.replace(base, id=f"{base.id}-v{visit}"), visit, base.id))
    return Suite(name, scenes, entries)


def build_training_suite(seed: int = 100, n_scenes: int = 3, name: str = "train") -> Suite:
    """Episodes for offline rule building: one navigation and one location question per scene."""
    scenes, entries = {}, []
    for k in range(n_scenes):
        scene = generate_scene(seed * 1000 + k, name=f"{name}{k:02d}")
        sim = Simulator(scene)
        obj = farthest_object(sim, scene.spawns[0])
        near = nearest_object(sim, scene.spawns[0])
        scripts = [
            EpisodeScript(f"{scene.name}-find", scene.name, f"Find the {obj.category}.", obj.category,
                          obj.category, 0, "navigation", group="navigation"),
            EpisodeScript(f"{scene.name}-where", scene.name, f"Where is the {near.category}?", near.category,
                          near.area, 0, "qa", group="location"),
        ]
        scenes[scene.name] = scene
        entries += [SuiteEntry(bind_script(s, sim)) for s in scripts]
    return Suite(name, scenes, entries)


# ----------------------------------------------------------- rule building


@dataclass
class DistillReport:
    script_id: str
    steps: int
    s_stop: float | None
    deviations: list[int]
    rules: int
    error: str = ""


def build_semantic_memory(
    suite: Suite,
    config: RunConfig,
    seed: int = 0,
    runtime: Runtime | None = None,
    schedule: ThresholdSchedule | None = None,
) -> tuple[RuleStore, list[DistillReport]]:
    """Run each training episode, find its deviations and distil rules from it."""
    rt = runtime or Runtime.create(config, list(suite.scenes.values()))
    store = RuleStore(rt.embedder.dim)
    reports = []
    base_schedule = schedule or ThresholdSchedule()
    for i, entry in enumerate(suite.entries):
        script = entry.script
        result = _run_one(rt, i, entry, suite.name, recall=False, rules=None, store=None)
        if result.status == "aborted" or not len(result.log):
            reports.append(DistillReport(script.id, result.steps, None, [], 0, result.error or "episode aborted"))
            continue
        try:
            sched = dataclasses.replace(base_schedule, rng_seed=seed * 100003 + i)
            series = deviation_series(result.log, script.gt_trajectory)
            if len(series) >= 2:
                s_stop, events = detect_deviations(series, sched, result.log.points)
            else:
                s_stop, events = None, []
            workflow = extract_pseudocode(result.log, rt.chat)
            rules = extract_rules(script.gt_answer, result.log, workflow, events, rt.chat, rt.embedder,
                                  script.question, result.episode_id)
        except (ExtractionError, MemNavError) as exc:
            reports.append(DistillReport(script.id, result.steps, None, [], 0, f"{type(exc).__name__}: {exc}"))
            continue
        store.extend(rules)
        reports.append(DistillReport(script.id, result.steps, s_stop, [e.timestep for e in events], len(rules)))
    return store, reports


def write_generated(out_dir: str | Path, count: int, seed: int) -> Path:
    """Generate ``count`` scenes with scripts and a suite file listing them all."""
    out = Path(out_dir)
    scenes, entries = {}, []
    for k in range(count):
        scene = generate_scene(seed * 1000 + k, name=f"gen{seed:03d}_{k:03d}")
        sim = Simulator(scene)
        scenes[scene.name] = scene
        entries += [SuiteEntry(s) for s in generate_scripts(scene, sim, seed + k)]
    suite = Suite(f"generated-{seed}", scenes, entries)
    save_suite(suite, out / "suite.yaml")
    return out / "suite.yaml"
