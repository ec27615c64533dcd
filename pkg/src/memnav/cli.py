"""Command-line entry point: ``memnav <subcommand> ...``.

Exit codes: 0 success, 1 one or more episodes failed, 2 configuration or
input error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from memnav.config import RunConfig, agent_config, load_config
from memnav.controller import Agent, run_episode
from memnav.episodic_memory import EpisodicStore
from memnav.errors import MemNavError
from memnav.gateway import embed
from memnav.mock_adjudicator import is_location_question
from memnav.persistence import MemoryStores, load_memory, snapshot_memory
from memnav.physical_space import extract_frontiers, render_retrieved_poses, to_pgm
from memnav.semantic_memory import RuleStore, retrieve_rules
from memnav.semantic_space import query_regions
from memnav.simulator import (
    EpisodeEnvironment,
    EpisodeScript,
    bind_script,
    load_scene,
    load_script,
    load_vocabulary,
    rasterize,
)
from memnav.suite import (
    Runtime,
    build_semantic_memory,
    build_training_suite,
    load_suite,
    run_suite,
    write_generated,
)

EXIT_OK, EXIT_FAILED, EXIT_CONFIG = 0, 1, 2

logger = logging.getLogger("memnav")


class UsageError(Exception):
    """Bad command-line input; maps to exit code 2."""


def _on_off(text: str) -> bool:
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return text == "on"


def _config(args) -> RunConfig:
    overrides = {"seed": getattr(args, "seed", None), "jobs": getattr(args, "jobs", None),
                 "step_budget": getattr(args, "budget", None)}
    return load_config(args.config, overrides=overrides)


def _rules(arg: str | None) -> RuleStore | None:
    if arg in (None, "off"):
        return None
    p = Path(arg)
    if p.is_dir():
        stores = load_memory(p)
        if stores.rules is None:
            raise UsageError(f"memory directory {p} holds no rules")
        return stores.rules
    if not p.is_file():
        raise UsageError(f"rules file {p} not found")
    return RuleStore.load(p)


def _memory(path: str | None, dim: int) -> EpisodicStore:
    if path and (Path(path) / "index.json").is_file():
        store = load_memory(path).episodic
        if store.dim != dim:
            raise UsageError(f"memory in {path} has D={store.dim}, embedder has D={dim}")
        return store
    return EpisodicStore(dim)


def _save_memory(path: str | None, store: EpisodicStore) -> None:
    if not path:
        return
    rules = None
    if (Path(path) / "index.json").is_file():
        rules = load_memory(path).rules
    snapshot_memory(MemoryStores(store, rules), path)


# ------------------------------------------------------------------ commands


def _script_from_args(args, scene, sim) -> EpisodeScript:
    if args.script:
        return load_script(args.script)
    if not args.question:
        raise UsageError("run-episode needs --question or --script")
    vocab = load_vocabulary()
    target = args.target or next(iter(vocab.find_categories(args.question)), None)
    if target is None:
        raise UsageError("no known object category in the question; pass --target")
    instances = scene.instances(target)
    if not instances:
        raise UsageError(f"scene {scene.name} has no {target}")
    location = is_location_question(args.question)
    gt = args.answer or (instances[0].area if location else target)
    return EpisodeScript("cli", scene.name, args.question, target, gt, args.spawn,
                         "qa" if location else "navigation")


def cmd_run_episode(args) -> int:
    cfg = _config(args)
    scene = load_scene(args.scene)
    rt = Runtime.create(cfg, [scene])
    sim = rt.sims[scene.name]
    script = bind_script(_script_from_args(args, scene, sim), sim)
    if script.scene != scene.name:
        raise UsageError(f"script is for scene {script.scene}, not {scene.name}")
    recall = cfg.agent.recall_enabled if args.recall is None else args.recall
    rules = _rules(args.rules) if cfg.agent.rules_enabled else None
    store = _memory(args.memory_dir, rt.embedder.dim)
    acfg = dataclasses.replace(agent_config(cfg, rt.embedder.dim), recall_enabled=recall,
                               rules_enabled=rules is not None)
    episode_id = args.episode_id or f"{scene.name}-{len(store):05d}"
    agent = Agent(script.question, acfg, rt.chat, rt.embedder, store if recall or args.memory_dir else None,
                  rules, episode_id)
    env = EpisodeEnvironment(sim, script, rt.judge, acfg.success_radius)
    result = run_episode(agent, env)
    if args.log_out:
        Path(args.log_out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.log_out).write_text(json.dumps(result.log.to_list(), indent=1, sort_keys=True) + "\n")
    if args.map_out and agent.grid is not None:
        _write_map(agent.grid, args.map_out, [p.position for p in result.log.points],
                   script.gt_trajectory.waypoints if script.gt_trajectory else [], title=script.question)
    _save_memory(args.memory_dir, store)
    print(json.dumps({"question": script.question, **result.summary()}, indent=2, sort_keys=True))
    return EXIT_OK if result.success else EXIT_FAILED


def _write_map(grid, out: str, trajectory=(), gt=(), amap=None, title: str = "") -> None:
    path = Path(out)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix.lower() == ".pgm":
        path.write_bytes(to_pgm(grid))
        return
    from memnav.plotting import plot_map

    plot_map(grid, path, trajectory, amap, gt, title)


def cmd_run_suite(args) -> int:
    cfg = _config(args)
    suite = load_suite(args.suite)
    rt = Runtime.create(cfg, list(suite.scenes.values()))
    store = _memory(args.memory_dir, rt.embedder.dim)
    rules = _rules(args.rules)
    result = run_suite(suite, cfg, recall=args.recall, rules=rules, episodic=store, runtime=rt)
    if args.out:
        for p in result.write(args.out):
            logger.info("wrote %s", p)
    if args.report_dir:
        from memnav.plotting import plot_suite

        plot_suite(result.rows, args.report_dir, suite.name)
        result.write(Path(args.report_dir) / suite.name)
    _save_memory(args.memory_dir, store)
    print(result.table())
    return EXIT_OK if all(r["success"] for r in result.rows) else EXIT_FAILED


def cmd_build_semantic_memory(args) -> int:
    cfg = _config(args)
    if args.train_dir:
        p = Path(args.train_dir)
        suite = load_suite(p / "suite.yaml" if p.is_dir() else p)
    else:
        suite = build_training_suite(seed=100 + (args.seed or 0))
    seed = cfg.run.seed
    store, reports = build_semantic_memory(suite, cfg, seed=seed)
    out = Path(args.out)
    if out.suffix == ".mem":
        out.parent.mkdir(parents=True, exist_ok=True)
        store.save(out)
    else:
        episodic = load_memory(out).episodic if (out / "index.json").is_file() else EpisodicStore(store.dim)
        snapshot_memory(MemoryStores(episodic, store), out)
    for r in reports:
        stop = "n/a" if r.s_stop is None else f"{r.s_stop:.1f}"
        print(f"{r.script_id:<30} steps {r.steps:>3}  S_stop {stop:>4}  deviations {r.deviations}  "
              f"rules {r.rules}{'  error: ' + r.error if r.error else ''}")
    print(f"{len(store)} rule(s) written to {out}")
    return EXIT_OK if len(store) else EXIT_FAILED


def cmd_inspect_memory(args) -> int:
    cfg = _config(args)
    root = Path(args.memory_dir)
    stores = load_memory(root) if (root / "index.json").is_file() else None
    if stores is None and not args.rules:
        raise UsageError(f"no memory snapshot in {root}")
    rules = stores.rules if stores else None
    if args.rules:
        rules = _rules(args.rules)
    from memnav.config import make_embedder

    embedder = make_embedder(cfg)
    if stores is not None:
        print(f"memory {root}: D={stores.episodic.dim}, {len(stores.episodic)} episode(s), "
              f"{len(rules) if rules else 0} rule(s)")
        for rec in stores.episodic:
            print(f"  [{rec.created_at:>3}] {rec.episode_id}  scene={rec.scene_tag}  "
                  f"observations={len(rec.semantic_space)}  regions={rec.semantic_space.region_count}  "
                  f"map={rec.physical_space.width}x{rec.physical_space.height}")
    if args.query:
        if stores is None:
            raise UsageError("--query needs a memory directory")
        q = embed(embedder, args.query, stores.episodic.dim)
        hits = []
        for rec in stores.episodic:
            for obs_id, ridx, sim in query_regions(rec.semantic_space, q, args.top_k):
                obs = rec.semantic_space.get(obs_id)
                hits.append((-sim, rec.episode_id, obs_id, obs.regions[ridx].label, obs.pose.xy))
        hits.sort(key=lambda h: h[0])
        print(f"top {args.top_k} regions for {args.query!r}:")
        for neg, eid, oid, label, xy in hits[: args.top_k]:
            print(f"  {-neg:.4f}  {label:<14} {eid} / {oid} seen from ({xy[0]:.2f}, {xy[1]:.2f})")
    if args.question:
        if rules is None:
            raise UsageError("--question needs rules (in the memory directory or via --rules)")
        print(f"top {args.top_k} rules for {args.question!r}:")
        for rule, sim in retrieve_rules(rules, args.question, embedder, args.top_k):
            print(f"  {sim:.4f}  [{rule.form.value}] @{rule.anchor}: {rule.key} -> {rule.value}")
    return EXIT_OK


def cmd_gen_scenes(args) -> int:
    path = write_generated(args.out, args.count, args.seed)
    print(f"wrote {args.count} scene(s) and {path}")
    return EXIT_OK


def cmd_export_map(args) -> int:
    if args.scene:
        scene = load_scene(args.scene)
        grid = rasterize(scene)
        _write_map(grid, args.out, title=scene.name)
    else:
        if not args.memory_dir:
            raise UsageError("export-map needs --scene or --memory-dir")
        store = load_memory(args.memory_dir).episodic
        if not len(store):
            raise UsageError("memory holds no episodes")
        rec = store.get(args.episode) if args.episode else store.episodes[-1]
        obs = rec.semantic_space.observations
        trajectory = [o.pose.xy for o in obs]
        amap = None
        if obs:
            amap = render_retrieved_poses(rec.physical_space, [], obs[-1].pose,
                                          extract_frontiers(rec.physical_space))
        _write_map(rec.physical_space, args.out, trajectory, amap=amap, title=rec.episode_id)
    print(f"wrote {args.out}")
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="memnav", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", help="YAML config file")
        if seed:
            p.add_argument("--seed", type=int)

    p = sub.add_parser("run-episode", help="run one episode in a scene")
    common(p)
    p.add_argument("--scene", required=True, help="scene YAML or built-in scene name")
    p.add_argument("--question")
    p.add_argument("--script", help="episode script YAML (instead of --question)")
    p.add_argument("--target", help="target category (default: first category in the question)")
    p.add_argument("--answer", help="reference answer (default: target, or its room for 'where' questions)")
    p.add_argument("--spawn", type=int, default=0)
    p.add_argument("--budget", type=int)
    p.add_argument("--recall", type=_on_off)
    p.add_argument("--rules", help="rules file, memory directory, or 'off'")
    p.add_argument("--memory-dir", help="episodic memory to recall from and append to")
    p.add_argument("--episode-id")
    p.add_argument("--log-out")
    p.add_argument("--map-out", help=".png (annotated) or .pgm")
    p.set_defaults(func=cmd_run_episode)

    p = sub.add_parser("run-suite", help="run a suite file")
    common(p)
    p.add_argument("suite")
    p.add_argument("--jobs", type=int)
    p.add_argument("--budget", type=int)
    p.add_argument("--recall", type=_on_off)
    p.add_argument("--rules", help="rules file, memory directory, or 'off'")
    p.add_argument("--memory-dir")
    p.add_argument("--out", help="result base path; writes .json, .csv and .txt")
    p.add_argument("--report-dir", help="directory for PNG charts and result files")
    p.set_defaults(func=cmd_run_suite)

    p = sub.add_parser("build-semantic-memory", help="distil rules from training episodes")
    common(p)
    p.add_argument("--train-dir", help="directory with suite.yaml, or a suite file (default: built-in)")
    p.add_argument("--out", required=True, help="rules file (*.mem) or memory directory")
    p.set_defaults(func=cmd_build_semantic_memory)

    p = sub.add_parser("inspect-memory", help="list and query a memory snapshot")
    common(p, seed=False)
    p.add_argument("memory_dir")
    p.add_argument("--query", help="text query over stored regions")
    p.add_argument("--question", help="question to retrieve rules for")
    p.add_argument("--rules", help="rules file overriding the snapshot's")
    p.add_argument("--top-k", type=int, default=5)
    p.set_defaults(func=cmd_inspect_memory)

    p = sub.add_parser("gen-scenes", help="generate scenes, scripts and a suite file")
    p.add_argument("--count", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_scenes)

    p = sub.add_parser("export-map", help="write a scene raster or a stored episode map")
    common(p, seed=False)
    p.add_argument("--scene")
    p.add_argument("--memory-dir")
    p.add_argument("--episode")
    p.add_argument("--out", required=True, help=".png or .pgm")
    p.set_defaults(func=cmd_export_map)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, MemNavError, ValueError, KeyError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"memnav: error: {msg}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
