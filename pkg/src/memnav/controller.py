"""The cognitive loop: one state-dependent decision per observation.

Each step integrates the new view into the semantic and physical spaces,
acts according to the current state, and logs what it did together with
the state it moves to. Exploration may first consult episodic memory;
answering may be primed with retrieved rules.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from memnav.episodic_memory import (
    EpisodeRecord,
    EpisodicRecall,
    EpisodicStore,
    decide_explore,
    retrieve_similar,
    select_episode,
    verify_locality,
)
from memnav.errors import (
    ConfigurationError,
    DecompositionError,
    GatewayError,
    MemNavError,
    SchemaError,
    VerificationError,
)
from memnav.gateway import ChatClient, ChatRequest, ChatTurn, Embedder, complete
from memnav.physical_space import (
    Cell,
    OccupancyGrid,
    Pose,
    compute_spl,
    distance_field,
    extract_frontiers,
    integrate_depth_scan,
    prune_frontiers,
    render_retrieved_poses,
)
from memnav.semantic_memory import (
    LogEntry,
    ReasoningLog,
    RuleStore,
    TrajectoryPoint,
    format_rules_for_prompt,
    retrieve_rules,
)
from memnav.semantic_space import GoalSpec, Observation, SemanticStore, Tier, decompose_goal, query_goal
from memnav.states import CRA, TA, TV, CognitiveState, E, Signals, is_legal, transition

logger = logging.getLogger(__name__)


@dataclass
class AgentConfig:
    d_min: float = 1.5
    k_retrieve: int = 8
    k_match: int = 8
    rule_top_k: int = 3
    step_budget: int = 50
    success_radius: float = 1.0
    min_unknown_area: int = 10
    recall_enabled: bool = True
    rules_enabled: bool = True
    rng_seed: int = 0
    trigger: float = 0.75
    max_move: float = 3.0
    approach_radius: float = 0.6
    min_frontier_cells: int = 3
    resolution: float = 0.1
    dim: int = 384

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("k_retrieve", "k_match", "rule_top_k", "step_budget", "min_unknown_area"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        for name in ("success_radius", "max_move", "approach_radius", "resolution", "d_min"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.approach_radius > self.success_radius:
            raise ConfigurationError("approach_radius must not exceed success_radius")


# ------------------------------------------------------------------- actions


@dataclass(frozen=True)
class MoveTo:
    waypoint: tuple[float, float]
    path: tuple[tuple[float, float], ...] = ()

    def __str__(self) -> str:
        return f"MoveTo({self.waypoint[0]:.2f}, {self.waypoint[1]:.2f})"


@dataclass(frozen=True)
class Verify:
    observation_id: str

    def __str__(self) -> str:
        return f"Verify({self.observation_id})"


@dataclass(frozen=True)
class Answer:
    text: str

    def __str__(self) -> str:
        return f"Answer({self.text!r})"


@dataclass(frozen=True)
class Stop:
    reason: str = ""

    def __str__(self) -> str:
        return f"Stop({self.reason})"


Action = MoveTo | Verify | Answer | Stop


@dataclass
class StepOutcome:
    action: Action
    new_state: CognitiveState
    log_entry: LogEntry


@dataclass
class _Candidate:
    observation_id: str
    label: str
    position: tuple[float, float]
    similarity: float
    image_ref: str


# ------------------------------------------------------------------- prompts

SELECT_FRONTIER_SYSTEM = (
    "You steer an indoor robot that explores to find an object. You get numbered frontiers, "
    "the boundaries between mapped and unmapped space. Reply with the number of the frontier "
    "to explore next."
)
VERIFY_TARGET_SYSTEM = (
    "You check a detection for an indoor robot. Given the goal and the view containing the "
    "candidate, reply yes if the candidate is the goal object, otherwise no."
)
ANSWER_SYSTEM = (
    "You are an indoor robot answering a question about the building it is exploring. Use the "
    "views provided. If they do not yet let you answer, reply exactly NOT READY. Otherwise reply "
    "with a short answer."
)
FORCED_SUFFIX = " You must answer now from what you have seen; do not reply NOT READY."


def _polyline_length(points) -> float:
    return sum(math.hypot(b[0] - a[0], b[1] - a[1]) for a, b in zip(points, points[1:]))


def _truncate(points: list[tuple[float, float]], limit: float) -> list[tuple[float, float]]:
    """Longest prefix of a polyline whose length stays within ``limit``."""
    out = [points[0]]
    total = 0.0
    for a, b in zip(points, points[1:]):
        total += math.hypot(b[0] - a[0], b[1] - a[1])
        if total > limit + 1e-9:
            break
        out.append(b)
    return out


class Agent:
    """Single-episode agent; not shared across threads."""

    def __init__(
        self,
        instruction: str,
        config: AgentConfig,
        mllm: ChatClient,
        embedder: Embedder,
        episodic: EpisodicStore | None = None,
        rules: RuleStore | None = None,
        episode_id: str = "episode",
        goal: GoalSpec | None = None,
    ):
        self.instruction = instruction
        self.config = config
        self.mllm = mllm
        self.embedder = embedder
        self.episodic = episodic
        self.rules = rules
        self.episode_id = episode_id
        self.goal = goal
        self.semantic = SemanticStore(config.dim)
        self.grid: OccupancyGrid | None = None
        self.log = ReasoningLog()
        self.state: CognitiveState = CRA if config.step_budget == 1 else E
        self.t = 0
        self.pose: Pose | None = None
        self.candidate: _Candidate | None = None
        self.rejected: list[tuple[float, float]] = []
        self.dead_ends: list[tuple[float, float]] = []
        self.recall: EpisodicRecall | None = None
        self.recall_done = False
        self.explore = True
        self.landmarks: list[tuple[float, float]] = []
        self.recalled_map: OccupancyGrid | None = None
        self.answer: str | None = None
        self.status = "running"
        self._last_image = ""

    @property
    def finished(self) -> bool:
        return self.status != "running"

    def ensure_goal(self) -> GoalSpec:
        if self.goal is None:
            self.goal = decompose_goal(self.instruction, self.mllm, self.embedder)
        return self.goal

    # -- the step

    def step(self, obs: Observation, scan=None, max_range: float | None = None) -> StepOutcome:
        if self.finished:
            raise RuntimeError("episode already finished")
        self.ensure_goal()
        self.pose = obs.pose
        self._last_image = obs.image_ref
        if self.grid is None:
            self.grid = OccupancyGrid.around(obs.pose.x, obs.pose.y, 2.0, self.config.resolution)
        if scan is not None:
            self.grid = integrate_depth_scan(self.grid, obs.pose, scan, max_range)
        self.semantic.insert(obs)

        state = self.state
        budget_edge = self.t >= self.config.step_budget - 2 and state is not CRA
        last_step = self.t >= self.config.step_budget - 1
        if state is E:
            action, signals, decision = self._explore_step(obs)
        elif state is TV:
            action, signals, decision = self._verify_step()
        elif state is TA:
            action, signals, decision = self._approach_step()
        else:
            action, signals, decision = self._answer_step(forced=last_step)

        if isinstance(action, Answer):
            new_state = CRA
            self.answer = action.text
            self.status = "answered"
        elif isinstance(action, Stop):
            new_state = state
            self.status = "stopped"
        else:
            if budget_edge:
                signals = Signals(budget_exhausted=True)
                decision += "; step budget nearly spent, answering next"
            new_state = transition(state, signals)

        entry = LogEntry(
            self.t, state, decision,
            TrajectoryPoint(self.t, obs.pose.xy, state, obs.image_ref),
            new_state, str(action),
        )
        self.log.append(entry)
        self.state = new_state
        self.t += 1
        return StepOutcome(action, new_state, entry)

    # -- Exploration

    def _find_candidate(self) -> _Candidate | None:
        matches = query_goal(self.semantic, self.goal, max(10, self.config.k_match))
        for m in matches:
            if m.priority_tier != Tier.TARGET or m.similarity < self.config.trigger:
                continue
            obs = self.semantic.get(m.observation_id)
            region = obs.regions[m.region_index]
            pos = (float(region.box.center[0]), float(region.box.center[1]))
            if any(math.hypot(pos[0] - r[0], pos[1] - r[1]) < 0.5 for r in self.rejected):
                continue
            return _Candidate(obs.id, region.label, pos, m.similarity, obs.image_ref)
        return None

    def _run_recall(self, obs: Observation) -> str:
        self.recall_done = True
        if not self.config.recall_enabled or self.episodic is None or len(self.episodic) == 0:
            return "recall skipped"
        cands = retrieve_similar(self.episodic, obs, self.config.k_retrieve)
        if not cands:
            return "recall found no similar views"
        try:
            verified = verify_locality(cands, obs.image_ref, self.mllm)
        except VerificationError as exc:
            logger.warning("locality verification failed, exploring: %s", exc)
            return "recall verification failed"
        recall = select_episode(verified, self.goal, self.episodic, self.config.k_match)
        decision = decide_explore(recall, self.goal, self.mllm)
        self.recall = recall
        self.explore = decision.explore
        if recall is not None and not decision.explore:
            strong = [p.xy for p, s in zip(recall.retrieved_poses, recall.scores) if s >= self.config.trigger]
            self.landmarks = strong or [p.xy for p in recall.retrieved_poses]
            self.recalled_map = self.episodic.get(recall.source_episode_id).physical_space
        n = len(verified)
        return (f"recalled {n} verified view(s) from {recall.source_episode_id if recall else 'no episode'}; "
                f"{decision.rationale}")

    def _explore_step(self, obs: Observation):
        cand = self._find_candidate()
        if cand is not None:
            self.candidate = cand
            return (Verify(cand.observation_id), Signals(target_candidate_found=True),
                    f"candidate {cand.label} (similarity {cand.similarity:.3f}) at "
                    f"({cand.position[0]:.2f}, {cand.position[1]:.2f})")
        notes = []
        if not self.recall_done:
            notes.append(self._run_recall(obs))

        if not self.explore:
            move = self._toward_landmark()
            if move is not None:
                notes.append(f"heading to recalled view at ({move.waypoint[0]:.2f}, {move.waypoint[1]:.2f})")
                return move, Signals(), "; ".join(notes)

        for explore in ([self.explore, True] if not self.explore else [True]):
            move, note = self._toward_frontier(explore)
            if move is not None:
                if explore != self.explore:
                    self.explore = True
                    notes.append("no frontier left away from recalled views, exploring freely")
                notes.append(note)
                return move, Signals(), "; ".join(notes)
        notes.append("no reachable frontier")
        return Stop("no reachable frontier"), Signals(), "; ".join(notes)

    def _path_move(self, field_, cell: tuple[int, int]) -> MoveTo | None:
        path = field_.path_to(cell)
        if path is None:
            return None
        pts = _truncate(path.points, self.config.max_move)
        if len(pts) == 1:
            return MoveTo(self.pose.xy, ())
        return MoveTo(pts[-1], tuple(pts[1:]))

    def _landmark_route(self, target: tuple[float, float], optimistic) -> list[tuple[float, float]] | None:
        """Route to a landmark: over the recalled map when it knows one, else optimistic."""
        here = self.pose.xy
        prior = self.recalled_map
        if prior is not None and prior.contains(*here) and prior.contains(*target):
            path = distance_field(prior, here).path_to(prior.world_to_cell(*target))
            if path is not None:
                return path.points
        path = optimistic.path_to(self.grid.world_to_cell(*target))
        return path.points if path is not None else None

    def _toward_landmark(self) -> MoveTo | None:
        """Head for the nearest recalled view.

        The route comes from the recalled episode's map (read-only) or, when
        that has none, from planning through Unknown cells. Only the leading
        run of cells Free in the current map is driven, so waypoints stay in
        mapped free space and the two maps are never merged.
        """
        here = self.pose.xy
        self.grid, _ = self.grid.grown(self.landmarks, margin=2)
        optimistic = distance_field(self.grid, here, through_unknown=True)
        while self.landmarks:
            self.landmarks = [p for p in self.landmarks if math.hypot(p[0] - here[0], p[1] - here[1]) > 0.3]
            routes = []
            for i, p in enumerate(self.landmarks):
                pts = self._landmark_route(p, optimistic)
                if pts is not None:
                    routes.append((_polyline_length(pts), i, pts))
            if not routes:
                self.landmarks = []
                return None
            _, i, route = min(routes)
            target = self.landmarks[i]
            known = [route[0]]
            for pt in route[1:]:
                cell = self.grid.world_to_cell(*pt)
                if not self.grid.in_bounds(*cell) or self.grid.cells[cell] != Cell.FREE:
                    break
                known.append(pt)
            pts = _truncate(known, self.config.max_move)
            if len(pts) > 1:
                if len(pts) == len(route):
                    self.landmarks.remove(target)
                return MoveTo(pts[-1], tuple(pts[1:]))
            # cannot advance toward this one from here
            self.landmarks.remove(target)
        return None

    def _toward_frontier(self, explore: bool) -> tuple[MoveTo | None, str]:
        frontiers = extract_frontiers(self.grid, self.config.min_unknown_area)
        poses = self.recall.retrieved_poses if self.recall is not None else []
        amap = render_retrieved_poses(self.grid, poses, self.pose, frontiers)
        self.grid = amap.grid
        kept = prune_frontiers(amap, explore, self.config.d_min)
        field_ = distance_field(self.grid, self.pose.xy)
        ranked = []
        for f in kept:
            cells = sorted(f.cells, key=lambda c: (field_.cost_to(c), c))
            cost = field_.cost_to(cells[0])
            if not math.isfinite(cost):
                continue
            goal_xy = self.grid.cell_center(*cells[0])
            if any(math.hypot(goal_xy[0] - d[0], goal_xy[1] - d[1]) < 0.5 for d in self.dead_ends):
                continue
            ranked.append((cost, f.dist_to_retrieved if not explore else 0.0, cells[0], f))
        if not ranked:
            return None, ""
        # 4-connected clustering leaves single cells along diagonal shadow edges; use them last
        large = [r for r in ranked if r[3].size >= self.config.min_frontier_cells]
        ranked = large or ranked
        if explore:
            ranked.sort(key=lambda r: (r[0], r[2]))
        else:
            ranked.sort(key=lambda r: (r[1], r[0], r[2]))
        choice = self._choose_frontier(ranked)
        cost, _, cell, f = ranked[choice]
        goal_xy = self.grid.cell_center(*cell)
        if cost <= self.grid.resolution * 1.5:
            # standing on it already: this frontier cannot be cleared from here
            self.dead_ends.append(goal_xy)
        move = self._path_move(field_, cell)
        return move, (f"frontier {choice} of {len(ranked)} at ({f.centroid[0]:.2f}, {f.centroid[1]:.2f}), "
                      f"{cost:.2f} m away")

    def _choose_frontier(self, ranked) -> int:
        if len(ranked) == 1:
            return 0
        lines = [
            f"{i}: frontier near ({f.centroid[0]:.2f}, {f.centroid[1]:.2f}), {f.size} cells, "
            f"{cost:.2f} m away"
            + (f", {f.dist_to_retrieved:.2f} m from recalled views" if math.isfinite(f.dist_to_retrieved) else "")
            for i, (cost, _, _, f) in enumerate(ranked)
        ]
        req = ChatRequest(
            SELECT_FRONTIER_SYSTEM,
            [ChatTurn("user", f"Goal: {self.instruction}\nFrontiers:\n" + "\n".join(lines), [self._last_image])],
            schema="index-choice",
            options=len(ranked),
            tags={"task": "select_frontier", "count": len(ranked)},
        )
        try:
            return int(complete(self.mllm, req))
        except (GatewayError, SchemaError) as exc:
            logger.info("frontier choice failed, taking the nearest: %s", exc)
            return 0

    # -- TargetVerification

    def _verify_step(self):
        cand = self.candidate
        req = ChatRequest(
            VERIFY_TARGET_SYSTEM,
            [ChatTurn("user", f"Goal: {self.goal.target_text}\nCandidate: {cand.label} at "
                      f"({cand.position[0]:.2f}, {cand.position[1]:.2f}). Is it the goal?", [cand.image_ref])],
            schema="yes-no",
            tags={"task": "verify_target", "target": self.goal.target_text, "images": [cand.image_ref],
                  "candidate": cand.label},
        )
        try:
            confirmed = bool(complete(self.mllm, req))
        except (GatewayError, SchemaError) as exc:
            logger.warning("target verification failed, rejecting candidate: %s", exc)
            confirmed = False
        if not confirmed:
            self.rejected.append(cand.position)
            self.candidate = None
        return (Verify(cand.observation_id), Signals(target_confirmed=confirmed),
                f"candidate {cand.label} {'confirmed' if confirmed else 'rejected'}")

    # -- TargetApproaching

    def _approach_step(self):
        target = self.candidate.position
        here = self.pose.xy
        radius = self.config.approach_radius
        if math.hypot(target[0] - here[0], target[1] - here[1]) <= radius:
            return MoveTo(here, ()), Signals(at_target=True), "at the target"
        field_ = distance_field(self.grid, here)
        res = self.grid.resolution
        xs = self.grid.origin[0] + (np.arange(self.grid.width) + 0.5) * res
        ys = self.grid.origin[1] + (np.arange(self.grid.height) + 0.5) * res
        d = np.hypot(xs[:, None] - target[0], ys[None, :] - target[1])
        reachable = np.isfinite(field_.dist) & (self.grid.cells == Cell.FREE)
        near = reachable & (d <= radius)
        if near.any():
            cost = np.where(near, field_.dist, np.inf)
        elif reachable.any():
            # approach region not mapped yet: get as close as the map allows
            cost = np.where(reachable, d * 1000.0 + field_.dist, np.inf)
        else:
            return MoveTo(here, ()), Signals(at_target=True), "target unreachable on the map, checking answer"
        cell = np.unravel_index(int(np.argmin(cost)), cost.shape)
        cell = (int(cell[0]), int(cell[1]))
        move = self._path_move(field_, cell)
        if move is None or move.waypoint == here:
            return MoveTo(here, ()), Signals(at_target=True), "no closer approach point, checking answer"
        end = move.waypoint
        arrived = math.hypot(target[0] - end[0], target[1] - end[1]) <= radius
        return move, Signals(at_target=arrived), (
            f"approaching {self.candidate.label}, {math.hypot(target[0] - end[0], target[1] - end[1]):.2f} m left")

    # -- CheckReadyToAnswer

    def _answer_step(self, forced: bool):
        system = ANSWER_SYSTEM + (FORCED_SUFFIX if forced else "")
        rules_text = ""
        if self.config.rules_enabled and self.rules is not None and len(self.rules):
            try:
                picked = retrieve_rules(self.rules, self.instruction, self.embedder, self.config.rule_top_k)
                rules_text = format_rules_for_prompt([r for r, _ in picked])
            except MemNavError as exc:
                logger.warning("rule retrieval failed, answering without rules: %s", exc)
        if rules_text:
            system += "\n\nRules learned from earlier runs:\n" + rules_text
        images = [self.candidate.image_ref] if self.candidate else []
        if self._last_image and self._last_image not in images:
            images.append(self._last_image)
        if not images:
            images = [m.image_ref for m in self.semantic.observations[-3:]]
        req = ChatRequest(
            system,
            [ChatTurn("user", f"Question: {self.instruction}", images)],
            schema="free-text",
            tags={"task": "answer", "question": self.instruction, "target": self.goal.target_text,
                  "images": images, "forced": forced},
        )
        try:
            reply = str(complete(self.mllm, req)).strip()
        except (GatewayError, SchemaError) as exc:
            logger.warning("answering failed: %s", exc)
            reply = "" if forced else "NOT READY"
        if not forced and reply.upper().startswith("NOT READY"):
            if self.candidate is not None:
                self.rejected.append(self.candidate.position)
                self.candidate = None
            return MoveTo(self.pose.xy, ()), Signals(ready_to_answer=False), "not ready to answer, exploring"
        return Answer(reply), Signals(ready_to_answer=True), f"answer: {reply}"


# ------------------------------------------------------------------ episodes


class Environment(Protocol):
    def start_pose(self) -> Pose: ...

    def observe(self, pose: Pose, episode_id: str, timestep: int) -> tuple[Observation, list]: ...

    def move(self, pose: Pose, path) -> tuple[Pose, float, bool]: ...

    def evaluate(self, final_pose: Pose, answer: str) -> dict: ...


@dataclass
class EpisodeResult:
    episode_id: str
    answer: str
    success: bool
    steps: int
    path_len: float
    spl: float
    log: ReasoningLog
    status: str
    matched: bool = False
    judge_error: bool = False
    shortest_len: float = 0.0
    final_position: tuple[float, float] = (0.0, 0.0)
    error: str = ""
    extra: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {
            "episode_id": self.episode_id,
            "status": self.status,
            "success": self.success,
            "matched": self.matched,
            "judge_error": self.judge_error,
            "steps": self.steps,
            "path_len": round(self.path_len, 6),
            "shortest_len": round(self.shortest_len, 6),
            "spl": round(self.spl, 6),
            "answer": self.answer,
            "final_position": [round(v, 6) for v in self.final_position],
            "error": self.error,
        }


def run_episode(agent: Agent, env: Environment, store_episode: bool = True) -> EpisodeResult:
    """Drive ``agent`` through ``env`` until it answers, stops or runs out of steps."""
    path_len = 0.0
    error = ""
    pose = None
    try:
        pose = env.start_pose()
        agent.ensure_goal()
        max_range = getattr(env, "max_range", None)
        for t in range(agent.config.step_budget):
            obs, scan = env.observe(pose, agent.episode_id, t)
            outcome = agent.step(obs, scan, max_range)
            if isinstance(outcome.action, MoveTo) and outcome.action.path:
                pose, delta, _ = env.move(pose, outcome.action.path)
                path_len += delta
            if agent.finished:
                break
        else:
            agent.status = "budget"
    except (MemNavError, ValueError) as exc:
        if isinstance(exc, DecompositionError):
            logger.warning("goal decomposition failed: %s", exc)
        agent.status = "aborted"
        error = f"{type(exc).__name__}: {exc}"

    answer = agent.answer or ""
    final = pose if pose is not None else Pose.at(0.0, 0.0)
    verdict = {"success": False, "matched": False, "judge_error": False, "shortest_len": 0.0}
    if agent.status != "aborted":
        try:
            verdict.update(env.evaluate(final, answer))
        except MemNavError as exc:
            error = f"{type(exc).__name__}: {exc}"
    success = bool(verdict["success"]) and agent.status == "answered"
    shortest = float(verdict["shortest_len"])
    spl = compute_spl(success, shortest, path_len)

    if store_episode and agent.episodic is not None and len(agent.semantic) and agent.grid is not None:
        try:
            agent.episodic.append(EpisodeRecord(
                agent.episode_id, agent.semantic, agent.grid,
                agent.episodic.next_timestamp(), getattr(env, "scene_name", None),
            ))
        except ValueError as exc:
            logger.warning("episode not stored: %s", exc)

    return EpisodeResult(
        episode_id=agent.episode_id,
        answer=answer,
        success=success,
        steps=len(agent.log),
        path_len=path_len,
        spl=spl,
        log=agent.log,
        status=agent.status,
        matched=bool(verdict["matched"]),
        judge_error=bool(verdict["judge_error"]),
        shortest_len=shortest,
        final_position=final.xy,
        error=error,
    )


def check_log(log: ReasoningLog, budget: int) -> list[str]:
    """Soundness problems in a finished log (empty when sound)."""
    problems = []
    if len(log) > budget:
        problems.append(f"{len(log)} steps exceed the budget of {budget}")
    prev_next = None
    for e in log:
        if e.next_state is not None and not is_legal(e.state, e.next_state):
            problems.append(f"t={e.timestep}: illegal edge {e.state.value} -> {e.next_state.value}")
        if prev_next is not None and e.state is not prev_next:
            problems.append(f"t={e.timestep}: state {e.state.value} does not follow {prev_next.value}")
        if e.action.startswith("Answer(") and e.state is not CRA:
            problems.append(f"t={e.timestep}: answer emitted from {e.state.value}")
        prev_next = e.next_state
    return problems
