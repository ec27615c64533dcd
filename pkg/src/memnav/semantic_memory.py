"""Rule distillation from past runs and question-similarity rule retrieval.

Offline, a run's trajectory is compared with the ground-truth route to find
the timesteps where the agent first drifted past a distance threshold.
Those moments, the reasoning log and a pseudocode summary of the agent's
workflow go to a model that writes key-value rules anchored to workflow
symbols. At test time rules are retrieved by embedding similarity of the
question they were learned from.
"""

from __future__ import annotations

import hashlib
import json
import keyword
import logging
import math
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from memnav.errors import (
    ConfigurationError,
    ExtractionError,
    GatewayError,
    IntegrityError,
    MigrationError,
    SchemaError,
    WorkflowValidationError,
)
from memnav.gateway import SCHEMAS, ChatClient, ChatRequest, ChatTurn, Embedder, complete, embed
from memnav.semantic_space import decode_vector, encode_vector, prepare_query, top_k_indices
from memnav.states import CognitiveState

logger = logging.getLogger(__name__)

RULES_FORMAT_VERSION = 1


@dataclass
class GroundTruthTrajectory:
    waypoints: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.waypoints, dtype=np.float64).reshape(-1, 2)
        if len(pts) < 2:
            raise ValueError("ground-truth trajectory needs at least two waypoints")
        if np.any(np.all(np.diff(pts, axis=0) == 0, axis=1)):
            raise ValueError("consecutive ground-truth waypoints must differ")
        self.waypoints = pts

    @property
    def length(self) -> float:
        return float(np.hypot(*np.diff(self.waypoints, axis=0).T).sum())


@dataclass
class TrajectoryPoint:
    timestep: int
    position: tuple[float, float]
    state: CognitiveState
    image_ref: str = ""


@dataclass
class LogEntry:
    timestep: int
    state: CognitiveState
    decision: str
    point: TrajectoryPoint
    next_state: CognitiveState | None = None
    action: str = ""


@dataclass
class ReasoningLog:
    entries: list[LogEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[LogEntry]:
        return iter(self.entries)

    def append(self, entry: LogEntry) -> None:
        if self.entries and entry.timestep <= self.entries[-1].timestep:
            raise ValueError("log timesteps must strictly increase")
        self.entries.append(entry)

    @property
    def points(self) -> list[TrajectoryPoint]:
        return [e.point for e in self.entries]

    def render(self, limit: int | None = None) -> str:
        lines = []
        for e in self.entries[:limit]:
            x, y = e.point.position
            lines.append(f"t={e.timestep} [{e.state.value}] at ({x:.2f}, {y:.2f}): {e.decision}")
        return "\n".join(lines)

    def to_list(self) -> list[dict]:
        return [
            {
                "timestep": e.timestep,
                "state": e.state.value,
                "next_state": e.next_state.value if e.next_state else None,
                "action": e.action,
                "decision": e.decision,
                "position": list(e.point.position),
                "image_ref": e.point.image_ref,
            }
            for e in self.entries
        ]

    @classmethod
    def from_list(cls, rows: list[dict]) -> "ReasoningLog":
        log = cls()
        for r in rows:
            state = CognitiveState(r["state"])
            log.append(LogEntry(
                r["timestep"], state, r["decision"],
                TrajectoryPoint(r["timestep"], tuple(r["position"]), state, r.get("image_ref", "")),
                CognitiveState(r["next_state"]) if r.get("next_state") else None,
                r.get("action", ""),
            ))
        return log


@dataclass(frozen=True)
class DeviationEvent:
    timestep: int
    h_value: float
    threshold_used: float
    image_ref: str = ""


@dataclass(frozen=True)
class ThresholdSchedule:
    s_hi: float = 2.0
    s_lo: float = 0.2
    step: float = 0.1
    p_stop: float = 0.5
    rng_seed: int = 0

    def __post_init__(self):
        if not (self.s_hi > self.s_lo > 0 and self.step > 0):
            raise ConfigurationError("threshold schedule needs s_hi > s_lo > 0 and step > 0")
        if self.s_hi - self.s_lo < self.step - 1e-12:
            raise ConfigurationError("threshold sweep must span at least one step")
        if not 0 < self.p_stop <= 1:
            raise ConfigurationError("p_stop must lie in (0, 1]")

    def thresholds(self) -> list[float]:
        n = int(math.floor((self.s_hi - self.s_lo) / self.step + 1e-9))
        return [round(self.s_hi - i * self.step, 10) for i in range(n + 1)]


# --------------------------------------------------------------- deviations


def point_to_polyline(points: np.ndarray, polyline: np.ndarray) -> np.ndarray:
    """Distance from each point to the nearest segment of ``polyline``."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 1, 2)
    a = polyline[:-1][None, :, :]
    b = polyline[1:][None, :, :]
    ab = b - a
    denom = np.sum(ab * ab, axis=2)
    t = np.clip(np.sum((p - a) * ab, axis=2) / denom, 0.0, 1.0)
    closest = a + t[..., None] * ab
    return np.sqrt(np.sum((p - closest) ** 2, axis=2)).min(axis=1)


def deviation_series(log: ReasoningLog | Sequence[TrajectoryPoint], gt: GroundTruthTrajectory) -> list[float]:
    points = log.points if isinstance(log, ReasoningLog) else list(log)
    if not points:
        raise ValueError("log must be non-empty")
    positions = np.array([pt.position for pt in points], dtype=np.float64)
    return point_to_polyline(positions, gt.waypoints).tolist()


def crossings(series: Sequence[float], threshold: float) -> list[int]:
    """Timesteps t >= 1 where the series rises past ``threshold``."""
    h = np.asarray(series, dtype=np.float64)
    return (np.flatnonzero((h[1:] > threshold) & (h[:-1] <= threshold)) + 1).tolist()


def detect_deviations(
    series: Sequence[float],
    schedule: ThresholdSchedule,
    points: Sequence[TrajectoryPoint] | None = None,
) -> tuple[float, list[DeviationEvent]]:
    """Sweep the threshold downward and stop at one giving 3-5 deviations.

    Each threshold with 3..5 crossings is accepted with probability
    ``p_stop``. If none is accepted, the eligible threshold whose count is
    closest to 4 wins (larger threshold on ties); with no eligible threshold,
    the largest count not above 5 wins (larger threshold on ties). When
    every threshold yields more than 5, the one with the fewest is used.
    """
    if len(series) < 2:
        raise ValueError("series needs at least two values")
    rng = np.random.default_rng(schedule.rng_seed)
    sweep = [(s, crossings(series, s)) for s in schedule.thresholds()]
    eligible = [(s, ts) for s, ts in sweep if 3 <= len(ts) <= 5]

    chosen = None
    for s, ts in eligible:
        if rng.random() < schedule.p_stop:
            chosen = (s, ts)
            break
    if chosen is None and eligible:
        chosen = min(eligible, key=lambda st: (abs(len(st[1]) - 4), -st[0]))
    if chosen is None:
        capped = [(s, ts) for s, ts in sweep if len(ts) <= 5]
        if capped:
            chosen = max(capped, key=lambda st: (len(st[1]), st[0]))
        else:
            chosen = min(sweep, key=lambda st: (len(st[1]), -st[0]))
    s_stop, ts = chosen
    events = []
    for t in ts:
        if points is not None:
            events.append(DeviationEvent(points[t].timestep, float(series[t]), s_stop, points[t].image_ref))
        else:
            events.append(DeviationEvent(t, float(series[t]), s_stop))
    return s_stop, events


# --------------------------------------------------------------- pseudocode

PSEUDO_KEYWORDS = {
    "then", "do", "end", "endif", "endwhile", "endfor", "until", "repeat", "each", "function",
    "procedure", "begin", "to", "true", "false", "null", "none", "len", "min", "max", "abs",
    "range", "any", "all", "sum", "call", "set", "let", "of", "otherwise", "step",
}
_STRINGS = re.compile(r"\"[^\"]*\"|'[^']*'")
_IDENT = re.compile(r"(?<![\w.])[A-Za-z_][A-Za-z0-9_]*")


def undeclared_symbols(body: Sequence[str], declared: set[str]) -> list[str]:
    """Identifiers used in ``body`` that are neither declared nor keywords."""
    reserved = {k.lower() for k in keyword.kwlist} | PSEUDO_KEYWORDS
    missing = []
    for line in body:
        code = re.split(r"#|//", _STRINGS.sub(" ", line), maxsplit=1)[0]
        for ident in _IDENT.findall(code):
            if ident in declared or ident.lower() in reserved:
                continue
            if ident not in missing:
                missing.append(ident)
    return missing


@dataclass
class PseudocodeWorkflow:
    variables: list[dict]
    functions: list[dict]
    body: list[str]

    @property
    def symbols(self) -> set[str]:
        return {v["name"] for v in self.variables} | {f["name"] for f in self.functions}

    def validate(self) -> None:
        if not self.body:
            raise ValueError("workflow body is empty")
        missing = undeclared_symbols(self.body, self.symbols)
        if missing:
            raise ValueError(f"body references undeclared symbols: {', '.join(missing)}")

    def render(self) -> str:
        lines = ["variables:"]
        lines += [f"  {v['name']}: {v['description']}" for v in self.variables]
        lines.append("functions:")
        lines += [f"  {f['name']}: {f['description']}" for f in self.functions]
        lines.append("body:")
        lines += [f"  {b}" for b in self.body]
        return "\n".join(lines)


PSEUDOCODE_SYSTEM = (
    "You read the reasoning log of an embodied agent and rewrite its behaviour as pseudocode. "
    "First list the variables and the functions that govern the workflow, then write the control "
    "flow using only those names. Reply with JSON only: "
    '{"variables": [{"name": ..., "description": ...}], '
    '"functions": [{"name": ..., "description": ...}], "body": ["line", ...]}'
)


def _check_workflow(value: dict) -> None:
    PseudocodeWorkflow(**value).validate()


def extract_pseudocode(log: ReasoningLog, llm: ChatClient, max_retries: int = 2) -> PseudocodeWorkflow:
    if not len(log):
        raise ValueError("log must be non-empty")
    req = ChatRequest(
        PSEUDOCODE_SYSTEM,
        [ChatTurn("user", f"Reasoning log:\n{log.render()}")],
        schema="workflow",
        max_retries=max_retries,
        tags={"task": "extract_pseudocode"},
        validate=_check_workflow,
    )
    try:
        value = complete(llm, req)
    except GatewayError as exc:
        raise ExtractionError(f"gateway failed during pseudocode extraction: {exc}") from exc
    except SchemaError as exc:
        try:
            parsed = SCHEMAS["workflow"](exc.raw, req)
        except (ValueError, KeyError, TypeError, AttributeError):
            raise ExtractionError(f"pseudocode reply unusable: {exc}", raw=exc.raw) from exc
        problems = undeclared_symbols(parsed["body"], PseudocodeWorkflow(**parsed).symbols)
        raise WorkflowValidationError(
            f"pseudocode uses undeclared symbols: {', '.join(problems)}", raw=exc.raw
        ) from exc
    return PseudocodeWorkflow(**value)


# -------------------------------------------------------------------- rules


class RuleForm(str, Enum):
    IF_THEN = "if-then"
    SITUATION_SUGGESTION = "situation-suggestion"
    PROBLEM_SOLUTION = "problem-solution"

    @classmethod
    def parse(cls, text: str) -> "RuleForm":
        squashed = re.sub(r"[^a-z]", "", text.lower())
        for form in cls:
            if squashed == form.value.replace("-", ""):
                return form
        raise ValueError(f"unknown rule form {text!r}")


@dataclass
class Rule:
    form: RuleForm
    key: str
    value: str
    anchor: str
    source_episode_id: str
    question_embedding: np.ndarray
    question: str = ""

    def __post_init__(self):
        if not self.key.strip() or not self.value.strip():
            raise ValueError("rule key and value must be non-empty")
        self.question_embedding = np.asarray(self.question_embedding, dtype=np.float32)

    def to_dict(self) -> dict:
        return {
            "form": self.form.value,
            "key": self.key,
            "value": self.value,
            "anchor": self.anchor,
            "source_episode_id": self.source_episode_id,
            "question": self.question,
            "embedding": encode_vector(self.question_embedding),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Rule":
        return cls(RuleForm(d["form"]), d["key"], d["value"], d["anchor"], d["source_episode_id"],
                   decode_vector(d["embedding"]), d.get("question", ""))


RULES_SYSTEM = (
    "You distil reusable rules from an embodied agent's run. You get the ground-truth answer, the "
    "reasoning log, a pseudocode summary of the workflow and the timesteps where the agent drifted "
    "from the reference route, each with its view. Write high-level rules that would have avoided the "
    "mistakes. Each rule uses one canonical form (if-then, situation-suggestion, problem-solution), "
    "a key, a value, and an anchor naming exactly one variable or function from the pseudocode. "
    'Reply with JSON only: {"rules": [{"form": ..., "key": ..., "value": ..., "anchor": ...}]}'
)


def extract_rules(
    gt_answer: str,
    log: ReasoningLog,
    workflow: PseudocodeWorkflow,
    events: Sequence[DeviationEvent],
    mllm: ChatClient,
    embedder: Embedder,
    question: str,
    episode_id: str = "",
    max_retries: int = 2,
) -> list[Rule]:
    """Ask the model for anchored rules; rules naming unknown anchors are dropped."""
    text = [
        f"Question: {question}",
        f"Ground-truth answer: {gt_answer}",
        f"Reasoning log:\n{log.render()}",
        f"Pseudocode:\n{workflow.render()}",
    ]
    if events:
        text.append("Decision deviations:\n" + "\n".join(
            f"t={e.timestep}: {e.h_value:.2f} m off route (threshold {e.threshold_used:.2f} m)" for e in events
        ))
    req = ChatRequest(
        RULES_SYSTEM,
        [ChatTurn("user", "\n\n".join(text), [e.image_ref for e in events if e.image_ref])],
        schema="rules",
        max_retries=max_retries,
        tags={"task": "extract_rules", "question": question, "gt_answer": gt_answer,
              "symbols": sorted(workflow.symbols)},
    )
    try:
        raw_rules = complete(mllm, req)
    except (GatewayError, SchemaError) as exc:
        raise ExtractionError(f"rule extraction failed: {exc}", raw=getattr(exc, "raw", "")) from exc

    q_emb = embed(embedder, question).astype(np.float32)
    symbols = workflow.symbols
    rules, dropped = [], 0
    for item in raw_rules:
        try:
            if item["anchor"] not in symbols:
                raise ValueError(f"anchor {item['anchor']!r} is not a workflow symbol")
            rules.append(Rule(RuleForm.parse(item["form"]), item["key"], item["value"], item["anchor"],
                              episode_id, q_emb, question))
        except ValueError as exc:
            dropped += 1
            logger.debug("dropping rule %r: %s", item, exc)
    if dropped:
        logger.warning("dropped %d of %d extracted rules", dropped, len(raw_rules))
    return rules


class RuleStore:
    def __init__(self, dim: int = 384):
        self.dim = dim
        self._rules: list[Rule] = []
        self._matrix: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self._rules)

    def __iter__(self) -> Iterator[Rule]:
        return iter(self._rules)

    @property
    def rules(self) -> list[Rule]:
        return list(self._rules)

    def add(self, rule: Rule) -> None:
        if rule.question_embedding.shape != (self.dim,):
            raise ConfigurationError(f"rule embedding dimension {rule.question_embedding.shape} != {self.dim}")
        self._rules.append(rule)
        self._matrix = None

    def extend(self, rules: Sequence[Rule]) -> None:
        for r in rules:
            self.add(r)

    def matrix(self) -> np.ndarray:
        if self._matrix is None:
            self._matrix = (
                np.vstack([r.question_embedding for r in self._rules]).astype(np.float64)
                if self._rules else np.zeros((0, self.dim))
            )
        return self._matrix

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(rules_to_bytes(self))

    @classmethod
    def load(cls, path: str | Path) -> "RuleStore":
        return rules_from_bytes(Path(path).read_bytes())


def retrieve_rules(store: RuleStore, question: str, embedder: Embedder, k: int) -> list[tuple[Rule, float]]:
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(store) == 0:
        return []
    q = prepare_query(embed(embedder, question), store.dim)
    sims = store.matrix() @ q
    return [(store.rules[i], float(sims[i])) for i in top_k_indices(sims, k)]


_FORM_WORDS = {
    RuleForm.IF_THEN: ("IF", "THEN"),
    RuleForm.SITUATION_SUGGESTION: ("SITUATION", "SUGGESTION"),
    RuleForm.PROBLEM_SOLUTION: ("PROBLEM", "SOLUTION"),
}


def format_rules_for_prompt(rules: Sequence[Rule]) -> str:
    blocks = []
    for i, r in enumerate(rules, 1):
        lead, follow = _FORM_WORDS[r.form]
        blocks.append(
            f"Rule {i} [{r.anchor}] ({r.form.value})\n"
            f"  {lead}: {r.key}\n"
            f"  {follow}: {r.value}\n"
            f"  {r.key} -> {r.value}"
        )
    return "\n\n".join(blocks)


def rules_to_bytes(store: RuleStore) -> bytes:
    body = [json.dumps(r.to_dict(), sort_keys=True, separators=(",", ":")) for r in store]
    digest = hashlib.sha256("\n".join(body).encode("utf-8")).hexdigest()
    header = json.dumps(
        {"format": "rules", "version": RULES_FORMAT_VERSION, "D": store.dim, "count": len(store), "sha256": digest},
        sort_keys=True, separators=(",", ":"),
    )
    return ("\n".join([header] + body) + "\n").encode("utf-8")


def rules_from_bytes(data: bytes) -> RuleStore:
    try:
        lines = data.decode("utf-8").rstrip("\n").split("\n")
        header = json.loads(lines[0])
    except (UnicodeDecodeError, json.JSONDecodeError, IndexError) as exc:
        raise IntegrityError(f"rule file header unreadable: {exc}") from exc
    if header.get("format") != "rules":
        raise IntegrityError("not a rule store file")
    if header.get("version") != RULES_FORMAT_VERSION:
        raise MigrationError(f"rule store version {header.get('version')} unsupported")
    body = lines[1:] if header["count"] else []
    if len(body) != header["count"]:
        raise IntegrityError(f"rule file declares {header['count']} rules, holds {len(body)}")
    if hashlib.sha256("\n".join(body).encode("utf-8")).hexdigest() != header["sha256"]:
        raise IntegrityError("rule file checksum mismatch")
    store = RuleStore(int(header["D"]))
    for line in body:
        store.add(Rule.from_dict(json.loads(line)))
    return store
