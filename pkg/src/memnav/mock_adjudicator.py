"""A scripted adjudicator that answers from simulator ground truth.

It stands in for a multimodal model: image references are resolved to
poses and the objects visible from them, so every decision is the one a
perfect observer would make. Replies are plain text run through the same
schema parsers as a real model's.
"""

from __future__ import annotations

import json
import math
import re

from memnav.gateway import ChatRequest, ScriptedChat, ScriptRule
from memnav.simulator import Simulator, Vocabulary, load_vocabulary, normalize_answer, parse_image_ref

ROOM_RULE = "answer with the room name only"

WORKFLOW = {
    "variables": [
        {"name": "goal", "description": "target object and context from the question"},
        {"name": "frontiers", "description": "reachable boundaries of the explored map"},
        {"name": "candidate", "description": "region currently believed to be the target"},
        {"name": "memory", "description": "views recalled from earlier visits"},
        {"name": "answer", "description": "reply to the question"},
    ],
    "functions": [
        {"name": "recall_episode", "description": "retrieve and verify views from past visits"},
        {"name": "select_frontier", "description": "pick the next frontier to explore"},
        {"name": "verify_target", "description": "confirm or reject a candidate"},
        {"name": "approach_target", "description": "move next to the confirmed candidate"},
        {"name": "answer_question", "description": "compose the final answer"},
    ],
    "body": [
        "memory = recall_episode(goal)",
        "while candidate is None:",
        "    candidate = select_frontier(frontiers, memory)",
        "    if not verify_target(candidate, goal):",
        "        candidate = None",
        "approach_target(candidate)",
        "answer = answer_question(goal, candidate)",
    ],
}


def is_location_question(text: str) -> bool:
    return re.match(r"\s*where\b", text, re.IGNORECASE) is not None


class SimAdjudicator:
    """Ground-truth replies for every decision the agent asks a model to make."""

    def __init__(self, sims: Simulator | list[Simulator] = (), vocab: Vocabulary | None = None,
                 locality_radius: float = 3.0, frontier_choice: int = 0):
        self.sims: dict[str, Simulator] = {}
        for sim in [sims] if isinstance(sims, Simulator) else sims:
            self.add(sim)
        self.vocab = vocab or load_vocabulary()
        self.locality_radius = locality_radius
        self.frontier_choice = frontier_choice

    def add(self, sim: Simulator) -> "SimAdjudicator":
        self.sims[sim.name] = sim
        return self

    # -- ground truth lookups

    def _seen(self, ref: str) -> list[str]:
        parsed = parse_image_ref(ref)
        if parsed is None or parsed[0] not in self.sims:
            return []
        return self.sims[parsed[0]].categories_seen_from(ref)

    def _visible_instance(self, refs, category: str):
        best = None
        for ref in refs:
            parsed = parse_image_ref(ref)
            if parsed is None or parsed[0] not in self.sims:
                continue
            sim, pose = self.sims[parsed[0]], parsed[1]
            if not sim.is_free(*pose.xy):
                continue
            for _, obj in sim.visible_objects(pose):
                d = math.hypot(obj.position[0] - pose.x, obj.position[1] - pose.y)
                if obj.category == category and (best is None or d < best[0]):
                    best = (d, sim, obj)
        return best

    # -- replies per task

    def decompose(self, req: ChatRequest) -> str:
        text = str(req.tags.get("instruction", req.text()))
        cats = self.vocab.find_categories(text)
        areas = self.vocab.find_areas(text)
        target = None
        for ref in req.images():
            parsed = parse_image_ref(ref)
            if parsed is None or parsed[0] not in self.sims:
                continue
            sim, pose = self.sims[parsed[0]], parsed[1]
            seen = sorted(sim.visible_objects(pose),
                          key=lambda io: math.hypot(io[1].position[0] - pose.x, io[1].position[1] - pose.y))
            if seen:
                target = seen[0][1].category
                break
        if target is None:
            if not cats:
                return "I could not find an object in this instruction."
            target = cats[0]
        rel = [c for c in cats if c != target]
        return json.dumps({"target": target, "rel_objects": rel, "rel_areas": areas})

    def verify_locality(self, req: ChatRequest) -> str:
        a = parse_image_ref(str(req.tags.get("current", "")))
        b = parse_image_ref(str(req.tags.get("candidate", "")))
        if a is None or b is None or a[0] != b[0]:
            return "no"
        d = math.hypot(a[1].x - b[1].x, a[1].y - b[1].y)
        return "yes" if d <= self.locality_radius else "no"

    def decide_explore(self, req: ChatRequest) -> str:
        target = str(req.tags.get("target", ""))
        refs = req.tags.get("images", req.images())
        return "no" if any(target in self._seen(r) for r in refs) else "yes"

    def select_frontier(self, req: ChatRequest) -> str:
        count = int(req.tags.get("count", 1))
        return str(min(self.frontier_choice, count - 1))

    def verify_target(self, req: ChatRequest) -> str:
        target = str(req.tags.get("target", ""))
        return "yes" if any(target in self._seen(r) for r in req.images()) else "no"

    def answer(self, req: ChatRequest) -> str:
        question = str(req.tags.get("question", ""))
        target = str(req.tags.get("target", ""))
        forced = bool(req.tags.get("forced", False))
        hit = self._visible_instance(req.images(), target)
        if hit is None:
            return "I do not know." if forced else "NOT READY"
        _, sim, obj = hit
        if is_location_question(question):
            if ROOM_RULE in req.system.lower():
                return obj.area
            others = [o for o in sim.scene.objects if o is not obj]
            if not others:
                return f"It is in the {obj.area}."
            near = min(others, key=lambda o: math.hypot(o.position[0] - obj.position[0],
                                                        o.position[1] - obj.position[1]))
            return f"It is near the {near.category}."
        return f"The {obj.category}."

    def extract_pseudocode(self, req: ChatRequest) -> str:
        return json.dumps(WORKFLOW)

    def extract_rules(self, req: ChatRequest) -> str:
        question = str(req.tags.get("question", ""))
        if is_location_question(question):
            rules = [
                {"form": "if-then", "key": "the question asks where an object is",
                 "value": ROOM_RULE, "anchor": "answer_question"},
                {"form": "situation-suggestion", "key": "several frontiers are about equally close",
                 "value": "prefer the one leading into rooms not yet visited", "anchor": "select_frontier"},
            ]
        else:
            rules = [
                {"form": "problem-solution", "key": "the route drifted away from the target room",
                 "value": "check candidates against the goal before approaching them",
                 "anchor": "verify_target"},
            ]
        return json.dumps({"rules": rules})

    def judge(self, req: ChatRequest) -> str:
        a = normalize_answer(str(req.tags.get("answer", "")))
        b = normalize_answer(str(req.tags.get("reference", "")))
        return "yes" if a and a == b else "no"

    def client(self) -> ScriptedChat:
        tasks = {
            "decompose_goal": self.decompose,
            "verify_locality": self.verify_locality,
            "decide_explore": self.decide_explore,
            "select_frontier": self.select_frontier,
            "verify_target": self.verify_target,
            "answer": self.answer,
            "extract_pseudocode": self.extract_pseudocode,
            "extract_rules": self.extract_rules,
            "judge": self.judge,
        }
        return ScriptedChat([ScriptRule(fn, task=name) for name, fn in tasks.items()], default="no")
