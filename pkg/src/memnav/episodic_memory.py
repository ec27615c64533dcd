"""Cross-episode recall: visual retrieval, locality checks, episode selection."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from memnav.errors import ConfigurationError, GatewayError, SchemaError, VerificationError
from memnav.gateway import ChatClient, ChatRequest, ChatTurn, complete
from memnav.physical_space import OccupancyGrid, Pose
from memnav.semantic_space import GoalSpec, Observation, SemanticStore, prepare_query, top_k_indices

logger = logging.getLogger(__name__)


@dataclass
class EpisodeRecord:
    episode_id: str
    semantic_space: SemanticStore
    physical_space: OccupancyGrid
    created_at: int = 0
    scene_tag: str | None = None


@dataclass(frozen=True)
class Candidate:
    episode_id: str
    observation_id: str
    similarity: float
    image_ref: str = ""


@dataclass
class ExploreDecision:
    explore: bool
    rationale: str = ""


@dataclass
class EpisodicRecall:
    source_episode_id: str
    verified_observations: list[str]
    retrieved_poses: list[Pose]
    match_count: int
    image_refs: list[str] = field(default_factory=list)
    scores: list[float] = field(default_factory=list)


class EpisodicStore:
    """Append-only collection of completed episodes.

    ``created_at`` is a logical clock assigned on append, which keeps runs
    reproducible; larger means more recent.
    """

    def __init__(self, dim: int = 384):
        self.dim = dim
        self._episodes: list[EpisodeRecord] = []
        self._index: dict[str, int] = {}
        self._globals: np.ndarray | None = None
        self._rows: list[tuple[int, int]] = []

    def __len__(self) -> int:
        return len(self._episodes)

    def __iter__(self) -> Iterator[EpisodeRecord]:
        return iter(self._episodes)

    def __contains__(self, episode_id: str) -> bool:
        return episode_id in self._index

    @property
    def episodes(self) -> list[EpisodeRecord]:
        return list(self._episodes)

    def get(self, episode_id: str) -> EpisodeRecord:
        return self._episodes[self._index[episode_id]]

    def position(self, episode_id: str) -> int:
        return self._index[episode_id]

    def next_timestamp(self) -> int:
        return max((e.created_at for e in self._episodes), default=-1) + 1

    def append(self, record: EpisodeRecord) -> "EpisodicStore":
        if record.episode_id in self._index:
            raise ValueError(f"episode {record.episode_id!r} already stored")
        if record.semantic_space.dim != self.dim:
            raise ConfigurationError(f"episode dimension {record.semantic_space.dim} != store {self.dim}")
        if len(record.semantic_space) == 0 or record.physical_space.known_count() == 0:
            raise ValueError("completed episodes need non-empty semantic and physical spaces")
        pos = len(self._episodes)
        self._episodes.append(record)
        self._index[record.episode_id] = pos
        self._rows.extend((pos, i) for i in range(len(record.semantic_space)))
        self._globals = None
        return self

    def global_matrix(self) -> np.ndarray:
        if self._globals is None:
            mats = [e.semantic_space.global_matrix() for e in self._episodes]
            self._globals = np.vstack(mats) if mats else np.zeros((0, self.dim))
        return self._globals

    def row_owner(self, row: int) -> tuple[EpisodeRecord, Observation]:
        ep_pos, obs_pos = self._rows[row]
        ep = self._episodes[ep_pos]
        return ep, ep.semantic_space.observations[obs_pos]

    def row_episode_positions(self) -> np.ndarray:
        return np.fromiter((p for p, _ in self._rows), dtype=np.int64, count=len(self._rows))


def retrieve_similar(store: EpisodicStore, current: Observation, k: int) -> list[Candidate]:
    """Top-k past observations by global-embedding cosine, skipping the current episode."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(store) == 0:
        return []
    q = prepare_query(current.global_embedding, store.dim)
    sims = store.global_matrix() @ q
    own = [i for i, e in enumerate(store.episodes) if e.episode_id == current.episode_id]
    if own:
        sims = sims.copy()
        sims[np.isin(store.row_episode_positions(), own)] = -np.inf
    out = []
    for row in top_k_indices(sims, k):
        if not np.isfinite(sims[row]):
            break
        ep, obs = store.row_owner(int(row))
        out.append(Candidate(ep.episode_id, obs.id, float(sims[row]), obs.image_ref))
    return out


VERIFY_SYSTEM = (
    "You compare two egocentric views from an indoor robot. Decide whether they were captured "
    "at nearby locations in the same building. Answer with a single word: yes or no."
)


def _verify_one(mllm: ChatClient, cand: Candidate, current_image_ref: str) -> bool:
    req = ChatRequest(
        VERIFY_SYSTEM,
        [ChatTurn("user", "First image: current view. Second image: remembered view. Same place?",
                  [current_image_ref, cand.image_ref])],
        schema="yes-no",
        tags={"task": "verify_locality", "current": current_image_ref, "candidate": cand.image_ref},
    )
    return complete(mllm, req)


def verify_locality(
    candidates: Sequence[Candidate],
    current_image_ref: str,
    mllm: ChatClient,
    max_workers: int = 1,
) -> list[Candidate]:
    """Keep candidates the adjudicator places near the current view, in input order."""
    if not candidates:
        raise ValueError("verify_locality needs at least one candidate")
    try:
        if max_workers > 1:
            with ThreadPoolExecutor(max_workers) as pool:
                verdicts = list(pool.map(lambda c: _verify_one(mllm, c, current_image_ref), candidates))
        else:
            verdicts = [_verify_one(mllm, c, current_image_ref) for c in candidates]
    except (GatewayError, SchemaError) as exc:
        raise VerificationError(f"locality verification failed: {exc}") from exc
    return [c for c, ok in zip(candidates, verdicts) if ok]


def select_episode(
    verified: Sequence[Candidate],
    goal: GoalSpec,
    store: EpisodicStore,
    k: int,
) -> EpisodicRecall | None:
    """Pick the verified episode holding most of the global top-k target matches.

    Observations are scored by their best region similarity to the target.
    Equal counts go to the most recent episode.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    episode_ids = list(dict.fromkeys(c.episode_id for c in verified))
    if not episode_ids:
        return None
    target = goal.target_object[1]
    pool = []  # (score, episode position, observation position)
    for eid in episode_ids:
        ep_pos = store.position(eid)
        scores = store.get(eid).semantic_space.observation_scores(target)
        pool.extend((float(s), ep_pos, i) for i, s in enumerate(scores) if np.isfinite(s))
    if not pool:
        return None
    pool.sort(key=lambda t: (-t[0], t[1], t[2]))
    top = pool[:k]
    counts: dict[int, int] = {}
    for _, ep_pos, _ in top:
        counts[ep_pos] = counts.get(ep_pos, 0) + 1
    winner = max(counts, key=lambda p: (counts[p], store.episodes[p].created_at, p))
    if counts[winner] == 0:
        return None
    ep = store.episodes[winner]
    picked = [(s, ep.semantic_space.observations[i]) for s, p, i in top if p == winner]
    return EpisodicRecall(
        source_episode_id=ep.episode_id,
        verified_observations=[o.id for _, o in picked],
        retrieved_poses=[o.pose for _, o in picked],
        match_count=len(picked),
        image_refs=[o.image_ref for _, o in picked],
        scores=[s for s, _ in picked],
    )


EXPLORE_SYSTEM = (
    "You are the exploration controller of an indoor robot. Given the task and remembered views "
    "recalled from a previous visit to this building, decide whether further exploration is "
    "required. Answer yes if the remembered views do not show what the task needs, no otherwise."
)


def decide_explore(recall: EpisodicRecall | None, goal: GoalSpec, mllm: ChatClient) -> ExploreDecision:
    """Never raises: any adjudication failure falls back to exploring."""
    if recall is None:
        return ExploreDecision(True, "no episodic recall")
    req = ChatRequest(
        EXPLORE_SYSTEM,
        [ChatTurn("user", f"Task: {goal.raw_instruction}\nTarget: {goal.target_text}\n"
                  "Is further exploration required?", list(recall.image_refs))],
        schema="yes-no",
        tags={"task": "decide_explore", "target": goal.target_text, "images": list(recall.image_refs)},
    )
    try:
        explore = complete(mllm, req)
    except (GatewayError, SchemaError) as exc:
        logger.warning("explore decision failed, exploring: %s", exc)
        return ExploreDecision(True, "fallback")
    return ExploreDecision(bool(explore), f"adjudicator: {'explore' if explore else 'use recall'}")
