"""Pose-indexed store of embedded observations with tiered goal retrieval."""

from __future__ import annotations

import base64
import math
import re
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterator, Sequence

import numpy as np

from memnav.errors import (
    ConfigurationError,
    DecompositionError,
    DuplicateObservationError,
    GatewayError,
    InvalidQueryError,
    MigrationError,
    MissingObservationError,
    SchemaError,
    SnapshotError,
)
from memnav.gateway import ChatClient, ChatRequest, ChatTurn, Embedder, complete, embed
from memnav.physical_space import Pose

SNAPSHOT_VERSION = 1
UNIT_TOL = 1e-6
QUERY_TOL = 1e-3


def _unit(vec, what: str, dim: int | None = None) -> np.ndarray:
    arr = np.asarray(vec, dtype=np.float32)
    if arr.ndim != 1:
        raise ValueError(f"{what} must be a 1-D vector")
    if dim is not None and arr.shape[0] != dim:
        raise ConfigurationError(f"{what} has dimension {arr.shape[0]}, store expects {dim}")
    norm = float(np.linalg.norm(arr.astype(np.float64)))
    if abs(norm - 1.0) > UNIT_TOL:
        raise ValueError(f"{what} must be unit-norm (got {norm:.8f})")
    return arr


def encode_vector(vec: np.ndarray) -> str:
    return base64.b64encode(np.asarray(vec, dtype="<f4").tobytes()).decode("ascii")


def decode_vector(text: str) -> np.ndarray:
    return np.frombuffer(base64.b64decode(text), dtype="<f4").astype(np.float32)


@dataclass(frozen=True)
class Box3D:
    center: tuple[float, float, float]
    extents: tuple[float, float, float]

    def __post_init__(self):
        if any(e < 0 for e in self.extents):
            raise ValueError("box extents must be non-negative")


@dataclass
class RegionEntry:
    embedding: np.ndarray
    box: Box3D
    label: str | None = None

    def __post_init__(self):
        self.embedding = _unit(self.embedding, "region embedding")


@dataclass
class Observation:
    id: str
    episode_id: str
    timestep: int
    pose: Pose
    global_embedding: np.ndarray
    regions: list[RegionEntry] = field(default_factory=list)
    image_ref: str = ""

    def __post_init__(self):
        if self.timestep < 0:
            raise ValueError("timestep must be >= 0")
        self.global_embedding = _unit(self.global_embedding, "global embedding")


class Tier(IntEnum):
    TARGET = 0
    RELATIVE_OBJECT = 1
    RELATIVE_AREA = 2


@dataclass
class GoalSpec:
    raw_instruction: str
    target_object: tuple[str, np.ndarray]
    relative_objects: list[tuple[str, np.ndarray]] = field(default_factory=list)
    relative_areas: list[tuple[str, np.ndarray]] = field(default_factory=list)

    def __post_init__(self):
        self.target_object = (self.target_object[0], _unit(self.target_object[1], "target embedding"))
        self.relative_objects = [(t, _unit(e, "relative object embedding")) for t, e in self.relative_objects]
        self.relative_areas = [(t, _unit(e, "relative area embedding")) for t, e in self.relative_areas]

    @property
    def target_text(self) -> str:
        return self.target_object[0]

    def tier_queries(self) -> list[tuple[Tier, list[np.ndarray]]]:
        return [
            (Tier.TARGET, [self.target_object[1]]),
            (Tier.RELATIVE_OBJECT, [e for _, e in self.relative_objects]),
            (Tier.RELATIVE_AREA, [e for _, e in self.relative_areas]),
        ]


@dataclass(frozen=True)
class RankedMatch:
    observation_id: str
    region_index: int | None
    similarity: float
    priority_tier: Tier

    def sort_key(self):
        return (int(self.priority_tier), -self.similarity)


class SemanticStore:
    """Insertion-ordered observation store with exact brute-force retrieval.

    Writes require exclusive access; reads never mutate shared state other
    than the lazily rebuilt matrices, which are recomputed identically.
    """

    def __init__(self, dim: int = 384):
        if dim < 1:
            raise ConfigurationError("embedding dimension must be positive")
        self.dim = dim
        self._observations: list[Observation] = []
        self._index: dict[str, int] = {}
        self._region_rows: list[tuple[int, int]] = []
        self._regions: np.ndarray | None = None
        self._globals: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self._observations)

    def __iter__(self) -> Iterator[Observation]:
        return iter(self._observations)

    def __contains__(self, obs_id: str) -> bool:
        return obs_id in self._index

    @property
    def observations(self) -> list[Observation]:
        return list(self._observations)

    @property
    def region_count(self) -> int:
        return len(self._region_rows)

    def get(self, obs_id: str) -> Observation:
        try:
            return self._observations[self._index[obs_id]]
        except KeyError:
            raise MissingObservationError(obs_id) from None

    def position(self, obs_id: str) -> int:
        return self._index[obs_id]

    def insert(self, obs: Observation) -> "SemanticStore":
        if obs.id in self._index:
            raise DuplicateObservationError(f"observation {obs.id!r} already stored")
        _unit(obs.global_embedding, "global embedding", self.dim)
        for r in obs.regions:
            _unit(r.embedding, "region embedding", self.dim)
        pos = len(self._observations)
        self._observations.append(obs)
        self._index[obs.id] = pos
        self._region_rows.extend((pos, i) for i in range(len(obs.regions)))
        self._regions = None
        self._globals = None
        return self

    def region_matrix(self) -> np.ndarray:
        if self._regions is None:
            if self._region_rows:
                self._regions = np.vstack(
                    [self._observations[p].regions[i].embedding for p, i in self._region_rows]
                ).astype(np.float64)
            else:
                self._regions = np.zeros((0, self.dim))
        return self._regions

    def region_owner(self, row: int) -> tuple[int, int]:
        return self._region_rows[row]

    def global_matrix(self) -> np.ndarray:
        if self._globals is None:
            if self._observations:
                self._globals = np.vstack([o.global_embedding for o in self._observations]).astype(np.float64)
            else:
                self._globals = np.zeros((0, self.dim))
        return self._globals

    def observation_scores(self, query: np.ndarray) -> np.ndarray:
        """Best region similarity per observation (-inf for observations without regions)."""
        scores = np.full(len(self._observations), -np.inf)
        if self._region_rows:
            sims = self.region_matrix() @ np.asarray(query, dtype=np.float64)
            owners = np.fromiter((p for p, _ in self._region_rows), dtype=np.int64, count=len(self._region_rows))
            np.maximum.at(scores, owners, sims)
        return scores


def insert_observation(store: SemanticStore, obs: Observation) -> SemanticStore:
    return store.insert(obs)


def prepare_query(query, dim: int) -> np.ndarray:
    q = np.asarray(query, dtype=np.float64)
    if q.shape != (dim,):
        raise InvalidQueryError(f"query has shape {q.shape}, expected ({dim},)")
    norm = float(np.linalg.norm(q))
    if not math.isfinite(norm) or abs(norm - 1.0) > QUERY_TOL:
        raise InvalidQueryError(f"query norm {norm:.6f} is not within {QUERY_TOL} of 1")
    return q / norm


def top_k_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest scores, descending; ties keep index order."""
    order = np.argsort(-scores, kind="stable")
    return order[:k]


def query_regions(store: SemanticStore, query, k: int) -> list[tuple[str, int, float]]:
    if k < 1:
        raise ValueError("k must be >= 1")
    q = prepare_query(query, store.dim)
    if store.region_count == 0:
        return []
    sims = store.region_matrix() @ q
    out = []
    for row in top_k_indices(sims, k):
        pos, ridx = store.region_owner(int(row))
        out.append((store.observations[pos].id, ridx, float(sims[row])))
    return out


def query_goal(store: SemanticStore, goal: GoalSpec, k: int) -> list[RankedMatch]:
    """Per-tier top-k region matches, target tier first.

    A tier with several queries (e.g. two relative objects) scores each
    region by its best similarity over that tier's queries.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if store.region_count == 0:
        return []
    regions = store.region_matrix()
    obs = store.observations
    matches: list[RankedMatch] = []
    for tier, queries in goal.tier_queries():
        if not queries:
            continue
        q = np.vstack([prepare_query(v, store.dim) for v in queries])
        sims = (regions @ q.T).max(axis=1)
        for row in top_k_indices(sims, k):
            pos, ridx = store.region_owner(int(row))
            matches.append(RankedMatch(obs[pos].id, ridx, float(sims[row]), tier))
    return matches


def poses_of(store: SemanticStore, matches: Sequence[RankedMatch]) -> list[Pose]:
    seen: set[str] = set()
    poses = []
    for m in matches:
        if m.observation_id in seen:
            continue
        seen.add(m.observation_id)
        poses.append(store.get(m.observation_id).pose)
    return poses


# --------------------------------------------------------------- goal parsing

DECOMPOSE_SYSTEM = (
    "You convert an embodied navigation or question-answering instruction into search goals. "
    "Reply with JSON only: "
    '{"target": "<object to find>", "rel_objects": ["<objects near it>"], "rel_areas": ["<rooms or areas>"]}. '
    "Use short noun phrases. Lists may be empty."
)

IMAGE_REF = re.compile(r"(?:sim://\S+|\S+\.(?:png|jpe?g))", re.IGNORECASE)


def decompose_goal(
    instruction: str,
    llm: ChatClient,
    embedder: Embedder,
    max_retries: int = 2,
) -> GoalSpec:
    if not instruction or not instruction.strip():
        raise ValueError("instruction must be non-empty")
    images = IMAGE_REF.findall(instruction)
    req = ChatRequest(
        DECOMPOSE_SYSTEM,
        [ChatTurn("user", f"Instruction: {instruction}", images)],
        schema="goal-decomposition",
        max_retries=max_retries,
        tags={"task": "decompose_goal", "instruction": instruction},
    )
    try:
        parsed = complete(llm, req)
    except SchemaError as exc:
        raise DecompositionError(f"could not decompose {instruction!r}: {exc}", raw=exc.raw) from exc
    except GatewayError as exc:
        raise DecompositionError(f"gateway failed while decomposing {instruction!r}: {exc}") from exc

    def pair(text: str) -> tuple[str, np.ndarray]:
        return (text, embed(embedder, text).astype(np.float32))

    return GoalSpec(
        instruction,
        pair(parsed["target"]),
        [pair(t) for t in parsed["rel_objects"]],
        [pair(t) for t in parsed["rel_areas"]],
    )


# ------------------------------------------------------------------ snapshot


def observation_to_dict(obs: Observation) -> dict:
    return {
        "id": obs.id,
        "episode_id": obs.episode_id,
        "timestep": obs.timestep,
        "pose": obs.pose.to_dict(),
        "global_embedding": encode_vector(obs.global_embedding),
        "image_ref": obs.image_ref,
        "regions": [
            {
                "embedding": encode_vector(r.embedding),
                "center": list(r.box.center),
                "extents": list(r.box.extents),
                "label": r.label,
            }
            for r in obs.regions
        ],
    }


def observation_from_dict(data: dict) -> Observation:
    return Observation(
        id=data["id"],
        episode_id=data["episode_id"],
        timestep=int(data["timestep"]),
        pose=Pose.from_dict(data["pose"]),
        global_embedding=decode_vector(data["global_embedding"]),
        regions=[
            RegionEntry(decode_vector(r["embedding"]), Box3D(tuple(r["center"]), tuple(r["extents"])), r.get("label"))
            for r in data["regions"]
        ],
        image_ref=data.get("image_ref", ""),
    )


def store_to_dict(store: SemanticStore) -> dict:
    return {
        "format": "semantic-space",
        "version": SNAPSHOT_VERSION,
        "D": store.dim,
        "count": len(store),
        "observations": [observation_to_dict(o) for o in store],
    }


def store_from_dict(data: dict) -> SemanticStore:
    if data.get("format") != "semantic-space":
        raise SnapshotError("not a semantic-space snapshot")
    if data.get("version") != SNAPSHOT_VERSION:
        raise MigrationError(f"semantic-space snapshot version {data.get('version')} unsupported")
    store = SemanticStore(int(data["D"]))
    for rec in data["observations"]:
        store.insert(observation_from_dict(rec))
    if len(store) != int(data["count"]):
        raise SnapshotError(f"snapshot declares {data['count']} observations, found {len(store)}")
    return store
