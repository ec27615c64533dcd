"""Deterministic grid-world scenes: posed observations, ray scans, scripts.

Walls are axis-aligned segments with a thickness, rasterised onto the same
lattice the agent maps on. Scans march rays through that raster, so a
perfect mapper reproduces the true free space cell for cell. Objects do
not block rays; they are sensed as regions when in range, inside the field
of view and not hidden behind a wall.
"""

from __future__ import annotations

import hashlib
import math
import re
import string
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import yaml

from memnav.errors import GatewayError, OutOfBoundsError, SceneError, SchemaError
from memnav.gateway import ChatClient, ChatRequest, ChatTurn, Embedder, HashEmbedder, complete, embed
from memnav.physical_space import Cell, OccupancyGrid, Pose, distance_field, march_cells, normalize_angle
from memnav.semantic_memory import GroundTruthTrajectory
from memnav.semantic_space import Box3D, Observation, RegionEntry

SCENE_FORMAT_VERSION = 1
SCRIPT_FORMAT_VERSION = 1
DATA_DIR = resources.files("memnav") / "data"


# ---------------------------------------------------------------- vocabulary


@dataclass(frozen=True)
class Vocabulary:
    categories: tuple[str, ...]
    areas: tuple[str, ...]

    def find_categories(self, text: str) -> list[str]:
        """Categories mentioned in ``text``, in order of first appearance."""
        words = re.findall(r"[a-z]+", text.lower())
        seen = []
        for w in words:
            for cand in (w, w[:-1] if w.endswith("s") else None):
                if cand in self.categories and cand not in seen:
                    seen.append(cand)
        return seen

    def find_areas(self, text: str) -> list[str]:
        words = re.findall(r"[a-z]+", text.lower())
        return list(dict.fromkeys(w for w in words if w in self.areas))


def load_vocabulary(path: str | Path | None = None) -> Vocabulary:
    text = Path(path).read_text() if path else (DATA_DIR / "vocabulary.yaml").read_text()
    data = yaml.safe_load(text)
    cats = tuple(data["categories"])
    areas = tuple(data["areas"])
    for word in cats + areas:
        if not re.fullmatch(r"[a-z]+", word):
            raise SceneError(f"vocabulary entry {word!r} must be a single lowercase word")
    if set(cats) & set(areas):
        raise SceneError("categories and areas must not overlap")
    return Vocabulary(cats, areas)


# --------------------------------------------------------------------- scenes


@dataclass(frozen=True)
class Wall:
    start: tuple[float, float]
    end: tuple[float, float]

    def __post_init__(self):
        if self.start[0] != self.end[0] and self.start[1] != self.end[1]:
            raise SceneError(f"wall {self.start}->{self.end} is not axis-aligned")

    def rect(self, thickness: float) -> tuple[float, float, float, float]:
        h = thickness / 2
        x0, x1 = sorted((self.start[0], self.end[0]))
        y0, y1 = sorted((self.start[1], self.end[1]))
        return x0 - h, y0 - h, x1 + h, y1 + h


@dataclass(frozen=True)
class SceneObject:
    category: str
    position: tuple[float, float, float]
    extents: tuple[float, float, float]
    area: str

    @property
    def xy(self) -> tuple[float, float]:
        return self.position[0], self.position[1]


@dataclass(frozen=True)
class Room:
    name: str
    bounds: tuple[float, float, float, float]

    def contains(self, x: float, y: float) -> bool:
        x0, y0, x1, y1 = self.bounds
        return x0 <= x <= x1 and y0 <= y <= y1


@dataclass
class SceneSpec:
    name: str
    walls: list[Wall]
    objects: list[SceneObject]
    spawns: list[Pose]
    rooms: list[Room] = field(default_factory=list)
    rng_seed: int = 0
    wall_thickness: float = 0.2
    resolution: float = 0.1

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        rects = [w.rect(self.wall_thickness) for w in self.walls]
        return (min(r[0] for r in rects), min(r[1] for r in rects),
                max(r[2] for r in rects), max(r[3] for r in rects))

    def area_at(self, x: float, y: float) -> str | None:
        for room in self.rooms:
            if room.contains(x, y):
                return room.name
        return None

    def instances(self, category: str) -> list[SceneObject]:
        return [o for o in self.objects if o.category == category]

    def validate(self, vocab: Vocabulary | None = None) -> None:
        if not self.walls:
            raise SceneError(f"scene {self.name!r} has no walls")
        if not self.spawns:
            raise SceneError(f"scene {self.name!r} has no spawn poses")
        vocab = vocab or load_vocabulary()
        x0, y0, x1, y1 = self.bounds
        for obj in self.objects:
            if obj.category not in vocab.categories:
                raise SceneError(f"category {obj.category!r} is not in the vocabulary")
            if obj.area not in vocab.areas:
                raise SceneError(f"area {obj.area!r} is not in the vocabulary")
            if not (x0 < obj.position[0] < x1 and y0 < obj.position[1] < y1):
                raise SceneError(f"object {obj.category!r} at {obj.position} lies outside the walls")


def rasterize(scene: SceneSpec, margin: int = 2) -> OccupancyGrid:
    """True occupancy: wall rectangles Occupied, the rest Free.

    Cells outside the wall bounding box are Occupied too, so rays and moves
    can never leave the building through a gap in the outer wall.
    """
    res = scene.resolution
    bx0, by0, bx1, by1 = scene.bounds
    ix0 = math.floor(bx0 / res + 1e-9) - margin
    iy0 = math.floor(by0 / res + 1e-9) - margin
    ix1 = math.ceil(bx1 / res - 1e-9) + margin
    iy1 = math.ceil(by1 / res - 1e-9) + margin
    cells = np.full((ix1 - ix0, iy1 - iy0), Cell.FREE, dtype=np.uint8)
    cells[:margin, :] = Cell.OCCUPIED
    cells[-margin:, :] = Cell.OCCUPIED
    cells[:, :margin] = Cell.OCCUPIED
    cells[:, -margin:] = Cell.OCCUPIED
    for wall in scene.walls:
        rx0, ry0, rx1, ry1 = wall.rect(scene.wall_thickness)
        a = math.floor(rx0 / res + 1e-9) - ix0
        b = math.ceil(rx1 / res - 1e-9) - ix0
        c = math.floor(ry0 / res + 1e-9) - iy0
        d = math.ceil(ry1 / res - 1e-9) - iy0
        cells[a:b, c:d] = Cell.OCCUPIED
    return OccupancyGrid(res, (ix0 * res, iy0 * res), cells)


# ---------------------------------------------------------------- embeddings


class SyntheticEmbedder:
    """Region features: category direction plus a little area context and view noise.

    Base directions come from the text embedder, so a text query naming a
    category lands on that category's direction. Per-view noise has total
    norm about ``sigma``. Any embedder can supply the base directions; the
    default is the offline hash embedder.
    """

    def __init__(self, dim: int = 384, seed: int = 0, sigma: float = 0.05, area_weight: float = 0.25,
                 text: Embedder | None = None):
        self.text = text if text is not None else HashEmbedder(dim, seed)
        self.dim = self.text.dim
        self.seed = seed
        self.sigma = sigma
        self.area_weight = area_weight
        self._bases: dict[str, np.ndarray] = {}

    def base(self, word: str) -> np.ndarray:
        word = word.lower()
        vec = self._bases.get(word)
        if vec is None:
            vec = embed(self.text, word, self.dim)
            self._bases[word] = vec
        return vec

    def _noise(self, key: str) -> np.ndarray:
        digest = hashlib.sha256(f"{self.seed}|{key}".encode()).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        return rng.normal(0.0, self.sigma / math.sqrt(self.dim), self.dim)

    def region(self, category: str, area: str | None, key: str) -> np.ndarray:
        vec = self.base(category) + self._noise(key)
        if area:
            vec = vec + self.area_weight * self.base(area)
        return vec / np.linalg.norm(vec)

    def area_view(self, area: str, key: str) -> np.ndarray:
        vec = self.base(area) + self._noise(key)
        return vec / np.linalg.norm(vec)


# ----------------------------------------------------------------- simulator


@dataclass(frozen=True)
class SensorConfig:
    fov: float = 2 * math.pi
    n_rays: int = 360
    max_range: float = 3.5
    face_rays: bool = True

    def __post_init__(self):
        if not (0 < self.fov <= 2 * math.pi) or self.n_rays < 1 or self.max_range <= 0:
            raise SceneError("invalid sensor configuration")


class MoveResult(NamedTuple):
    pose: Pose
    delta: float
    collided: bool


REF_PATTERN = re.compile(r"sim://([^/\s]+)/(-?[\d.]+)/(-?[\d.]+)/(-?[\d.]+)")


def image_ref(scene_name: str, pose: Pose) -> str:
    return f"sim://{scene_name}/{pose.x:.4f}/{pose.y:.4f}/{pose.yaw:.5f}"


def parse_image_ref(ref: str) -> tuple[str, Pose] | None:
    m = REF_PATTERN.fullmatch(ref.strip())
    if not m:
        return None
    return m.group(1), Pose.at(float(m.group(2)), float(m.group(3)), float(m.group(4)))


class Simulator:
    """One scene's ground truth: sensing, motion and visibility."""

    def __init__(
        self,
        scene: SceneSpec,
        sensor: SensorConfig | None = None,
        embedder: SyntheticEmbedder | None = None,
    ):
        self.scene = scene
        self.sensor = sensor or SensorConfig()
        self.embedder = embedder or SyntheticEmbedder()
        self.grid = rasterize(scene)
        self._occ = (self.grid.cells == Cell.OCCUPIED).tolist()
        self._faces = self._wall_faces()

    @property
    def name(self) -> str:
        return self.scene.name

    # -- geometry

    def is_free(self, x: float, y: float) -> bool:
        ix, iy = self.grid.world_to_cell(x, y)
        return self.grid.in_bounds(ix, iy) and not self._occ[ix][iy]

    def _check_pose(self, pose: Pose) -> None:
        if not self.is_free(pose.x, pose.y):
            raise OutOfBoundsError(f"pose {pose.xy} is outside scene {self.name!r} or inside a wall")

    def _wall_faces(self) -> np.ndarray:
        """Rows ``(x, y, nx, ny)``: aim points on every wall surface facing free space."""
        occ = self.grid.cells == Cell.OCCUPIED
        res = self.grid.resolution
        ox, oy = self.grid.origin
        rows = []
        for ddx, ddy in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            free_nb = np.zeros_like(occ)
            shifted = ~np.roll(occ, (-ddx, -ddy), axis=(0, 1))
            free_nb[:] = occ & shifted
            # roll wraps around; the border is all Occupied so wrapped cells never count
            xs, ys = np.nonzero(free_nb)
            cx = ox + (xs + 0.5) * res
            cy = oy + (ys + 0.5) * res
            # aim a quarter cell inside, slightly off the face centre to avoid exact corners
            fx = cx + ddx * 0.25 * res + ddy * 0.137 * res
            fy = cy + ddy * 0.25 * res + ddx * 0.137 * res
            rows.append(np.stack([fx, fy, np.full_like(fx, ddx), np.full_like(fy, ddy)], axis=1))
        return np.vstack(rows) if rows else np.zeros((0, 4))

    def cast(self, x: float, y: float, angle: float, max_range: float) -> tuple[float, bool]:
        """Distance to the first wall cell along a ray, or ``(max_range, False)``."""
        direction = (math.cos(angle), math.sin(angle))
        occ = self._occ
        w, h = self.grid.width, self.grid.height
        for ix, iy, t_in, t_out in march_cells(self.grid.origin, self.grid.resolution, (x, y), direction, max_range):
            if t_in > max_range:
                break
            if not (0 <= ix < w and 0 <= iy < h) or occ[ix][iy]:
                if t_in == 0.0:
                    return 0.0, True
                # report a point just inside the wall cell so mappers bin it there
                end = t_in + min(1e-4, (t_out - t_in) / 2)
                if end > max_range:
                    end = (t_in + max_range) / 2
                return end, True
        return max_range, False

    def scan(self, pose: Pose) -> list[tuple[float, float, bool]]:
        """Depth-like scan as ``(bearing, range, hit)`` triples, bearings relative to heading."""
        self._check_pose(pose)
        s = self.sensor
        out = []
        for i in range(s.n_rays):
            bearing = -s.fov / 2 + (i + 0.5) * s.fov / s.n_rays
            rng, hit = self.cast(pose.x, pose.y, pose.yaw + bearing, s.max_range)
            out.append((bearing, rng, hit))
        if s.face_rays and len(self._faces):
            f = self._faces
            vx = f[:, 0] - pose.x
            vy = f[:, 1] - pose.y
            dist = np.hypot(vx, vy)
            facing = (vx * f[:, 2] + vy * f[:, 3]) < 0
            keep = facing & (dist <= s.max_range) & (dist > 1e-9)
            for tx, ty, d in zip(vx[keep], vy[keep], dist[keep]):
                bearing = normalize_angle(math.atan2(ty, tx) - pose.yaw)
                if abs(bearing) > s.fov / 2:
                    continue
                rng, hit = self.cast(pose.x, pose.y, pose.yaw + bearing, s.max_range)
                out.append((bearing, rng, hit))
        return out

    def line_of_sight(self, a: tuple[float, float], b: tuple[float, float]) -> bool:
        dx, dy = b[0] - a[0], b[1] - a[1]
        dist = math.hypot(dx, dy)
        if dist == 0.0:
            return self.is_free(*a)
        direction = (dx / dist, dy / dist)
        w, h = self.grid.width, self.grid.height
        for ix, iy, t_in, _ in march_cells(self.grid.origin, self.grid.resolution, a, direction, dist):
            if t_in > dist:
                break
            if not (0 <= ix < w and 0 <= iy < h) or self._occ[ix][iy]:
                return False
        return True

    def visible_objects(self, pose: Pose) -> list[tuple[int, SceneObject]]:
        s = self.sensor
        out = []
        for i, obj in enumerate(self.scene.objects):
            dx, dy = obj.position[0] - pose.x, obj.position[1] - pose.y
            if math.hypot(dx, dy) > s.max_range:
                continue
            if s.fov < 2 * math.pi and abs(normalize_angle(math.atan2(dy, dx) - pose.yaw)) > s.fov / 2:
                continue
            if self.line_of_sight(pose.xy, obj.xy):
                out.append((i, obj))
        return out

    # -- sensing and motion

    def observe(self, pose: Pose, episode_id: str = "episode", timestep: int = 0) -> tuple[Observation, list]:
        """Posed observation plus the scan taken from the same pose."""
        self._check_pose(pose)
        key = f"{self.scene.rng_seed}|{pose.x:.4f}|{pose.y:.4f}|{pose.yaw:.5f}"
        regions = []
        for i, obj in self.visible_objects(pose):
            emb = self.embedder.region(obj.category, obj.area, f"{key}|{i}")
            regions.append(RegionEntry(emb, Box3D(obj.position, obj.extents), obj.category))
        if regions:
            g = np.mean([r.embedding for r in regions], axis=0)
            g = g / np.linalg.norm(g)
        else:
            g = self.embedder.area_view(self.scene.area_at(*pose.xy) or "hallway", key)
        obs = Observation(
            id=f"{episode_id}/{timestep}",
            episode_id=episode_id,
            timestep=timestep,
            pose=pose,
            global_embedding=g,
            regions=regions,
            image_ref=image_ref(self.name, pose),
        )
        return obs, self.scan(pose)

    def execute_move(self, pose: Pose, waypoints: Sequence[tuple[float, float]]) -> MoveResult:
        """Follow straight segments through ``waypoints``, stopping at the first wall."""
        x, y, yaw = pose.x, pose.y, pose.yaw
        travelled = 0.0
        res = self.grid.resolution
        for wx, wy in waypoints:
            dx, dy = wx - x, wy - y
            seg = math.hypot(dx, dy)
            if seg == 0.0:
                continue
            direction = (dx / seg, dy / seg)
            blocked_at = None
            w, h = self.grid.width, self.grid.height
            for ix, iy, t_in, _ in march_cells(self.grid.origin, res, (x, y), direction, seg):
                if t_in > seg:
                    break
                if not (0 <= ix < w and 0 <= iy < h) or self._occ[ix][iy]:
                    blocked_at = t_in
                    break
            yaw = math.atan2(dy, dx)
            if blocked_at is not None:
                t = max(0.0, blocked_at - 1e-3 * res)
                travelled += t
                return MoveResult(Pose.at(x + direction[0] * t, y + direction[1] * t, yaw, pose.position[2]), travelled, True)
            travelled += seg
            x, y = wx, wy
        return MoveResult(Pose.at(x, y, yaw, pose.position[2]), travelled, False)

    def resolve(self, ref: str) -> Pose | None:
        """Pose behind one of this scene's image references."""
        parsed = parse_image_ref(ref)
        if parsed is None or parsed[0] != self.name:
            return None
        return parsed[1]

    def categories_seen_from(self, ref: str) -> list[str]:
        pose = self.resolve(ref)
        if pose is None or not self.is_free(*pose.xy):
            return []
        return [o.category for _, o in self.visible_objects(pose)]

    # -- ground truth

    def geodesic(self, start: tuple[float, float], category: str, radius: float = 1.0):
        """Shortest true path from ``start`` into the success disc of any instance."""
        targets = self.scene.instances(category)
        if not targets:
            raise SceneError(f"scene {self.name!r} has no {category!r}")
        field_ = distance_field(self.grid, start)
        xs = self.grid.origin[0] + (np.arange(self.grid.width) + 0.5) * self.grid.resolution
        ys = self.grid.origin[1] + (np.arange(self.grid.height) + 0.5) * self.grid.resolution
        near = np.zeros(self.grid.cells.shape, dtype=bool)
        for t in targets:
            near |= np.hypot(xs[:, None] - t.position[0], ys[None, :] - t.position[1]) <= radius
        cost = np.where(near, field_.dist, np.inf)
        cell = np.unravel_index(int(np.argmin(cost)), cost.shape)
        if not np.isfinite(cost[cell]):
            return None
        return field_.path_to((int(cell[0]), int(cell[1])))

    def distance_to_target(self, xy: tuple[float, float], category: str) -> float:
        return min(math.hypot(o.position[0] - xy[0], o.position[1] - xy[1]) for o in self.scene.instances(category))


# ------------------------------------------------------------------- scripts


@dataclass
class EpisodeScript:
    id: str
    scene: str
    question: str
    target: str
    gt_answer: str
    spawn: int = 0
    task: str = "navigation"
    modality: str = "category"
    gt_trajectory: GroundTruthTrajectory | None = None
    group: str = ""

    def __post_init__(self):
        if self.task not in ("navigation", "qa"):
            raise SceneError(f"unknown task kind {self.task!r}")
        if self.modality not in ("category", "description", "image"):
            raise SceneError(f"unknown goal modality {self.modality!r}")


def simplify_path(points: Sequence[tuple[float, float]]) -> list[tuple[float, float]]:
    """Drop interior points where the direction does not change."""
    if len(points) <= 2:
        return list(points)
    out = [points[0]]
    for prev, cur, nxt in zip(points, points[1:], points[2:]):
        d1 = (round((cur[0] - prev[0]) * 1e6), round((cur[1] - prev[1]) * 1e6))
        d2 = (round((nxt[0] - cur[0]) * 1e6), round((nxt[1] - cur[1]) * 1e6))
        if d1 != d2:
            out.append(cur)
    out.append(points[-1])
    return out


def plan_gt_trajectory(sim: Simulator, spawn: Pose, target: str, radius: float = 1.0) -> GroundTruthTrajectory:
    path = sim.geodesic(spawn.xy, target, radius - sim.grid.resolution)
    if path is None:
        raise SceneError(f"no route to {target!r} in scene {sim.name!r}")
    pts = simplify_path(path.points)
    if pts[0] != spawn.xy:
        pts[0] = spawn.xy
    if len(pts) < 2:
        # already at the target: a one-cell hop keeps the trajectory well-formed
        x, y = spawn.xy
        step = sim.grid.resolution
        pts = [spawn.xy] + [(x + dx, y + dy) for dx, dy in ((step, 0), (-step, 0), (0, step), (0, -step))
                            if sim.is_free(x + dx, y + dy)][:1]
    return GroundTruthTrajectory(np.array(pts))


def validate_script(script: EpisodeScript, sim: Simulator, radius: float = 1.0) -> None:
    """Check the trajectory starts at the spawn, ends near the target and hits no wall."""
    if script.scene != sim.name:
        raise SceneError(f"script {script.id!r} targets scene {script.scene!r}, not {sim.name!r}")
    if not 0 <= script.spawn < len(sim.scene.spawns):
        raise SceneError(f"script {script.id!r} uses missing spawn {script.spawn}")
    if not sim.scene.instances(script.target):
        raise SceneError(f"script {script.id!r} targets {script.target!r}, absent from the scene")
    traj = script.gt_trajectory
    if traj is None:
        raise SceneError(f"script {script.id!r} has no ground-truth trajectory")
    spawn = sim.scene.spawns[script.spawn]
    pts = traj.waypoints
    if math.hypot(pts[0, 0] - spawn.x, pts[0, 1] - spawn.y) > 1e-6:
        raise SceneError(f"script {script.id!r}: trajectory does not start at its spawn pose")
    if sim.distance_to_target(tuple(pts[-1]), script.target) > radius + 1e-9:
        raise SceneError(f"script {script.id!r}: trajectory ends farther than {radius} m from the target")
    pose = spawn
    for p in pts[1:]:
        result = sim.execute_move(pose, [tuple(p)])
        if result.collided:
            raise SceneError(f"script {script.id!r}: trajectory collides near {tuple(p)}")
        pose = result.pose


def bind_script(script: EpisodeScript, sim: Simulator) -> EpisodeScript:
    """Fill in a missing ground-truth trajectory, then validate."""
    if script.gt_trajectory is None:
        script.gt_trajectory = plan_gt_trajectory(sim, sim.scene.spawns[script.spawn], script.target)
    validate_script(script, sim)
    return script


# -------------------------------------------------------------------- judging


class Judgement(NamedTuple):
    matched: bool
    error: bool = False


_PUNCT = str.maketrans({c: " " for c in string.punctuation})


def normalize_answer(text: str) -> str:
    words = text.lower().translate(_PUNCT).split()
    return " ".join(w for w in words if w not in ("a", "an", "the"))


JUDGE_SYSTEM = (
    "You grade answers to questions about an indoor scene. Reply yes if the candidate answer "
    "means the same as the reference answer, otherwise no."
)


def judge_answer(script: EpisodeScript, answer: str, judge: ChatClient | None = None) -> Judgement:
    """Compare an answer with the script's reference, by model or by normalised text."""
    if not answer or not answer.strip():
        return Judgement(False)
    if judge is None:
        return Judgement(normalize_answer(answer) == normalize_answer(script.gt_answer))
    req = ChatRequest(
        JUDGE_SYSTEM,
        [ChatTurn("user", f"Question: {script.question}\nReference: {script.gt_answer}\nCandidate: {answer}")],
        schema="yes-no",
        tags={"task": "judge", "answer": answer, "reference": script.gt_answer},
    )
    try:
        return Judgement(bool(complete(judge, req)))
    except (GatewayError, SchemaError):
        return Judgement(False, error=True)


# --------------------------------------------------------------------- files


def _f(v) -> float:
    return float(round(float(v), 6))


def scene_to_dict(scene: SceneSpec) -> dict:
    return {
        "format": "scene",
        "version": SCENE_FORMAT_VERSION,
        "name": scene.name,
        "seed": scene.rng_seed,
        "resolution": scene.resolution,
        "wall_thickness": scene.wall_thickness,
        "walls": [[[_f(w.start[0]), _f(w.start[1])], [_f(w.end[0]), _f(w.end[1])]] for w in scene.walls],
        "rooms": [{"name": r.name, "bounds": [_f(b) for b in r.bounds]} for r in scene.rooms],
        "objects": [
            {"category": o.category, "area": o.area,
             "position": [_f(v) for v in o.position], "extents": [_f(v) for v in o.extents]}
            for o in scene.objects
        ],
        "spawns": [{"position": [_f(p.x), _f(p.y)], "yaw": _f(p.yaw)} for p in scene.spawns],
    }


def scene_from_dict(data: dict) -> SceneSpec:
    if data.get("format", "scene") != "scene":
        raise SceneError(f"not a scene file (format {data.get('format')!r})")
    if data.get("version", SCENE_FORMAT_VERSION) != SCENE_FORMAT_VERSION:
        raise SceneError(f"unsupported scene version {data.get('version')}")
    try:
        return SceneSpec(
            name=str(data["name"]),
            walls=[Wall(tuple(a), tuple(b)) for a, b in data["walls"]],
            objects=[
                SceneObject(o["category"], tuple(float(v) for v in o["position"]),
                            tuple(float(v) for v in o.get("extents", (0.5, 0.5, 1.0))), o.get("area", ""))
                for o in data.get("objects", [])
            ],
            spawns=[Pose.at(*s["position"][:2], s.get("yaw", 0.0)) for s in data["spawns"]],
            rooms=[Room(r["name"], tuple(r["bounds"])) for r in data.get("rooms", [])],
            rng_seed=int(data.get("seed", 0)),
            wall_thickness=float(data.get("wall_thickness", 0.2)),
            resolution=float(data.get("resolution", 0.1)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise SceneError(f"malformed scene: {exc}") from exc


def load_scene(path: str | Path, vocab: Vocabulary | None = None) -> SceneSpec:
    p = Path(path)
    if not p.exists():
        builtin = DATA_DIR / "scenes" / f"{p.stem}.yaml"
        if builtin.is_file():
            p = Path(str(builtin))
        else:
            raise SceneError(f"scene file {path} not found")
    scene = scene_from_dict(yaml.safe_load(p.read_text()))
    scene.validate(vocab)
    return scene


def save_scene(scene: SceneSpec, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(scene_to_dict(scene), sort_keys=False))


def script_to_dict(script: EpisodeScript) -> dict:
    out = {
        "format": "episode-script",
        "version": SCRIPT_FORMAT_VERSION,
        "id": script.id,
        "scene": script.scene,
        "question": script.question,
        "target": script.target,
        "gt_answer": script.gt_answer,
        "task": script.task,
        "modality": script.modality,
        "spawn": script.spawn,
        "group": script.group,
    }
    if script.gt_trajectory is not None:
        out["gt_trajectory"] = [[_f(x), _f(y)] for x, y in script.gt_trajectory.waypoints]
    return out


def script_from_dict(data: dict) -> EpisodeScript:
    if data.get("version", SCRIPT_FORMAT_VERSION) != SCRIPT_FORMAT_VERSION:
        raise SceneError(f"unsupported script version {data.get('version')}")
    try:
        traj = data.get("gt_trajectory")
        return EpisodeScript(
            id=str(data["id"]),
            scene=str(data["scene"]),
            question=str(data["question"]),
            target=str(data["target"]),
            gt_answer=str(data.get("gt_answer", data["target"])),
            spawn=int(data.get("spawn", 0)),
            task=data.get("task", "navigation"),
            modality=data.get("modality", "category"),
            gt_trajectory=GroundTruthTrajectory(np.array(traj, dtype=float)) if traj else None,
            group=str(data.get("group", "")),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise SceneError(f"malformed episode script: {exc}") from exc


def load_script(path: str | Path) -> EpisodeScript:
    return script_from_dict(yaml.safe_load(Path(path).read_text()))


def save_script(script: EpisodeScript, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(script_to_dict(script), sort_keys=False))


# ----------------------------------------------------------------- generator


def _snap(v: float, res: float = 0.1) -> float:
    return round(round(v / res) * res, 6)


def _cell_centre(v: float, res: float = 0.1) -> float:
    return round(math.floor(v / res) * res + res / 2, 6)


def generate_scene(seed: int, name: str | None = None, vocab: Vocabulary | None = None,
                   objects_per_room: tuple[int, int] = (2, 3)) -> SceneSpec:
    """Random multi-room floor plan: a grid of rooms joined by 1 m doors.

    Doors follow a random spanning tree of the room adjacency plus a few
    extra connections, so every room is reachable.
    """
    vocab = vocab or load_vocabulary()
    rng = np.random.default_rng(seed)
    cols = int(rng.integers(2, 4))
    rows = int(rng.integers(1, 3))
    widths = [float(rng.choice([3.0, 3.5, 4.0, 4.5])) for _ in range(cols)]
    heights = [float(rng.choice([3.0, 3.5, 4.0, 4.5])) for _ in range(rows)]
    xs = np.concatenate([[0.0], np.cumsum(widths)])
    ys = np.concatenate([[0.0], np.cumsum(heights)])
    n_rooms = rows * cols
    areas = list(rng.permutation(vocab.areas)[:n_rooms])
    rooms = {}
    for r in range(rows):
        for c in range(cols):
            rooms[(r, c)] = Room(str(areas[r * cols + c]), (_snap(xs[c]), _snap(ys[r]), _snap(xs[c + 1]), _snap(ys[r + 1])))

    # candidate doors between neighbours, then a spanning tree plus extras
    edges = [((r, c), (r, c + 1)) for r in range(rows) for c in range(cols - 1)]
    edges += [((r, c), (r + 1, c)) for r in range(rows - 1) for c in range(cols)]
    order = rng.permutation(len(edges))
    parent = {k: k for k in rooms}

    def find(k):
        while parent[k] != k:
            parent[k] = parent[parent[k]]
            k = parent[k]
        return k

    doors = set()
    for i in order:
        a, b = edges[i]
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[ra] = rb
            doors.add(edges[i])
        elif rng.random() < 0.3:
            doors.add(edges[i])

    x_max, y_max = _snap(xs[-1]), _snap(ys[-1])
    walls = [Wall((0.0, 0.0), (x_max, 0.0)), Wall((x_max, 0.0), (x_max, y_max)),
             Wall((x_max, y_max), (0.0, y_max)), Wall((0.0, y_max), (0.0, 0.0))]

    def wall_with_door(fixed: float, lo: float, hi: float, vertical: bool, door: bool):
        pieces = [(lo, hi)]
        if door:
            centre = _snap(rng.uniform(lo + 1.0, hi - 1.0))
            pieces = [(lo, centre - 0.5), (centre + 0.5, hi)]
        for a, b in pieces:
            if b - a <= 1e-9:
                continue
            a, b = _snap(a), _snap(b)
            walls.append(Wall((fixed, a), (fixed, b)) if vertical else Wall((a, fixed), (b, fixed)))

    for (a, b) in edges:
        (r1, c1), (r2, c2) = a, b
        if r1 == r2:
            wall_with_door(_snap(xs[c2]), ys[r1], ys[r1 + 1], True, (a, b) in doors)
        else:
            wall_with_door(_snap(ys[r2]), xs[c1], xs[c1 + 1], False, (a, b) in doors)

    objects = []
    pool = list(rng.permutation(vocab.categories))
    lo, hi = objects_per_room
    for key in sorted(rooms):
        room = rooms[key]
        x0, y0, x1, y1 = room.bounds
        for _ in range(int(rng.integers(lo, hi + 1))):
            if not pool:
                break
            cat = str(pool.pop())
            px = _cell_centre(rng.uniform(x0 + 0.6, x1 - 0.6))
            py = _cell_centre(rng.uniform(y0 + 0.6, y1 - 0.6))
            objects.append(SceneObject(cat, (px, py, 0.5), (0.6, 0.6, 1.0), room.name))

    spawns = []
    keys = sorted(rooms)
    for _ in range(2):
        room = rooms[keys[int(rng.integers(len(keys)))]]
        x0, y0, x1, y1 = room.bounds
        spawns.append(Pose.at(_cell_centre(rng.uniform(x0 + 0.6, x1 - 0.6)),
                              _cell_centre(rng.uniform(y0 + 0.6, y1 - 0.6)),
                              float(rng.integers(4)) * math.pi / 2))
    scene = SceneSpec(name or f"gen{seed:04d}", walls, objects, spawns, [rooms[k] for k in keys], rng_seed=seed)
    scene.validate(vocab)
    return scene


def generate_scripts(scene: SceneSpec, sim: Simulator | None = None, seed: int = 0) -> list[EpisodeScript]:
    """One navigation and one location question per object, from spawn 0."""
    sim = sim or Simulator(scene)
    rng = np.random.default_rng(seed)
    out = []
    for i, obj in enumerate(scene.objects):
        spawn = int(rng.integers(len(scene.spawns)))
        nav = EpisodeScript(f"{scene.name}-nav-{i}", scene.name, f"Find the {obj.category}.",
                            obj.category, obj.category, spawn, "navigation", "category", group="navigation")
        qa = EpisodeScript(f"{scene.name}-qa-{i}", scene.name, f"Where is the {obj.category}?",
                           obj.category, obj.area, spawn, "qa", "category", group="location")
        out += [bind_script(nav, sim), bind_script(qa, sim)]
    return out


# ---------------------------------------------------------------- episodes


class EpisodeEnvironment:
    """Binds a simulator to one script: spawn, sensing, motion and scoring."""

    def __init__(self, sim: Simulator, script: EpisodeScript, judge: ChatClient | None = None,
                 success_radius: float = 1.0):
        if script.gt_trajectory is None:
            bind_script(script, sim)
        self.sim = sim
        self.script = script
        self.judge = judge
        self.success_radius = success_radius
        self._shortest: float | None = None

    @property
    def scene_name(self) -> str:
        return self.sim.name

    @property
    def max_range(self) -> float:
        return self.sim.sensor.max_range

    def start_pose(self) -> Pose:
        return self.sim.scene.spawns[self.script.spawn]

    def observe(self, pose: Pose, episode_id: str, timestep: int):
        return self.sim.observe(pose, episode_id, timestep)

    def move(self, pose: Pose, path) -> MoveResult:
        return self.sim.execute_move(pose, path)

    def shortest_length(self) -> float:
        if self._shortest is None:
            path = self.sim.geodesic(self.start_pose().xy, self.script.target, self.success_radius)
            self._shortest = path.length if path is not None else 0.0
        return self._shortest

    def evaluate(self, final_pose: Pose, answer: str) -> dict:
        verdict = judge_answer(self.script, answer, self.judge)
        near = self.sim.distance_to_target(final_pose.xy, self.script.target) <= self.success_radius + 1e-9
        success = near if self.script.task == "navigation" else verdict.matched
        return {
            "success": success,
            "matched": verdict.matched,
            "judge_error": verdict.error,
            "shortest_len": self.shortest_length(),
        }
