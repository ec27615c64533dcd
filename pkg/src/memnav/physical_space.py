"""2D occupancy exploration map.

Cells are addressed as ``(ix, iy)``: ``ix`` grows along world +x and ``iy``
along world +y. Cell ``(ix, iy)`` covers the half-open square
``[ox + ix*res, ox + (ix+1)*res) x [oy + iy*res, oy + (iy+1)*res)``.
The cell array is stored with shape ``(width, height)`` so that
``cells[ix, iy]`` reads naturally.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import IntEnum
from typing import Iterable, Iterator, NamedTuple, Sequence

import numpy as np
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra

from memnav.errors import InvalidScanError, MigrationError, OutOfBoundsError, SnapshotError

FOUR_CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)
SQRT2 = math.sqrt(2.0)
MAP_FORMAT_VERSION = 1


class Cell(IntEnum):
    UNKNOWN = 0
    FREE = 1
    OCCUPIED = 2


def normalize_angle(angle: float) -> float:
    """Wrap an angle into [-pi, pi)."""
    wrapped = math.fmod(angle + math.pi, 2.0 * math.pi)
    if wrapped < 0.0:
        wrapped += 2.0 * math.pi
    out = wrapped - math.pi
    # fmod can land exactly on +pi after the shift for inputs near -pi
    return -math.pi if out >= math.pi else out


@dataclass(frozen=True)
class Pose:
    position: tuple[float, float, float]
    yaw: float = 0.0

    def __post_init__(self):
        pos = tuple(float(v) for v in self.position)
        if len(pos) == 2:
            pos = (pos[0], pos[1], 0.0)
        if len(pos) != 3 or not all(math.isfinite(v) for v in pos):
            raise ValueError(f"pose position must be 3 finite values, got {self.position!r}")
        if not math.isfinite(self.yaw):
            raise ValueError("pose yaw must be finite")
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "yaw", normalize_angle(float(self.yaw)))

    @classmethod
    def at(cls, x: float, y: float, yaw: float = 0.0, z: float = 0.0) -> "Pose":
        return cls((x, y, z), yaw)

    @property
    def x(self) -> float:
        return self.position[0]

    @property
    def y(self) -> float:
        return self.position[1]

    @property
    def xy(self) -> tuple[float, float]:
        return (self.position[0], self.position[1])

    def to_dict(self) -> dict:
        return {"position": list(self.position), "yaw": self.yaw}

    @classmethod
    def from_dict(cls, data: dict) -> "Pose":
        return cls(tuple(data["position"]), data.get("yaw", 0.0))


@dataclass
class OccupancyGrid:
    resolution: float
    origin: tuple[float, float]
    cells: np.ndarray

    def __post_init__(self):
        if not self.resolution > 0:
            raise ValueError("resolution must be positive")
        self.origin = (float(self.origin[0]), float(self.origin[1]))
        self.cells = np.asarray(self.cells, dtype=np.uint8)
        if self.cells.ndim != 2:
            raise ValueError("cells must be a 2D array")
        if self.cells.size and self.cells.max() > Cell.OCCUPIED:
            raise ValueError("cells hold values outside {Unknown, Free, Occupied}")

    @classmethod
    def empty(
        cls,
        width: int,
        height: int,
        resolution: float = 0.1,
        origin: tuple[float, float] = (0.0, 0.0),
    ) -> "OccupancyGrid":
        return cls(resolution, origin, np.zeros((width, height), dtype=np.uint8))

    @classmethod
    def around(cls, x: float, y: float, half_extent: float = 2.0, resolution: float = 0.1) -> "OccupancyGrid":
        """Unknown grid centred on ``(x, y)`` whose origin sits on the global lattice."""
        n = int(math.ceil(half_extent / resolution))
        ix0 = math.floor(x / resolution) - n
        iy0 = math.floor(y / resolution) - n
        return cls.empty(2 * n + 1, 2 * n + 1, resolution, (ix0 * resolution, iy0 * resolution))

    @property
    def width(self) -> int:
        return self.cells.shape[0]

    @property
    def height(self) -> int:
        return self.cells.shape[1]

    def copy(self) -> "OccupancyGrid":
        return OccupancyGrid(self.resolution, self.origin, self.cells.copy())

    def world_to_cell(self, x: float, y: float) -> tuple[int, int]:
        return (
            math.floor((x - self.origin[0]) / self.resolution),
            math.floor((y - self.origin[1]) / self.resolution),
        )

    def cell_center(self, ix: int, iy: int) -> tuple[float, float]:
        return (
            self.origin[0] + (ix + 0.5) * self.resolution,
            self.origin[1] + (iy + 0.5) * self.resolution,
        )

    def in_bounds(self, ix: int, iy: int) -> bool:
        return 0 <= ix < self.width and 0 <= iy < self.height

    def contains(self, x: float, y: float) -> bool:
        return self.in_bounds(*self.world_to_cell(x, y))

    def known_count(self) -> int:
        return int(np.count_nonzero(self.cells != Cell.UNKNOWN))

    def grown(self, points: Iterable[tuple[float, float]], margin: int = 2) -> tuple["OccupancyGrid", tuple[int, int]]:
        """Return a grid padded with Unknown so every point falls inside.

        The second item is the index shift ``(dx, dy)`` to add to cell
        coordinates of the old grid to address the same cell in the new one.
        """
        lo_x, lo_y, hi_x, hi_y = 0, 0, self.width - 1, self.height - 1
        for x, y in points:
            ix, iy = self.world_to_cell(x, y)
            lo_x, lo_y = min(lo_x, ix - margin), min(lo_y, iy - margin)
            hi_x, hi_y = max(hi_x, ix + margin), max(hi_y, iy + margin)
        if lo_x == 0 and lo_y == 0 and hi_x == self.width - 1 and hi_y == self.height - 1:
            return self, (0, 0)
        dx, dy = -lo_x, -lo_y
        cells = np.zeros((hi_x - lo_x + 1, hi_y - lo_y + 1), dtype=np.uint8)
        cells[dx : dx + self.width, dy : dy + self.height] = self.cells
        origin = (self.origin[0] - dx * self.resolution, self.origin[1] - dy * self.resolution)
        return OccupancyGrid(self.resolution, origin, cells), (dx, dy)


@dataclass(frozen=True)
class Frontier:
    cells: frozenset
    centroid: tuple[float, float]
    rho: bool = False
    dist_to_retrieved: float = math.inf

    @property
    def size(self) -> int:
        return len(self.cells)

    def shifted(self, dx: int, dy: int) -> "Frontier":
        if dx == 0 and dy == 0:
            return self
        return replace(self, cells=frozenset((ix + dx, iy + dy) for ix, iy in self.cells))


@dataclass
class AnnotatedExplorationMap:
    grid: OccupancyGrid
    retrieved_poses: list[Pose]
    frontiers: list[Frontier]
    agent_pose: Pose


class GridPath(NamedTuple):
    points: list[tuple[float, float]]
    length: float


# ---------------------------------------------------------------- ray casting


def _lattice_coord(value: float, origin: float, resolution: float) -> float:
    # grids whose origins sit on one lattice must agree on every crossing
    k = origin / resolution
    n = round(k)
    if abs(k - n) < 1e-6:
        return value / resolution - n
    return (value - origin) / resolution


def march_cells(
    origin: tuple[float, float],
    resolution: float,
    start: tuple[float, float],
    direction: tuple[float, float],
    length: float,
) -> Iterator[tuple[int, int, float, float]]:
    """Yield ``(ix, iy, t_in, t_out)`` for lattice cells crossed by ``start + t*direction``.

    ``direction`` must be a unit vector and ``t`` runs over ``[0, length]``;
    ``t_out`` of the last cell may exceed ``length``. On an exact corner
    crossing the y step is taken first. Indices may be negative.
    """
    x0 = _lattice_coord(start[0], origin[0], resolution)
    y0 = _lattice_coord(start[1], origin[1], resolution)
    dx, dy = direction
    ix, iy = math.floor(x0), math.floor(y0)
    step_x = 1 if dx > 0 else -1
    step_y = 1 if dy > 0 else -1
    if dx != 0.0:
        t_max_x = ((ix + 1 if dx > 0 else ix) - x0) / dx * resolution
        t_delta_x = resolution / abs(dx)
    else:
        t_max_x = t_delta_x = math.inf
    if dy != 0.0:
        t_max_y = ((iy + 1 if dy > 0 else iy) - y0) / dy * resolution
        t_delta_y = resolution / abs(dy)
    else:
        t_max_y = t_delta_y = math.inf
    t_in = 0.0
    while True:
        t_out = t_max_x if t_max_x < t_max_y else t_max_y
        yield ix, iy, t_in, t_out
        if t_out > length or length <= 0.0:
            return
        t_in = t_out
        if t_max_x < t_max_y:
            ix += step_x
            t_max_x += t_delta_x
        else:
            iy += step_y
            t_max_y += t_delta_y


def traverse_cells(
    origin: tuple[float, float],
    resolution: float,
    start: tuple[float, float],
    direction: tuple[float, float],
    length: float,
) -> Iterator[tuple[int, int]]:
    """Cells crossed by a segment, in order; the last one contains its end point."""
    for ix, iy, _, _ in march_cells(origin, resolution, start, direction, length):
        yield ix, iy


def integrate_depth_scan(
    grid: OccupancyGrid,
    pose: Pose,
    scan: Sequence[tuple[float, float, bool]],
    max_range: float | None = None,
) -> OccupancyGrid:
    """Ray-cast a depth scan into a copy of ``grid``.

    Each scan entry is ``(bearing, range, hit)`` with the bearing relative
    to the pose heading. Cells before the endpoint become Free; the endpoint
    cell becomes Occupied when ``hit``. Occupied cells are never demoted,
    and within one scan an Occupied write beats any Free write. The grid
    grows with Unknown padding when rays leave it.
    """
    if not grid.contains(pose.x, pose.y):
        raise OutOfBoundsError(f"pose {pose.xy} lies outside the grid")
    rays = []
    for bearing, rng, hit in scan:
        if not (math.isfinite(bearing) and math.isfinite(rng)):
            raise InvalidScanError(f"non-finite scan entry ({bearing}, {rng})")
        if rng < 0 or (max_range is not None and rng > max_range + 1e-9):
            raise InvalidScanError(f"range {rng} outside [0, {max_range}]")
        angle = pose.yaw + bearing
        rays.append(((math.cos(angle), math.sin(angle)), float(rng), bool(hit)))

    ends = [(pose.x + d[0] * r, pose.y + d[1] * r) for d, r, _ in rays]
    out, _ = grid.grown(ends, margin=2)
    out = out.copy() if out is grid else out

    free: set[tuple[int, int]] = set()
    occupied: set[tuple[int, int]] = set()
    ox, oy = out.origin
    start = pose.xy
    for direction, rng, hit in rays:
        cells = list(traverse_cells((ox, oy), out.resolution, start, direction, rng))
        free.update(cells[:-1])
        (occupied if hit else free).add(cells[-1])

    self_cell = out.world_to_cell(pose.x, pose.y)
    free.add(self_cell)
    free -= occupied
    if free:
        fx, fy = np.array(list(free)).T
        current = out.cells[fx, fy]
        out.cells[fx, fy] = np.where(current == Cell.OCCUPIED, Cell.OCCUPIED, Cell.FREE)
    if occupied:
        qx, qy = np.array(list(occupied)).T
        out.cells[qx, qy] = Cell.OCCUPIED
    return out


# ------------------------------------------------------------------ frontiers


def _unknown_neighbour_mask(unknown: np.ndarray) -> np.ndarray:
    nb = np.zeros_like(unknown)
    nb[1:, :] |= unknown[:-1, :]
    nb[:-1, :] |= unknown[1:, :]
    nb[:, 1:] |= unknown[:, :-1]
    nb[:, :-1] |= unknown[:, 1:]
    return nb


def _neighbour_labels(labels: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Labels of the four neighbours of each (x, y); 0 where off-grid."""
    w, h = labels.shape
    out = []
    for ddx, ddy in ((1, 0), (-1, 0), (0, 1), (0, -1)):
        nx, ny = xs + ddx, ys + ddy
        ok = (nx >= 0) & (nx < w) & (ny >= 0) & (ny < h)
        vals = np.zeros(xs.shape, dtype=labels.dtype)
        vals[ok] = labels[nx[ok], ny[ok]]
        out.append(vals)
    return np.stack(out, axis=1)


def extract_frontiers(grid: OccupancyGrid, min_unknown_area: int = 10) -> list[Frontier]:
    """Maximal 4-connected components of Free cells that touch Unknown.

    Components come back in raster order of their first cell. ``rho`` is
    filled in with the same rule as :func:`compute_rho`.
    """
    cells = grid.cells
    unknown = cells == Cell.UNKNOWN
    mask = (cells == Cell.FREE) & _unknown_neighbour_mask(unknown)
    if not mask.any():
        return []
    labels, count = ndimage.label(mask, structure=FOUR_CONNECTED)
    unk_labels, _ = ndimage.label(unknown, structure=FOUR_CONNECTED)
    unk_sizes = np.bincount(unk_labels.ravel())

    xs, ys = np.nonzero(mask)
    comp = labels[xs, ys]
    order = np.argsort(comp, kind="stable")
    xs, ys, comp = xs[order], ys[order], comp[order]
    nb = _neighbour_labels(unk_labels, xs, ys)
    bounds = np.searchsorted(comp, np.arange(1, count + 2))

    res = grid.resolution
    ox, oy = grid.origin
    frontiers = []
    for k in range(count):
        lo, hi = bounds[k], bounds[k + 1]
        cx, cy = xs[lo:hi], ys[lo:hi]
        touched = np.unique(nb[lo:hi])
        touched = touched[touched > 0]
        area = int(unk_sizes[touched].sum())
        centroid = (ox + (cx.mean() + 0.5) * res, oy + (cy.mean() + 0.5) * res)
        frontiers.append(
            Frontier(
                cells=frozenset(zip(cx.tolist(), cy.tolist())),
                centroid=(float(centroid[0]), float(centroid[1])),
                rho=area >= min_unknown_area,
            )
        )
    return frontiers


def compute_rho(grid: OccupancyGrid, frontier: Frontier, min_unknown_area: int = 10) -> bool:
    """True when the Unknown region reachable from the frontier is big enough."""
    unknown = grid.cells == Cell.UNKNOWN
    unk_labels, _ = ndimage.label(unknown, structure=FOUR_CONNECTED)
    sizes = np.bincount(unk_labels.ravel())
    xs, ys = np.array(sorted(frontier.cells)).T
    touched = np.unique(_neighbour_labels(unk_labels, xs, ys))
    touched = touched[touched > 0]
    return int(sizes[touched].sum()) >= min_unknown_area


def render_retrieved_poses(
    grid: OccupancyGrid,
    poses: Sequence[Pose],
    agent: Pose,
    frontiers: Sequence[Frontier],
) -> AnnotatedExplorationMap:
    """Compose the exploration map with recalled camera poses as landmarks.

    Each frontier's ``dist_to_retrieved`` becomes the smallest planar
    distance from its centroid to any retrieved pose (inf when none).
    """
    points = [p.xy for p in poses] + [agent.xy]
    out, (dx, dy) = grid.grown(points, margin=1)
    landmarks = np.array([p.xy for p in poses], dtype=float).reshape(-1, 2)
    annotated = []
    for f in frontiers:
        if len(landmarks):
            d = float(np.min(np.hypot(landmarks[:, 0] - f.centroid[0], landmarks[:, 1] - f.centroid[1])))
        else:
            d = math.inf
        annotated.append(replace(f.shifted(dx, dy), dist_to_retrieved=d))
    return AnnotatedExplorationMap(out, list(poses), annotated, agent)


def prune_frontiers(amap: AnnotatedExplorationMap, explore: bool, d_min: float = 1.5) -> list[Frontier]:
    """Keep frontiers that lead somewhere new (explore) or lie away from recalled landmarks."""
    if explore:
        return [f for f in amap.frontiers if f.rho]
    return [f for f in amap.frontiers if f.dist_to_retrieved > d_min]


# --------------------------------------------------------------- path search

_MOVES = ((1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1))


def _passable(grid: OccupancyGrid, start: tuple[int, int] | None = None, through_unknown: bool = False) -> np.ndarray:
    ok = grid.cells != Cell.OCCUPIED if through_unknown else grid.cells == Cell.FREE
    if start is not None and grid.in_bounds(*start):
        ok = ok.copy()
        ok[start] = True
    return ok


def _move_graph(passable: np.ndarray):
    """Sparse 8-connected graph; diagonals need both orthogonal neighbours passable."""
    w, h = passable.shape
    idx = np.arange(w * h).reshape(w, h)
    rows, cols, vals = [], [], []
    for ddx, ddy in _MOVES:
        sx = slice(max(0, -ddx), w - max(0, ddx))
        sy = slice(max(0, -ddy), h - max(0, ddy))
        tx = slice(max(0, ddx), w - max(0, -ddx))
        ty = slice(max(0, ddy), h - max(0, -ddy))
        ok = passable[sx, sy] & passable[tx, ty]
        cost = 1.0
        if ddx and ddy:
            # no corner cutting past a non-Free cell
            ox_ = slice(max(0, ddx), w - max(0, -ddx))
            oy_ = slice(max(0, ddy), h - max(0, -ddy))
            ok = ok & passable[ox_, sy] & passable[sx, oy_]
            cost = SQRT2
        rows.append(idx[sx, sy][ok])
        cols.append(idx[tx, ty][ok])
        vals.append(np.full(int(ok.sum()), cost))
    r = np.concatenate(rows)
    c = np.concatenate(cols)
    v = np.concatenate(vals)
    return coo_matrix((v, (r, c)), shape=(w * h, w * h)).tocsr()


@dataclass
class DistanceField:
    """Single-source path costs over a grid (in metres) with predecessors."""

    grid: OccupancyGrid
    source: tuple[int, int]
    dist: np.ndarray
    predecessors: np.ndarray = field(repr=False)

    def cost_to(self, cell: tuple[int, int]) -> float:
        if not self.grid.in_bounds(*cell):
            return math.inf
        return float(self.dist[cell])

    def path_to(self, cell: tuple[int, int]) -> GridPath | None:
        if not math.isfinite(self.cost_to(cell)):
            return None
        h = self.grid.height
        node = cell[0] * h + cell[1]
        src = self.source[0] * h + self.source[1]
        chain = [node]
        while node != src:
            node = int(self.predecessors[node])
            chain.append(node)
        chain.reverse()
        points = [self.grid.cell_center(n // h, n % h) for n in chain]
        return GridPath(points, path_length(points))


def distance_field(grid: OccupancyGrid, start: tuple[float, float], through_unknown: bool = False) -> DistanceField:
    """Path costs from ``start`` over Free cells, or over every non-Occupied cell when ``through_unknown``."""
    if not grid.contains(*start):
        raise OutOfBoundsError(f"start {start} lies outside the grid")
    src = grid.world_to_cell(*start)
    passable = _passable(grid, src, through_unknown)
    graph = _move_graph(passable)
    h = grid.height
    dist, pred = dijkstra(graph, directed=True, indices=src[0] * h + src[1], return_predecessors=True)
    dist = dist.reshape(grid.width, grid.height) * grid.resolution
    return DistanceField(grid, src, dist, pred)


def shortest_path(grid: OccupancyGrid, start: Pose | tuple[float, float], goal: tuple[float, float]) -> GridPath | None:
    """Minimum-cost 8-connected path through Free cells, or None when unreachable.

    Diagonal steps cost sqrt(2) cells and are only taken when both cells
    sharing the corner are Free. Points are cell centres, start cell first.
    """
    start_xy = start.xy if isinstance(start, Pose) else start
    if not grid.contains(*goal):
        return None
    goal_cell = grid.world_to_cell(*goal)
    src = grid.world_to_cell(*start_xy)
    if goal_cell != src and grid.cells[goal_cell] != Cell.FREE:
        return None
    return distance_field(grid, start_xy).path_to(goal_cell)


def path_length(points: Sequence[tuple[float, float]]) -> float:
    return float(sum(math.hypot(b[0] - a[0], b[1] - a[1]) for a, b in zip(points, points[1:])))


def compute_spl(success: bool, shortest_len: float, actual_len: float) -> float:
    if shortest_len < 0 or actual_len < 0:
        raise ValueError("path lengths must be non-negative")
    if not success:
        return 0.0
    denom = max(actual_len, shortest_len)
    if denom == 0.0:
        return 1.0
    return shortest_len / denom


# -------------------------------------------------------------------- export


def to_pgm(grid: OccupancyGrid, binary: bool = True) -> bytes:
    """Portable graymap, top row = highest y. Unknown 128, Free 255, Occupied 0."""
    lut = np.array([128, 255, 0], dtype=np.uint8)
    image = lut[grid.cells].T[::-1]
    header = f"{'P5' if binary else 'P2'}\n{grid.width} {grid.height}\n255\n".encode()
    if binary:
        return header + image.tobytes()
    rows = "\n".join(" ".join(str(v) for v in row) for row in image)
    return header + rows.encode() + b"\n"


def _rle(flat: np.ndarray) -> list[list[int]]:
    if flat.size == 0:
        return []
    change = np.flatnonzero(np.diff(flat)) + 1
    starts = np.concatenate([[0], change])
    lengths = np.diff(np.concatenate([starts, [flat.size]]))
    return [[int(flat[s]), int(n)] for s, n in zip(starts, lengths)]


def _unrle(runs: list[list[int]], size: int) -> np.ndarray:
    flat = np.concatenate([np.full(n, v, dtype=np.uint8) for v, n in runs]) if runs else np.zeros(0, np.uint8)
    if flat.size != size:
        raise SnapshotError(f"run-length cells decode to {flat.size} values, expected {size}")
    return flat


def grid_to_dict(grid: OccupancyGrid) -> dict:
    """Cells are run-length encoded over the C-order flattening of ``cells[ix, iy]``."""
    return {
        "resolution": grid.resolution,
        "origin": list(grid.origin),
        "width": grid.width,
        "height": grid.height,
        "rle": _rle(grid.cells.ravel()),
    }


def grid_from_dict(data: dict) -> OccupancyGrid:
    w, h = int(data["width"]), int(data["height"])
    flat = _unrle(data["rle"], w * h)
    return OccupancyGrid(float(data["resolution"]), tuple(data["origin"]), flat.reshape(w, h))


def _frontier_to_dict(f: Frontier) -> dict:
    return {
        "cells": sorted([list(c) for c in f.cells]),
        "centroid": list(f.centroid),
        "rho": f.rho,
        "dist_to_retrieved": None if math.isinf(f.dist_to_retrieved) else f.dist_to_retrieved,
    }


def _frontier_from_dict(d: dict) -> Frontier:
    dist = d.get("dist_to_retrieved")
    return Frontier(
        frozenset(tuple(c) for c in d["cells"]),
        tuple(d["centroid"]),
        bool(d["rho"]),
        math.inf if dist is None else float(dist),
    )


def map_to_dict(amap: AnnotatedExplorationMap | OccupancyGrid) -> dict:
    if isinstance(amap, OccupancyGrid):
        amap = AnnotatedExplorationMap(amap, [], [], None)
    return {
        "format": "occupancy-map",
        "version": MAP_FORMAT_VERSION,
        "grid": grid_to_dict(amap.grid),
        "retrieved_poses": [p.to_dict() for p in amap.retrieved_poses],
        "frontiers": [_frontier_to_dict(f) for f in amap.frontiers],
        "agent_pose": amap.agent_pose.to_dict() if amap.agent_pose is not None else None,
    }


def map_from_dict(data: dict) -> AnnotatedExplorationMap:
    if data.get("format") != "occupancy-map":
        raise SnapshotError("not an occupancy-map snapshot")
    if data.get("version") != MAP_FORMAT_VERSION:
        raise MigrationError(f"map snapshot version {data.get('version')} unsupported")
    agent = data.get("agent_pose")
    return AnnotatedExplorationMap(
        grid_from_dict(data["grid"]),
        [Pose.from_dict(p) for p in data["retrieved_poses"]],
        [_frontier_from_dict(f) for f in data["frontiers"]],
        Pose.from_dict(agent) if agent is not None else None,
    )
