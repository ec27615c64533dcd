import math

import numpy as np
import pytest

from memnav.errors import InvalidScanError, OutOfBoundsError, SnapshotError
from memnav.physical_space import (
    AnnotatedExplorationMap,
    Cell,
    Frontier,
    OccupancyGrid,
    Pose,
    compute_rho,
    compute_spl,
    extract_frontiers,
    integrate_depth_scan,
    map_from_dict,
    map_to_dict,
    march_cells,
    normalize_angle,
    prune_frontiers,
    render_retrieved_poses,
    shortest_path,
    to_pgm,
    traverse_cells,
)
from oracles import frontier_oracle, path_cost_oracle, prune_oracle, ray_cells_oracle, scan_oracle


def grid_from(rows: list[str], res: float = 0.1) -> OccupancyGrid:
    """Rows top-to-bottom as text: '.' free, '#' occupied, '?' unknown."""
    lut = {"?": Cell.UNKNOWN, ".": Cell.FREE, "#": Cell.OCCUPIED}
    h = len(rows)
    cells = np.zeros((len(rows[0]), h), dtype=np.uint8)
    for r, row in enumerate(rows):
        for x, ch in enumerate(row):
            cells[x, h - 1 - r] = lut[ch]
    return OccupancyGrid(res, (0.0, 0.0), cells)


# -------------------------------------------------------------- scans


def test_empty_scan_marks_only_self_cell():
    g = OccupancyGrid.empty(10, 10, 0.1)
    out = integrate_depth_scan(g, Pose.at(0.55, 0.55), [])
    assert out.known_count() == 1
    assert out.cells[5, 5] == Cell.FREE


def test_single_ray_three_cells():
    g = OccupancyGrid.empty(8, 8, 1.0, origin=(-0.5, -0.5))
    out = integrate_depth_scan(g, Pose.at(0.0, 0.0), [(0.0, 3.0, True)])
    states = [int(out.cells[out.world_to_cell(float(x), 0.0)]) for x in range(4)]
    assert states == [Cell.FREE, Cell.FREE, Cell.FREE, Cell.OCCUPIED]
    assert out.known_count() == 4


def test_random_scan_matches_line_marching_oracle():
    rng = np.random.default_rng(7)
    for _ in range(20):
        cells = rng.choice(3, size=(32, 32), p=[0.6, 0.3, 0.1]).astype(np.uint8)
        g = OccupancyGrid(0.1, (0.0, 0.0), cells)
        x, y = rng.uniform(1.3, 1.9, 2)
        pose = Pose.at(x, y, rng.uniform(-3, 3))
        scan = [(float(rng.uniform(-math.pi, math.pi)), float(rng.uniform(0, 1.0)), bool(rng.random() < 0.5))
                for _ in range(64)]
        out = integrate_depth_scan(g, pose, scan)
        expected = scan_oracle(cells, (0.0, 0.0), 0.1, (x, y), pose.yaw, scan)
        np.testing.assert_array_equal(out.cells, expected)


def test_march_cells_matches_clipping_oracle():
    rng = np.random.default_rng(3)
    for _ in range(300):
        start = tuple(rng.uniform(-2, 2, 2))
        a = rng.uniform(-math.pi, math.pi)
        d = (math.cos(a), math.sin(a))
        length = float(rng.uniform(0.01, 3.0))
        got = list(traverse_cells((0.0, 0.0), 0.1, start, d, length))
        expected, end = ray_cells_oracle((0.0, 0.0), 0.1, start, d, length)
        assert got == expected
        assert got[-1] == end


def test_march_cells_reports_entry_and_exit():
    cells = list(march_cells((0.0, 0.0), 1.0, (0.5, 0.5), (1.0, 0.0), 2.0))
    assert [(c[0], c[1]) for c in cells] == [(0, 0), (1, 0), (2, 0)]
    assert cells[1][2:] == (0.5, 1.5)


def test_scan_grows_grid_and_keeps_lattice():
    g = OccupancyGrid.around(0.0, 0.0, 0.5, 0.1)
    out = integrate_depth_scan(g, Pose.at(0.05, 0.05), [(0.0, 2.0, True)])
    assert out.width > g.width
    k = out.origin[0] / 0.1
    assert abs(k - round(k)) < 1e-9
    assert out.cells[out.world_to_cell(2.05, 0.05)] == Cell.OCCUPIED


def test_occupied_is_sticky():
    g = OccupancyGrid.empty(10, 3, 1.0, origin=(-0.5, -1.5))
    g = integrate_depth_scan(g, Pose.at(0.0, 0.0), [(0.0, 3.0, True)])
    g = integrate_depth_scan(g, Pose.at(0.0, 0.0), [(0.0, 5.0, False)])
    assert g.cells[g.world_to_cell(3.0, 0.0)] == Cell.OCCUPIED


def test_scan_errors():
    g = OccupancyGrid.empty(5, 5, 0.1)
    with pytest.raises(OutOfBoundsError):
        integrate_depth_scan(g, Pose.at(5.0, 5.0), [])
    with pytest.raises(InvalidScanError):
        integrate_depth_scan(g, Pose.at(0.25, 0.25), [(0.0, float("nan"), True)])
    with pytest.raises(InvalidScanError):
        integrate_depth_scan(g, Pose.at(0.25, 0.25), [(0.0, 2.0, True)], max_range=1.0)
    with pytest.raises(InvalidScanError):
        integrate_depth_scan(g, Pose.at(0.25, 0.25), [(0.0, -0.1, True)])


# -------------------------------------------------------------- frontiers


def test_all_unknown_has_no_frontiers():
    assert extract_frontiers(OccupancyGrid.empty(8, 8)) == []


def test_fully_classified_has_no_frontiers():
    g = grid_from(["..#", "#..", "..."])
    assert extract_frontiers(g) == []


def test_frontiers_match_oracle_on_random_grids():
    rng = np.random.default_rng(11)
    for _ in range(100):
        w, h = rng.integers(1, 40, 2)
        cells = rng.choice(3, size=(w, h), p=rng.dirichlet([1, 1, 1])).astype(np.uint8)
        got = {f.cells: f.rho for f in extract_frontiers(OccupancyGrid(0.1, (0, 0), cells), 10)}
        assert got == frontier_oracle(cells.tolist(), 10)


def test_frontier_centroid_is_cell_mean():
    g = grid_from(["???", "...", "###"], res=1.0)
    (f,) = extract_frontiers(g, 1)
    assert f.size == 3
    assert f.centroid == pytest.approx((1.5, 1.5))


def test_rho_small_isolated_unknown():
    g = grid_from([".....", ".....", "..?..", ".....", "....."])
    frontiers = extract_frontiers(g)
    # the four neighbours of the hole are only diagonally connected
    assert len(frontiers) == 4
    for f in frontiers:
        assert compute_rho(g, f, 5) is False
        assert compute_rho(g, f, 1) is True


def test_rho_matches_extraction():
    rng = np.random.default_rng(2)
    for _ in range(30):
        cells = rng.choice(3, size=(20, 20), p=[0.4, 0.5, 0.1]).astype(np.uint8)
        g = OccupancyGrid(0.1, (0, 0), cells)
        for f in extract_frontiers(g, 7):
            assert compute_rho(g, f, 7) == f.rho


# ------------------------------------------------------------ annotation


def _frontier(cx, cy, rho=True):
    return Frontier(frozenset({(0, 0)}), (cx, cy), rho)


def test_no_poses_gives_infinite_distance():
    g = OccupancyGrid.empty(10, 10, 0.5)
    amap = render_retrieved_poses(g, [], Pose.at(1, 1), [_frontier(2, 2), _frontier(3, 1)])
    assert all(math.isinf(f.dist_to_retrieved) for f in amap.frontiers)


def test_pose_on_centroid_gives_zero():
    g = OccupancyGrid.empty(10, 10, 0.5)
    amap = render_retrieved_poses(g, [Pose.at(2.0, 2.0)], Pose.at(1, 1), [_frontier(2.0, 2.0)])
    assert amap.frontiers[0].dist_to_retrieved == 0.0


def test_annotation_matches_pairwise_oracle():
    rng = np.random.default_rng(5)
    g = OccupancyGrid.empty(100, 100, 0.1)
    poses = [Pose.at(*rng.uniform(0, 10, 2)) for _ in range(10)]
    fr = [_frontier(*rng.uniform(0, 10, 2)) for _ in range(5)]
    amap = render_retrieved_poses(g, poses, Pose.at(5, 5), fr)
    for f_in, f_out in zip(fr, amap.frontiers):
        want = min(math.dist(f_in.centroid, p.xy) for p in poses)
        assert f_out.dist_to_retrieved == pytest.approx(want, abs=1e-12)


def test_annotation_shifts_cells_when_grid_grows():
    g = OccupancyGrid.empty(10, 10, 0.1)
    f = Frontier(frozenset({(1, 1)}), g.cell_center(1, 1), True)
    amap = render_retrieved_poses(g, [Pose.at(-1.0, -1.0)], Pose.at(0.5, 0.5), [f])
    (cell,) = amap.frontiers[0].cells
    assert amap.grid.cell_center(*cell) == pytest.approx(f.centroid)


# --------------------------------------------------------------- pruning


def _amap(dists, rhos=None):
    rhos = rhos or [True] * len(dists)
    fr = [Frontier(frozenset({(i, 0)}), (float(i), 0.0), r, d) for i, (d, r) in enumerate(zip(dists, rhos))]
    return AnnotatedExplorationMap(OccupancyGrid.empty(4, 4), [], fr, Pose.at(0, 0))


def test_explore_all_rho_keeps_everything():
    amap = _amap([0.1, 5.0, 1.0])
    assert prune_frontiers(amap, True) == amap.frontiers


def test_explore_false_without_poses_keeps_all():
    amap = _amap([math.inf] * 3)
    assert prune_frontiers(amap, False, 1.5) == amap.frontiers


def test_prune_strict_threshold():
    amap = _amap([0.5, 1.9, 2.0, 3.1])
    kept = prune_frontiers(amap, False, 2.0)
    assert [f.dist_to_retrieved for f in kept] == [3.1]


def test_explore_drops_low_rho():
    amap = _amap([1.0, 1.0, 1.0], [True, False, True])
    assert [f.centroid[0] for f in prune_frontiers(amap, True)] == [0.0, 2.0]


def test_prune_matches_oracle():
    rng = np.random.default_rng(9)
    g = OccupancyGrid.empty(50, 50, 0.2)
    for _ in range(50):
        fr = [_frontier(*rng.uniform(0, 10, 2), bool(rng.random() < 0.5)) for _ in range(rng.integers(0, 8))]
        poses = [Pose.at(*rng.uniform(0, 10, 2)) for _ in range(rng.integers(0, 6))]
        explore, d_min = bool(rng.random() < 0.5), float(rng.uniform(0, 4))
        kept = prune_frontiers(render_retrieved_poses(g, poses, Pose.at(1, 1), fr), explore, d_min)
        want = prune_oracle([f.centroid for f in fr], [f.rho for f in fr], [p.xy for p in poses], explore, d_min)
        assert [f.centroid for f in kept] == [fr[i].centroid for i in want]


# ------------------------------------------------------------ paths


def test_path_to_self_is_zero():
    g = grid_from(["..."], res=0.5)
    p = shortest_path(g, Pose.at(0.25, 0.25), (0.25, 0.25))
    assert p.length == 0.0


def test_corridor_length():
    g = grid_from(["....."], res=0.5)
    p = shortest_path(g, Pose.at(0.25, 0.25), (2.25, 0.25))
    assert p.length == pytest.approx(2.0)
    assert len(p.points) == 5


def test_unreachable_and_blocked_goal():
    g = grid_from(["..#.."], res=1.0)
    assert shortest_path(g, Pose.at(0.5, 0.5), (4.5, 0.5)) is None
    assert shortest_path(g, Pose.at(0.5, 0.5), (2.5, 0.5)) is None
    assert shortest_path(g, Pose.at(0.5, 0.5), (40.0, 0.5)) is None


def test_no_corner_cutting():
    g = grid_from([".#", "#."], res=1.0)
    assert shortest_path(g, Pose.at(0.5, 0.5), (1.5, 1.5)) is None


def test_paths_match_relaxation_oracle():
    rng = np.random.default_rng(21)
    for _ in range(40):
        w, h = rng.integers(2, 33, 2)
        cells = rng.choice([1, 2], size=(w, h), p=[0.7, 0.3]).astype(np.uint8)
        g = OccupancyGrid(0.5, (0.0, 0.0), cells)
        s = (int(rng.integers(w)), int(rng.integers(h)))
        d = (int(rng.integers(w)), int(rng.integers(h)))
        p = shortest_path(g, g.cell_center(*s), g.cell_center(*d))
        want = path_cost_oracle(cells.tolist(), s, d, 0.5) if (cells[d] == 1 or d == s) else math.inf
        got = p.length if p else math.inf
        assert got == pytest.approx(want, abs=1e-9) if math.isfinite(want) else math.isinf(got)


# ------------------------------------------------------------ SPL


def test_spl_examples():
    assert compute_spl(True, 10.0, 10.0) == 1.0
    assert compute_spl(False, 10.0, 10.0) == 0.0
    assert compute_spl(True, 5.0, 10.0) == 0.5
    assert compute_spl(True, 0.0, 0.0) == 1.0
    assert compute_spl(True, 4.0, 3.0) == 1.0
    with pytest.raises(ValueError):
        compute_spl(True, -1.0, 1.0)


# ------------------------------------------------------------ misc


def test_normalize_angle_range():
    for a in (-10.0, -math.pi, math.pi, 0.0, 7.5, 3 * math.pi):
        b = normalize_angle(a)
        assert -math.pi <= b < math.pi
        assert math.isclose(math.cos(a), math.cos(b), abs_tol=1e-12)


def test_map_round_trip_and_pgm():
    g = grid_from(["?.#", "..#"], res=0.1)
    back = map_from_dict(map_to_dict(g)).grid
    np.testing.assert_array_equal(back.cells, g.cells)
    assert back.origin == g.origin
    pgm = to_pgm(g)
    assert pgm.startswith(b"P5\n3 2\n255\n")
    assert pgm[-3:] == bytes([255, 255, 0])


def test_map_version_mismatch():
    d = map_to_dict(OccupancyGrid.empty(2, 2))
    d["version"] = 99
    with pytest.raises(SnapshotError):
        map_from_dict(d)
