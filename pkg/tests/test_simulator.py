import math

import numpy as np
import pytest

from memnav.errors import OutOfBoundsError, SceneError
from memnav.gateway import FailingChat
from memnav.mock_adjudicator import SimAdjudicator
from memnav.physical_space import Pose
from memnav.semantic_memory import GroundTruthTrajectory
from memnav.simulator import (
    EpisodeScript,
    SceneObject,
    SceneSpec,
    SensorConfig,
    Simulator,
    Wall,
    generate_scene,
    generate_scripts,
    judge_answer,
    load_scene,
    load_script,
    parse_image_ref,
    image_ref,
    save_scene,
    save_script,
    scene_to_dict,
    script_to_dict,
    validate_script,
)
from oracles import segment_box_interval


def box_walls(x0, y0, x1, y1):
    return [Wall((x0, y0), (x1, y0)), Wall((x1, y0), (x1, y1)), Wall((x1, y1), (x0, y1)), Wall((x0, y1), (x0, y0))]


def wall_room(objects=()):
    # inner face of the east wall sits 0.5 m east of the spawn at the origin
    return SceneSpec("box", box_walls(-2.0, -2.0, 0.6, 2.0), list(objects), [Pose.at(0.0, 0.0)])


NARROW = SensorConfig(fov=0.2, n_rays=9, max_range=3.0, face_rays=False)


def test_bare_wall_gives_no_regions_and_half_metre_ranges():
    sim = Simulator(wall_room(), NARROW)
    obs, scan = sim.observe(Pose.at(0.0, 0.0, 0.0))
    assert obs.regions == []
    assert all(hit for _, _, hit in scan)
    assert [r for _, r, _ in scan] == pytest.approx([0.5] * 9, abs=0.01)
    assert np.linalg.norm(obs.global_embedding) == pytest.approx(1.0)


def test_refrigerator_region_matches_its_base_vector():
    fridge = SceneObject("refrigerator", (0.3, 0.0, 0.9), (0.2, 0.6, 1.8), "kitchen")
    sim = Simulator(wall_room([fridge]), NARROW)
    obs, _ = sim.observe(Pose.at(0.0, 0.0, 0.0))
    assert [r.label for r in obs.regions] == ["refrigerator"]
    region = obs.regions[0]
    assert float(region.embedding @ sim.embedder.base("refrigerator")) >= 0.9
    assert region.box.center == fridge.position
    np.testing.assert_allclose(obs.global_embedding, region.embedding)


def test_same_category_close_distinct_categories_apart():
    sim = Simulator(load_scene("three_room"))
    e = sim.embedder
    views = [e.region("sofa", "lounge", f"view{i}") for i in range(20)]
    assert min(float(a @ b) for a in views for b in views) >= 0.9
    assert float(e.region("sofa", "lounge", "x") @ e.region("oven", "kitchen", "y")) <= 0.3


def test_observe_is_deterministic():
    sim_a, sim_b = Simulator(load_scene("three_room")), Simulator(load_scene("three_room"))
    pose = Pose.at(2.05, 2.55, 0.3)
    (oa, sa), (ob, sb) = sim_a.observe(pose, "e", 3), sim_b.observe(pose, "e", 3)
    assert sa == sb
    assert oa.id == ob.id and oa.image_ref == ob.image_ref
    np.testing.assert_array_equal(oa.global_embedding, ob.global_embedding)
    assert [r.label for r in oa.regions] == [r.label for r in ob.regions]
    for ra, rb in zip(oa.regions, ob.regions):
        np.testing.assert_array_equal(ra.embedding, rb.embedding)


def test_pose_outside_scene_rejected():
    sim = Simulator(wall_room())
    with pytest.raises(OutOfBoundsError):
        sim.observe(Pose.at(5.0, 0.0))
    with pytest.raises(OutOfBoundsError):
        sim.observe(Pose.at(0.6, 0.0))


def test_image_ref_round_trip():
    pose = Pose.at(1.25, -3.5, 0.75)
    name, back = parse_image_ref(image_ref("three_room", pose))
    assert name == "three_room" and back == pose
    assert parse_image_ref("img://x") is None


# ------------------------------------------------------------------ motion


def corridor():
    return SceneSpec("corridor", box_walls(-0.5, -0.5, 4.0, 0.5), [], [Pose.at(0.0, 0.0)])


def test_move_to_own_position_has_zero_delta():
    sim = Simulator(corridor())
    r = sim.execute_move(Pose.at(0.0, 0.0), [(0.0, 0.0)])
    assert r.delta == 0.0 and not r.collided and r.pose.xy == (0.0, 0.0)


def test_three_metre_corridor():
    sim = Simulator(corridor())
    r = sim.execute_move(Pose.at(0.0, 0.0), [(1.0, 0.0), (3.0, 0.0)])
    assert r.delta == pytest.approx(3.0, abs=sim.grid.resolution)
    assert not r.collided and r.pose.xy == (3.0, 0.0)


def test_stale_map_path_is_truncated_at_wall():
    # the agent believes the corridor continues east; the true wall face is at x = 0.5
    sim = Simulator(wall_room())
    r = sim.execute_move(Pose.at(0.0, 0.0), [(0.2, 0.0), (1.5, 0.0)])
    assert r.collided
    assert r.pose.x == pytest.approx(0.5, abs=1e-3)
    assert r.delta == pytest.approx(0.5, abs=1e-3)
    assert sim.is_free(*r.pose.xy)


# ------------------------------------------------------------------ judging


def script(answer="kitchen", task="qa"):
    return EpisodeScript("s", "three_room", "Where is the oven?", "oven", answer, task=task)


def test_judge_cases():
    assert judge_answer(script(), "kitchen").matched
    assert not judge_answer(script(), "").matched
    assert judge_answer(script(), "The Kitchen!").matched
    assert not judge_answer(script(), "lounge").matched


def test_judge_gateway_paths():
    sim = Simulator(load_scene("three_room"))
    chat = SimAdjudicator(sim).client()
    assert judge_answer(script(), "the kitchen.", chat) == (True, False)
    assert judge_answer(script(), "dining", chat) == (False, False)
    assert judge_answer(script(), "kitchen", FailingChat()) == (False, True)


# ------------------------------------------------------------------ soundness


def wall_boxes(scene):
    return [((x0, y0), (x1, y1)) for x0, y0, x1, y1 in (w.rect(scene.wall_thickness) for w in scene.walls)]


@pytest.mark.parametrize("seed", range(6))
def test_no_region_for_an_occluded_object(seed):
    scene = generate_scene(seed)
    sim = Simulator(scene)
    boxes = wall_boxes(scene)
    rng = np.random.default_rng(seed)
    x0, y0, x1, y1 = scene.bounds
    checked = 0
    while checked < 25:
        x, y = float(rng.uniform(x0, x1)), float(rng.uniform(y0, y1))
        if not sim.is_free(x, y):
            continue
        checked += 1
        obs, _ = sim.observe(Pose.at(x, y, float(rng.uniform(-3, 3))))
        for region in obs.regions:
            ox, oy = region.box.center[0], region.box.center[1]
            length = math.hypot(ox - x, oy - y)
            d = ((ox - x) / length, (oy - y) / length)
            assert all(segment_box_interval((x, y), d, length, b) is None for b in boxes)


@pytest.mark.parametrize("seed", range(4))
def test_generated_scripts_have_valid_trajectories(seed):
    scene = generate_scene(seed)
    sim = Simulator(scene)
    scripts = generate_scripts(scene, sim, seed)
    assert len(scripts) == 2 * len(scene.objects)
    for s in scripts:
        validate_script(s, sim)
        pts = s.gt_trajectory.waypoints
        spawn = scene.spawns[s.spawn]
        assert tuple(pts[0]) == pytest.approx(spawn.xy)
        assert sim.distance_to_target(tuple(pts[-1]), s.target) <= 1.0


def test_colliding_trajectory_rejected():
    sim = Simulator(load_scene("three_room"))
    bad = EpisodeScript("b", "three_room", "Find the oven.", "oven", "oven",
                        gt_trajectory=GroundTruthTrajectory(np.array([[1.55, 2.55], [1.55, 0.9], [9.5, 0.9]])))
    with pytest.raises(SceneError):
        validate_script(bad, sim)
    far = EpisodeScript("f", "three_room", "Find the oven.", "oven", "oven",
                        gt_trajectory=GroundTruthTrajectory(np.array([[1.55, 2.55], [2.55, 2.55]])))
    with pytest.raises(SceneError):
        validate_script(far, sim)


def test_generate_scene_is_seeded():
    assert scene_to_dict(generate_scene(7)) == scene_to_dict(generate_scene(7))
    assert scene_to_dict(generate_scene(7)) != scene_to_dict(generate_scene(8))


# ------------------------------------------------------------------ files


def test_scene_and_script_round_trip(tmp_path):
    scene = generate_scene(3)
    save_scene(scene, tmp_path / "s.yaml")
    back = load_scene(tmp_path / "s.yaml")
    assert scene_to_dict(back) == scene_to_dict(scene)
    for s in generate_scripts(scene)[:2]:
        save_script(s, tmp_path / "e.yaml")
        assert script_to_dict(load_script(tmp_path / "e.yaml")) == script_to_dict(s)


def test_bad_scene_files(tmp_path):
    with pytest.raises(SceneError):
        load_scene(tmp_path / "missing.yaml")
    (tmp_path / "v.yaml").write_text("format: scene\nversion: 9\n")
    with pytest.raises(SceneError):
        load_scene(tmp_path / "v.yaml")
    scene = wall_room([SceneObject("unicorn", (0.0, 0.0, 0.5), (0.5, 0.5, 1.0), "kitchen")])
    save_scene(scene, tmp_path / "u.yaml")
    with pytest.raises(SceneError):
        load_scene(tmp_path / "u.yaml")
    with pytest.raises(SceneError):
        Wall((0.0, 0.0), (1.0, 1.0))
