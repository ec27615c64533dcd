import json

import numpy as np
import pytest

from conftest import make_observation, random_store, unit
from memnav.errors import (
    ConfigurationError,
    DecompositionError,
    DuplicateObservationError,
    InvalidQueryError,
    MissingObservationError,
)
from memnav.gateway import ScriptedChat, embed
from memnav.physical_space import Pose
from memnav.semantic_space import (
    GoalSpec,
    RankedMatch,
    SemanticStore,
    Tier,
    decompose_goal,
    insert_observation,
    poses_of,
    query_goal,
    query_regions,
    store_from_dict,
    store_to_dict,
)
from oracles import topk_oracle

D = 32


def test_insert_then_fetch():
    rng = np.random.default_rng(0)
    store = SemanticStore(D)
    obs = make_observation(rng, "ep", 0, D)
    insert_observation(store, obs)
    assert store.get(obs.id) is obs


def test_duplicate_leaves_store_unchanged():
    rng = np.random.default_rng(0)
    store = SemanticStore(D)
    obs = make_observation(rng, "ep", 0, D)
    store.insert(obs)
    with pytest.raises(DuplicateObservationError):
        store.insert(make_observation(rng, "ep", 0, D))
    assert len(store) == 1 and store.region_count == 2


def test_missing_observation():
    with pytest.raises(MissingObservationError):
        SemanticStore(D).get("nope")


def test_dimension_mismatch_rejected():
    rng = np.random.default_rng(0)
    with pytest.raises(ConfigurationError):
        SemanticStore(D).insert(make_observation(rng, "ep", 0, D + 1))


def test_ten_thousand_inserts():
    rng = np.random.default_rng(1)
    store = random_store(rng, 10_000, 8, n_regions=1)
    assert len(store) == 10_000
    assert all(f"ep/{t}" in store for t in range(10_000))


def test_query_self_similarity():
    rng = np.random.default_rng(2)
    store = random_store(rng, 50, D)
    target = store.observations[17].regions[1]
    obs_id, ridx, sim = query_regions(store, target.embedding, 3)[0]
    assert (obs_id, ridx) == ("ep/17", 1)
    assert sim == pytest.approx(1.0, abs=1e-6)


def test_query_empty_store():
    assert query_regions(SemanticStore(D), unit(np.random.default_rng(0), D), 5) == []


def test_query_rejects_bad_vectors():
    store = SemanticStore(D)
    with pytest.raises(InvalidQueryError):
        query_regions(store, np.ones(D), 3)
    with pytest.raises(InvalidQueryError):
        query_regions(store, np.ones(D + 1) / np.sqrt(D + 1), 3)
    with pytest.raises(ValueError):
        query_regions(store, unit(np.random.default_rng(0), D), 0)


def test_query_matches_exhaustive_scan():
    rng = np.random.default_rng(3)
    store = random_store(rng, 500, D, n_regions=3)
    rows = [(o.id, i, r.embedding) for o in store for i, r in enumerate(o.regions)]
    for _ in range(10):
        q = unit(rng, D)
        got = query_regions(store, q, 16)
        want = topk_oracle([r[2] for r in rows], q, 16)
        assert [(g[0], g[1]) for g in got] == [(rows[i][0], rows[i][1]) for i, _ in want]
        assert np.allclose([g[2] for g in got], [s for _, s in want], atol=1e-6)


# ------------------------------------------------------------ goal queries


def _goal(target, rel_obj=(), rel_area=()):
    return GoalSpec("find it", ("t", target), [("o", v) for v in rel_obj], [("a", v) for v in rel_area])


def test_only_target_matches():
    rng = np.random.default_rng(4)
    store = random_store(rng, 10, D)
    out = query_goal(store, _goal(unit(rng, D)), 5)
    assert len(out) == 5 and {m.priority_tier for m in out} == {Tier.TARGET}


def test_target_tier_ranks_first_despite_similarity():
    rng = np.random.default_rng(5)
    store = random_store(rng, 10, D)
    area_vec = store.observations[3].regions[0].embedding
    target_vec = unit(rng, D)
    out = query_goal(store, _goal(target_vec, rel_area=[area_vec]), 1)
    assert out[0].priority_tier == Tier.TARGET
    assert out[1].priority_tier == Tier.RELATIVE_AREA
    assert out[1].similarity > 0.99 > out[0].similarity


def test_query_goal_matches_tiered_oracle():
    rng = np.random.default_rng(6)
    store = random_store(rng, 80, D)
    rows = [(o.id, i, r.embedding) for o in store for i, r in enumerate(o.regions)]
    goal = _goal(unit(rng, D), [unit(rng, D), unit(rng, D)], [unit(rng, D)])
    got = query_goal(store, goal, 7)
    want = []
    for tier, queries in goal.tier_queries():
        scored = [(max(float(np.dot(e, q)) for q in queries), k) for k, (_, _, e) in enumerate(rows)]
        scored.sort(key=lambda s: (-s[0], s[1]))
        want += [(rows[k][0], rows[k][1], tier) for _, k in scored[:7]]
    assert [(m.observation_id, m.region_index, m.priority_tier) for m in got] == want


def test_poses_of_dedups():
    rng = np.random.default_rng(7)
    store = random_store(rng, 5, D)
    assert poses_of(store, []) == []
    ms = [RankedMatch("ep/2", 0, 0.9, Tier.TARGET), RankedMatch("ep/2", 1, 0.8, Tier.TARGET),
          RankedMatch("ep/4", 0, 0.7, Tier.RELATIVE_AREA)]
    assert poses_of(store, ms) == [store.get("ep/2").pose, store.get("ep/4").pose]


# ---------------------------------------------------------- decomposition


def test_decompose_goal_from_scripted_reply(embedder):
    chat = ScriptedChat(default=json.dumps(
        {"target": "refrigerator", "rel_objects": ["counter"], "rel_areas": ["kitchen"]}))
    goal = decompose_goal("Find the fridge near the counter in the kitchen", chat, embedder)
    assert goal.target_text == "refrigerator"
    assert [t for t, _ in goal.relative_objects] == ["counter"]
    assert [t for t, _ in goal.relative_areas] == ["kitchen"]
    assert np.allclose(goal.target_object[1], embed(embedder, "refrigerator"), atol=1e-6)


def test_decompose_goal_empty_lists(embedder):
    chat = ScriptedChat(default='{"target": "sofa", "rel_objects": [], "rel_areas": []}')
    goal = decompose_goal("Find the sofa", chat, embedder)
    assert goal.relative_objects == [] and goal.relative_areas == []


def test_decompose_goal_malformed(embedder):
    chat = ScriptedChat(default="I am not sure what you mean")
    with pytest.raises(DecompositionError):
        decompose_goal("Find the sofa", chat, embedder, max_retries=2)
    assert len(chat.history) == 3


def test_decompose_forwards_image_refs(embedder):
    chat = ScriptedChat(default='{"target": "lamp"}')
    decompose_goal("Find the object in goal.png please", chat, embedder)
    assert chat.history[0][0].images() == ["goal.png"]


# ------------------------------------------------------------ snapshot


def test_store_round_trip_is_exact():
    rng = np.random.default_rng(8)
    store = random_store(rng, 20, D)
    back = store_from_dict(json.loads(json.dumps(store_to_dict(store))))
    assert [o.id for o in back] == [o.id for o in store]
    np.testing.assert_array_equal(back.region_matrix(), store.region_matrix())
    np.testing.assert_array_equal(back.global_matrix(), store.global_matrix())
    assert back.get("ep/3").pose == store.get("ep/3").pose
    q = unit(rng, D)
    assert query_regions(back, q, 10) == query_regions(store, q, 10)


def test_pose_round_trip_in_observation():
    rng = np.random.default_rng(9)
    obs = make_observation(rng, "e", 0, D, pose=Pose.at(1.25, -3.5, 0.3))
    store = SemanticStore(D).insert(obs)
    assert store_from_dict(store_to_dict(store)).get("e/0").pose == Pose.at(1.25, -3.5, 0.3)
