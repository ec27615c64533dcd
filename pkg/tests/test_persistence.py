import json

import numpy as np
import pytest

from conftest import make_observation, random_store, unit
from memnav.episodic_memory import EpisodeRecord, EpisodicStore, retrieve_similar
from memnav.errors import IntegrityError, MigrationError, SnapshotError
from memnav.gateway import embed
from memnav.persistence import INDEX_FILE, MemoryStores, load_memory, snapshot_memory
from memnav.physical_space import Cell, OccupancyGrid
from memnav.semantic_memory import Rule, RuleForm, RuleStore, retrieve_rules
from memnav.semantic_space import query_regions

D = 24


def grid(rng):
    g = OccupancyGrid.empty(6, 5, resolution=0.1, origin=(-0.3, 0.2))
    g.cells[:] = rng.integers(0, 3, size=g.cells.shape)
    return g


def stores(rng, n_episodes=5, embedder=None):
    ep = EpisodicStore(D)
    for e in range(n_episodes):
        ep.append(EpisodeRecord(f"run/{e}", random_store(rng, 12, D, 2, f"run/{e}"), grid(rng), scene_tag="s"))
    rules = None
    if embedder is not None:
        rules = RuleStore(embedder.dim)
        for i, q in enumerate(["Where is the sofa?", "Find the oven.", "Is the lamp on?"]):
            rules.add(Rule(RuleForm.IF_THEN, f"k{i}", f"v{i}", "explore", f"run/{i}", embed(embedder, q), q))
    return MemoryStores(ep, rules)


def test_save_load_save_is_byte_identical(tmp_path, embedder):
    rng = np.random.default_rng(0)
    original = stores(rng, embedder=embedder)
    m1 = snapshot_memory(original, tmp_path / "a")
    loaded = load_memory(tmp_path / "a")
    m2 = snapshot_memory(loaded, tmp_path / "b")
    assert m1.files == m2.files
    for rel in m1.files:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_queries_identical_after_round_trip(tmp_path, embedder):
    rng = np.random.default_rng(1)
    original = stores(rng, embedder=embedder)
    snapshot_memory(original, tmp_path)
    loaded = load_memory(tmp_path)
    assert [r.episode_id for r in loaded.episodic] == [r.episode_id for r in original.episodic]
    for _ in range(5):
        current = make_observation(rng, "now", 0, D)
        assert retrieve_similar(loaded.episodic, current, 10) == retrieve_similar(original.episodic, current, 10)
        q = unit(rng, D)
        for a, b in zip(loaded.episodic, original.episodic):
            assert query_regions(a.semantic_space, q, 5) == query_regions(b.semantic_space, q, 5)
            np.testing.assert_array_equal(a.physical_space.cells, b.physical_space.cells)
            assert a.physical_space.origin == b.physical_space.origin
            assert a.created_at == b.created_at
    got = [(r.to_dict(), s) for r, s in retrieve_rules(loaded.rules, "Where is the oven?", embedder, 3)]
    want = [(r.to_dict(), s) for r, s in retrieve_rules(original.rules, "Where is the oven?", embedder, 3)]
    assert got == want


def test_truncated_episode_file(tmp_path):
    m = snapshot_memory(stores(np.random.default_rng(2)), tmp_path)
    rel = next(r for r in m.files if r.startswith("episodes/"))
    data = (tmp_path / rel).read_bytes()
    (tmp_path / rel).write_bytes(data[: len(data) // 2])
    with pytest.raises(IntegrityError):
        load_memory(tmp_path)


def test_missing_episode_file(tmp_path):
    m = snapshot_memory(stores(np.random.default_rng(3)), tmp_path)
    rel = next(r for r in m.files if r.startswith("episodes/"))
    (tmp_path / rel).unlink()
    with pytest.raises(IntegrityError):
        load_memory(tmp_path)


def test_truncated_index(tmp_path):
    snapshot_memory(stores(np.random.default_rng(4)), tmp_path)
    data = (tmp_path / INDEX_FILE).read_bytes()
    (tmp_path / INDEX_FILE).write_bytes(data[:20])
    with pytest.raises(IntegrityError):
        load_memory(tmp_path)


def test_unsupported_version(tmp_path):
    snapshot_memory(stores(np.random.default_rng(5)), tmp_path)
    index = json.loads((tmp_path / INDEX_FILE).read_text())
    index["version"] = 99
    (tmp_path / INDEX_FILE).write_text(json.dumps(index))
    with pytest.raises(MigrationError):
        load_memory(tmp_path)


def test_not_a_memory_dir(tmp_path):
    with pytest.raises(SnapshotError):
        load_memory(tmp_path)
    (tmp_path / INDEX_FILE).write_text('{"format": "other"}')
    with pytest.raises(SnapshotError):
        load_memory(tmp_path)


def test_empty_store_round_trip(tmp_path):
    snapshot_memory(MemoryStores(EpisodicStore(D)), tmp_path)
    back = load_memory(tmp_path)
    assert len(back.episodic) == 0 and back.episodic.dim == D and back.rules is None


def test_unknown_cells_survive(tmp_path):
    rng = np.random.default_rng(6)
    ep = EpisodicStore(D)
    g = OccupancyGrid.empty(3, 3)
    g.cells[1, 1] = Cell.OCCUPIED
    sem = random_store(rng, 2, D, episode_id="x")
    ep.append(EpisodeRecord("x", sem, g))
    snapshot_memory(MemoryStores(ep), tmp_path)
    back = load_memory(tmp_path).episodic.get("x").physical_space
    assert back.cells[1, 1] == Cell.OCCUPIED and back.cells[0, 0] == Cell.UNKNOWN
