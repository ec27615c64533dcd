from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from memnav.gateway import HashEmbedder  # noqa: E402
from memnav.physical_space import Pose  # noqa: E402
from memnav.semantic_space import Box3D, Observation, RegionEntry, SemanticStore  # noqa: E402


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


_ACCEPTANCE: list[tuple[int, str, str, float]] = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        number, title = marker.args
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        _ACCEPTANCE.append((number, title, status, report.duration))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, status, duration in sorted(_ACCEPTANCE):
        terminalreporter.write_line(f"[{status}] criterion {number}: {title} ({duration:.2f} s)")


# ------------------------------------------------------------------ helpers


def unit(rng: np.random.Generator, dim: int) -> np.ndarray:
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def make_observation(rng, episode_id: str, t: int, dim: int, n_regions: int = 2, labels=None,
                     pose: Pose | None = None) -> Observation:
    regions = [
        RegionEntry(unit(rng, dim), Box3D((float(rng.uniform(0, 10)), float(rng.uniform(0, 10)), 0.5), (0.5, 0.5, 1.0)),
                    labels[i] if labels else f"r{i}")
        for i in range(n_regions)
    ]
    pose = pose or Pose.at(float(rng.uniform(0, 10)), float(rng.uniform(0, 10)), float(rng.uniform(-3, 3)))
    return Observation(f"{episode_id}/{t}", episode_id, t, pose, unit(rng, dim), regions, f"img://{episode_id}/{t}")


def random_store(rng, n_obs: int, dim: int, n_regions: int = 2, episode_id: str = "ep") -> SemanticStore:
    store = SemanticStore(dim)
    for t in range(n_obs):
        store.insert(make_observation(rng, episode_id, t, dim, n_regions))
    return store


@pytest.fixture
def embedder():
    return HashEmbedder(64, seed=0)
