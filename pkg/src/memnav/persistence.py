"""Memory snapshots on disk.

Layout of a memory directory::

    index.json               format/version, D, one record per episode + checksums
    episodes/NNNNN-<id>.json semantic space + occupancy map of one episode
    rules.mem                rule store (optional)

Every file is canonical (sorted keys, fixed separators), so saving a loaded
snapshot reproduces it byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
from dataclasses import dataclass, field
from pathlib import Path

from memnav.episodic_memory import EpisodeRecord, EpisodicStore
from memnav.errors import IntegrityError, MigrationError, SnapshotError
from memnav.physical_space import map_from_dict, map_to_dict
from memnav.semantic_memory import RuleStore, rules_from_bytes, rules_to_bytes
from memnav.semantic_space import store_from_dict, store_to_dict

INDEX_VERSION = 1
EPISODE_VERSION = 1
INDEX_FILE = "index.json"
RULES_FILE = "rules.mem"


@dataclass
class MemoryStores:
    episodic: EpisodicStore
    rules: RuleStore | None = None


@dataclass
class Manifest:
    path: Path
    files: dict[str, str] = field(default_factory=dict)  # relative path -> sha256


def canonical_json(obj) -> bytes:
    return (json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True, allow_nan=False) + "\n").encode()


def _sha(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def episode_to_dict(record: EpisodeRecord) -> dict:
    return {
        "format": "episode",
        "version": EPISODE_VERSION,
        "episode_id": record.episode_id,
        "created_at": record.created_at,
        "scene_tag": record.scene_tag,
        "semantic_space": store_to_dict(record.semantic_space),
        "physical_space": map_to_dict(record.physical_space),
    }


def episode_from_dict(data: dict) -> EpisodeRecord:
    if data.get("format") != "episode":
        raise SnapshotError("not an episode snapshot")
    if data.get("version") != EPISODE_VERSION:
        raise MigrationError(f"episode snapshot version {data.get('version')} unsupported")
    return EpisodeRecord(
        data["episode_id"],
        store_from_dict(data["semantic_space"]),
        map_from_dict(data["physical_space"]).grid,
        int(data["created_at"]),
        data.get("scene_tag"),
    )


def _file_name(i: int, episode_id: str) -> str:
    return f"episodes/{i:05d}-{re.sub(r'[^A-Za-z0-9_.-]', '_', episode_id)[:60]}.json"


def snapshot_memory(stores: MemoryStores, out_dir: str | Path) -> Manifest:
    """Write every store under ``out_dir``; the index is written last."""
    out = Path(out_dir)
    manifest = Manifest(out)
    entries = []
    for i, record in enumerate(stores.episodic):
        rel = _file_name(i, record.episode_id)
        data = canonical_json(episode_to_dict(record))
        _write(out / rel, data)
        manifest.files[rel] = _sha(data)
        entries.append({"id": record.episode_id, "file": rel, "sha256": manifest.files[rel],
                        "created_at": record.created_at})
    rules_entry = None
    if stores.rules is not None:
        data = rules_to_bytes(stores.rules)
        _write(out / RULES_FILE, data)
        manifest.files[RULES_FILE] = _sha(data)
        rules_entry = {"file": RULES_FILE, "sha256": manifest.files[RULES_FILE], "count": len(stores.rules)}
    index = {
        "format": "memory-index",
        "version": INDEX_VERSION,
        "D": stores.episodic.dim,
        "episodes": entries,
        "rules": rules_entry,
    }
    data = canonical_json(index)
    _write(out / INDEX_FILE, data)
    manifest.files[INDEX_FILE] = _sha(data)
    return manifest


def _read_checked(root: Path, rel: str, digest: str) -> bytes:
    path = root / rel
    if not path.is_file():
        raise IntegrityError(f"snapshot file {rel} is missing")
    data = path.read_bytes()
    if _sha(data) != digest:
        raise IntegrityError(f"checksum mismatch for {rel}")
    return data


def load_memory(in_dir: str | Path) -> MemoryStores:
    root = Path(in_dir)
    index_path = root / INDEX_FILE
    if not index_path.is_file():
        raise SnapshotError(f"no {INDEX_FILE} in {root}")
    try:
        index = json.loads(index_path.read_bytes())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise IntegrityError(f"unreadable memory index: {exc}") from exc
    if index.get("format") != "memory-index":
        raise SnapshotError(f"{index_path} is not a memory index")
    if index.get("version") != INDEX_VERSION:
        raise MigrationError(f"memory index version {index.get('version')} unsupported (expected {INDEX_VERSION})")
    try:
        store = EpisodicStore(int(index["D"]))
        for entry in index["episodes"]:
            data = _read_checked(root, entry["file"], entry["sha256"])
            record = episode_from_dict(json.loads(data))
            if record.episode_id != entry["id"]:
                raise IntegrityError(f"{entry['file']} holds episode {record.episode_id!r}, index says {entry['id']!r}")
            store.append(record)
        rules = None
        if index.get("rules"):
            rules = rules_from_bytes(_read_checked(root, index["rules"]["file"], index["rules"]["sha256"]))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, json.JSONDecodeError):
            raise IntegrityError(f"corrupt snapshot: {exc}") from exc
        raise SnapshotError(f"malformed snapshot: {exc}") from exc
    return MemoryStores(store, rules)
