"""Run configuration: YAML file, then HIMM_* environment overrides, then flags.

A config file has up to four sections; any field may be omitted::

    agent:   {step_budget: 50, d_min: 1.5, recall_enabled: true, ...}
    sensor:  {fov: 6.283, n_rays: 360, max_range: 3.5}
    gateway: {mode: mock, api_base: ..., chat_model: ..., embed_dim: 384, ...}
    run:     {seed: 0, judge: normalized, jobs: 1}

Every field can be overridden by an environment variable named
``HIMM_<FIELD>`` in upper case, e.g. ``HIMM_STEP_BUDGET=30`` or
``HIMM_API_BASE=http://localhost:8000/v1``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

import yaml

from memnav.controller import AgentConfig
from memnav.errors import ConfigurationError
from memnav.gateway import (
    ChatClient,
    Embedder,
    EndpointConfig,
    HashEmbedder,
    OpenAIChatClient,
    OpenAIEmbedder,
    ScriptedChat,
)
from memnav.mock_adjudicator import SimAdjudicator
from memnav.simulator import SensorConfig, Simulator, SyntheticEmbedder

ENV_PREFIX = "HIMM_"


@dataclass
class GatewayConfig:
    mode: str = "mock"  # mock | script | openai
    script_path: str = ""
    api_base: str = "https://api.openai.com/v1"
    api_key: str = ""
    chat_model: str = "gpt-4o"
    embed_model: str = "text-embedding-3-small"
    embed_dim: int = 384
    embed_seed: int = 0
    timeout: float = 60.0

    def __post_init__(self):
        if self.mode not in ("mock", "script", "openai"):
            raise ConfigurationError(f"unknown gateway mode {self.mode!r}")
        if self.mode == "script" and not self.script_path:
            raise ConfigurationError("gateway mode 'script' needs script_path")


@dataclass
class RunSettings:
    seed: int = 0
    judge: str = "normalized"  # normalized | model
    jobs: int = 1

    def __post_init__(self):
        if self.judge not in ("normalized", "model"):
            raise ConfigurationError(f"unknown judge {self.judge!r}")
        if self.jobs < 1:
            raise ConfigurationError("jobs must be >= 1")


@dataclass
class RunConfig:
    agent: AgentConfig = field(default_factory=AgentConfig)
    sensor: SensorConfig = field(default_factory=SensorConfig)
    gateway: GatewayConfig = field(default_factory=GatewayConfig)
    run: RunSettings = field(default_factory=RunSettings)

    SECTIONS = ("agent", "sensor", "gateway", "run")

    def to_dict(self, redact: bool = True) -> dict:
        out = {name: dataclasses.asdict(getattr(self, name)) for name in self.SECTIONS}
        if redact and out["gateway"]["api_key"]:
            out["gateway"]["api_key"] = "***"
        return out

    def fingerprint(self) -> str:
        """Stable hash of every setting except credentials."""
        data = self.to_dict(redact=True)
        data["gateway"]["api_key"] = ""
        blob = json.dumps(data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def with_overrides(self, overrides: Mapping[str, Any]) -> "RunConfig":
        """Copy with ``{field: value}`` applied; unknown fields are an error."""
        sections = {name: dataclasses.asdict(getattr(self, name)) for name in self.SECTIONS}
        for key, value in overrides.items():
            if value is None:
                continue
            section = _section_of(key)
            sections[section][key] = _coerce(section, key, value)
        return _build(sections)


_TYPES = {"agent": AgentConfig, "sensor": SensorConfig, "gateway": GatewayConfig, "run": RunSettings}


def _section_of(key: str) -> str:
    for name, cls in _TYPES.items():
        if key in {f.name for f in fields(cls)}:
            return name
    raise ConfigurationError(f"unknown configuration field {key!r}")


def _coerce(section: str, key: str, value: Any) -> Any:
    ftype = {f.name: f.type for f in fields(_TYPES[section])}[key]
    ftype = ftype if isinstance(ftype, str) else getattr(ftype, "__name__", str(ftype))
    try:
        if ftype == "bool":
            if isinstance(value, bool):
                return value
            text = str(value).strip().lower()
            if text in ("1", "true", "yes", "on"):
                return True
            if text in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {value!r}")
        if ftype == "int":
            return int(value)
        if ftype == "float":
            return float(value)
        return str(value)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"bad value for {key}: {exc}") from exc


def _build(sections: dict[str, dict]) -> RunConfig:
    try:
        return RunConfig(**{name: _TYPES[name](**sections.get(name, {})) for name in RunConfig.SECTIONS})
    except TypeError as exc:
        raise ConfigurationError(f"invalid configuration: {exc}") from exc
    except ValueError as exc:
        raise ConfigurationError(str(exc)) from exc


def load_config(
    path: str | Path | None = None,
    env: Mapping[str, str] | None = None,
    overrides: Mapping[str, Any] | None = None,
) -> RunConfig:
    """Resolve a config with precedence flags > environment > file > defaults."""
    sections: dict[str, dict] = {name: {} for name in RunConfig.SECTIONS}
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigurationError(f"config file {p} not found")
        try:
            data = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"config file {p} is not valid YAML: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigurationError(f"config file {p} must hold a mapping")
        for name, values in data.items():
            if name not in sections:
                raise ConfigurationError(f"unknown config section {name!r}")
            for key, value in (values or {}).items():
                if _section_of(key) != name:
                    raise ConfigurationError(f"field {key!r} does not belong in section {name!r}")
                sections[name][key] = _coerce(name, key, value)
    cfg = _build(sections)
    env = os.environ if env is None else env
    from_env = {}
    for name, cls in _TYPES.items():
        for f in fields(cls):
            var = ENV_PREFIX + f.name.upper()
            if var in env:
                from_env[f.name] = env[var]
    cfg = cfg.with_overrides(from_env)
    return cfg.with_overrides(overrides or {})


# ------------------------------------------------------------------ factories


def make_embedder(cfg: RunConfig) -> Embedder:
    g = cfg.gateway
    if g.mode == "openai":
        return OpenAIEmbedder(_endpoint(g))
    return HashEmbedder(g.embed_dim, g.embed_seed)


def _endpoint(g: GatewayConfig) -> EndpointConfig:
    return EndpointConfig(g.api_base, g.api_key, g.chat_model, g.embed_model, g.embed_dim, g.timeout)


def make_simulator(scene, cfg: RunConfig, text: Embedder | None = None) -> Simulator:
    text = text or make_embedder(cfg)
    return Simulator(scene, cfg.sensor, SyntheticEmbedder(text.dim, cfg.gateway.embed_seed, text=text))


def make_chat(cfg: RunConfig, sims=()) -> ChatClient:
    g = cfg.gateway
    if g.mode == "openai":
        return OpenAIChatClient(_endpoint(g))
    if g.mode == "script":
        return ScriptedChat.from_file(g.script_path)
    return SimAdjudicator(list(sims)).client()


def agent_config(cfg: RunConfig, embed_dim: int) -> AgentConfig:
    return dataclasses.replace(cfg.agent, dim=embed_dim, rng_seed=cfg.run.seed)
