"""Chat and embedding gateways.

Two kinds of chat client share one interface: :class:`OpenAIChatClient`
talks to an OpenAI-compatible ``/chat/completions`` endpoint, and
:class:`ScriptedChat` answers from an ordered list of rules so tests and
the simulator run without a network. :func:`complete` sits on top of both
and owns schema parsing and corrective retries.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import mimetypes
import os
import re
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Protocol, Sequence

import httpx
import numpy as np
import yaml

from memnav.errors import ConfigurationError, GatewayError, SchemaError

logger = logging.getLogger(__name__)

CORRECTIVE_SUFFIX = (
    "Your previous reply could not be parsed ({error}). "
    "Reply again using exactly the requested format and nothing else."
)

ENV_API_BASE = "HIMM_API_BASE"
ENV_API_KEY = "HIMM_API_KEY"
ENV_CHAT_MODEL = "HIMM_CHAT_MODEL"
ENV_EMBED_MODEL = "HIMM_EMBED_MODEL"


@dataclass
class ChatTurn:
    role: str
    text: str
    images: list[str] = field(default_factory=list)


@dataclass
class ChatRequest:
    """One schema-constrained question to a chat model.

    ``tags`` carries the task name plus structured context. Wire clients
    ignore it; scripted clients may match on it.
    """

    system: str
    turns: list[ChatTurn]
    schema: str = "free-text"
    max_retries: int = 2
    options: int | None = None
    tags: dict[str, Any] = field(default_factory=dict)
    validate: Callable[[Any], None] | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if not self.turns:
            raise ConfigurationError("chat request needs at least one turn")
        if self.schema not in SCHEMAS:
            raise ConfigurationError(f"unknown reply schema {self.schema!r}")

    @property
    def task(self) -> str:
        return str(self.tags.get("task", ""))

    def text(self) -> str:
        parts = [self.system] + [t.text for t in self.turns]
        return "\n".join(p for p in parts if p)

    def images(self) -> list[str]:
        return [ref for t in self.turns for ref in t.images]


class ChatClient(Protocol):
    def send(self, request: ChatRequest) -> str: ...


class Embedder(Protocol):
    dim: int

    def embed_raw(self, text: str) -> np.ndarray: ...


# ---------------------------------------------------------------- parsing

SCHEMAS: dict[str, Callable[[str, ChatRequest], Any]] = {}


def register_schema(name: str):
    def deco(fn):
        SCHEMAS[name] = fn
        return fn

    return deco


_FENCE = re.compile(r"^```[a-zA-Z]*\s*|\s*```$")


def extract_json(raw: str) -> Any:
    """Pull the first JSON object or array out of a model reply."""
    text = _FENCE.sub("", raw.strip())
    for opener, closer in (("{", "}"), ("[", "]")):
        start = text.find(opener)
        end = text.rfind(closer)
        if start != -1 and end > start:
            try:
                return json.loads(text[start : end + 1])
            except json.JSONDecodeError:
                continue
    raise ValueError("no JSON value found")


@register_schema("yes-no")
def _parse_yes_no(raw: str, req: ChatRequest) -> bool:
    text = raw.strip()
    if text.startswith("{"):
        value = extract_json(text).get("answer")
        text = str(value)
    word = re.match(r"\W*([a-zA-Z]+)", text)
    if word:
        token = word.group(1).lower()
        if token in ("yes", "true", "y"):
            return True
        if token in ("no", "false", "n"):
            return False
    raise ValueError("expected yes or no")


@register_schema("index-choice")
def _parse_index(raw: str, req: ChatRequest) -> int:
    text = raw.strip()
    if text.startswith("{"):
        value = int(extract_json(text)["index"])
    else:
        m = re.search(r"-?\d+", text)
        if not m:
            raise ValueError("expected an integer index")
        value = int(m.group())
    if req.options is not None and not 0 <= value < req.options:
        raise ValueError(f"index {value} outside [0, {req.options})")
    return value


def _str_list(value: Any, name: str) -> list[str]:
    if value is None:
        return []
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise ValueError(f"{name} must be a list of strings")
    return [v.strip() for v in value if v.strip()]


@register_schema("goal-decomposition")
def _parse_goal(raw: str, req: ChatRequest) -> dict:
    data = extract_json(raw)
    target = data.get("target")
    if not isinstance(target, str) or not target.strip():
        raise ValueError("target must be a non-empty string")
    return {
        "target": target.strip(),
        "rel_objects": _str_list(data.get("rel_objects"), "rel_objects"),
        "rel_areas": _str_list(data.get("rel_areas"), "rel_areas"),
    }


def _named(items: Any, what: str) -> list[dict]:
    if not isinstance(items, list):
        raise ValueError(f"{what} must be a list")
    out = []
    for item in items:
        if isinstance(item, str):
            item = {"name": item, "description": ""}
        name = item.get("name") if isinstance(item, dict) else None
        if not isinstance(name, str) or not re.fullmatch(r"[A-Za-z_][A-Za-z0-9_]*", name):
            raise ValueError(f"{what} entry has an invalid name: {item!r}")
        out.append({"name": name, "description": str(item.get("description", ""))})
    return out


@register_schema("workflow")
def _parse_workflow(raw: str, req: ChatRequest) -> dict:
    data = extract_json(raw)
    body = data.get("body")
    if isinstance(body, str):
        body = body.splitlines()
    if not isinstance(body, list) or not [b for b in body if str(b).strip()]:
        raise ValueError("workflow body must be non-empty")
    return {
        "variables": _named(data.get("variables", []), "variables"),
        "functions": _named(data.get("functions", []), "functions"),
        "body": [str(b).rstrip() for b in body if str(b).strip()],
    }


@register_schema("rules")
def _parse_rules(raw: str, req: ChatRequest) -> list[dict]:
    data = extract_json(raw)
    items = data.get("rules") if isinstance(data, dict) else data
    if not isinstance(items, list):
        raise ValueError("rules must be a list")
    out = []
    for item in items:
        if not isinstance(item, dict):
            raise ValueError("each rule must be an object")
        out.append({k: str(item.get(k, "")).strip() for k in ("form", "key", "value", "anchor")})
    return out


@register_schema("free-text")
def _parse_free_text(raw: str, req: ChatRequest) -> str:
    text = raw.strip()
    if not text:
        raise ValueError("empty reply")
    return text


def complete(client: ChatClient, req: ChatRequest) -> Any:
    """Send ``req`` and parse the reply, retrying with a corrective turn on parse failure.

    Transport failures surface as :class:`GatewayError` immediately; a reply
    that still fails after ``max_retries`` retries raises :class:`SchemaError`
    carrying the last raw text.
    """
    parser = SCHEMAS[req.schema]
    attempt_req = req
    raw = ""
    error: Exception | None = None
    for attempt in range(req.max_retries + 1):
        try:
            raw = client.send(attempt_req)
        except GatewayError:
            raise
        except Exception as exc:  # transport libraries raise assorted types
            raise GatewayError(f"chat transport failed: {exc}", retryable=True) from exc
        try:
            value = parser(raw, req)
            if req.validate is not None:
                req.validate(value)
            return value
        except (ValueError, KeyError, TypeError, AttributeError) as exc:
            error = exc
            logger.debug("schema %s parse failure on attempt %d: %s", req.schema, attempt, exc)
            turns = list(attempt_req.turns) + [
                ChatTurn("assistant", raw),
                ChatTurn("user", CORRECTIVE_SUFFIX.format(error=exc)),
            ]
            attempt_req = ChatRequest(
                req.system, turns, req.schema, req.max_retries, req.options,
                {**req.tags, "attempt": attempt + 1}, req.validate,
            )
    raise SchemaError(f"reply failed schema {req.schema!r}: {error}", raw=raw)


# ------------------------------------------------------------- embeddings


def normalize(vec: np.ndarray) -> np.ndarray:
    vec = np.asarray(vec, dtype=np.float64)
    norm = float(np.linalg.norm(vec))
    if not np.isfinite(norm) or norm == 0.0:
        raise GatewayError("embedding has zero or non-finite norm")
    return vec / norm


def embed(client: Embedder, text: str, expected_dim: int | None = None) -> np.ndarray:
    """Unit-norm embedding of ``text``."""
    if not text or not text.strip():
        raise ValueError("cannot embed empty text")
    if expected_dim is not None and client.dim != expected_dim:
        raise ConfigurationError(f"embedder dimension {client.dim} != configured {expected_dim}")
    vec = normalize(client.embed_raw(text))
    if vec.shape != (client.dim,):
        raise ConfigurationError(f"embedding has shape {vec.shape}, expected ({client.dim},)")
    return vec


TOKEN = re.compile(r"[a-z0-9]+")


class HashEmbedder:
    """Deterministic bag-of-words embedder.

    Every token maps to a seeded Gaussian direction; a text embeds as the
    normalised sum of its token directions, so texts sharing words are
    similar and a single word embeds to exactly its token direction.
    """

    def __init__(self, dim: int = 384, seed: int = 0):
        if dim < 1:
            raise ConfigurationError("embedding dimension must be positive")
        self.dim = dim
        self.seed = seed
        self._cache: dict[str, np.ndarray] = {}
        self._lock = threading.Lock()

    def token_vector(self, token: str) -> np.ndarray:
        with self._lock:
            vec = self._cache.get(token)
            if vec is None:
                digest = hashlib.sha256(f"{self.seed}:{token}".encode()).digest()
                rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
                vec = rng.standard_normal(self.dim)
                vec /= np.linalg.norm(vec)
                self._cache[token] = vec
            return vec

    def embed_raw(self, text: str) -> np.ndarray:
        tokens = TOKEN.findall(text.lower()) or [text]
        return np.sum([self.token_vector(t) for t in tokens], axis=0)


# ------------------------------------------------------------ scripted mock

Reply = str | Sequence[str] | Callable[[ChatRequest], str]


@dataclass
class ScriptRule:
    """Match a request and answer it.

    All given criteria must hold: ``pattern`` is a regex searched in the
    request text, ``schema`` and ``task`` compare against the request.
    A list reply is served in order, repeating its last element.
    """

    reply: Reply
    pattern: str | None = None
    schema: str | None = None
    task: str | None = None
    _served: int = field(default=0, repr=False)

    def matches(self, req: ChatRequest) -> bool:
        if self.schema is not None and req.schema != self.schema:
            return False
        if self.task is not None and req.task != self.task:
            return False
        if self.pattern is not None and not re.search(self.pattern, req.text(), re.IGNORECASE | re.DOTALL):
            return False
        return True

    def answer(self, req: ChatRequest) -> str:
        if callable(self.reply):
            return self.reply(req)
        if isinstance(self.reply, str):
            return self.reply
        idx = min(self._served, len(self.reply) - 1)
        self._served += 1
        return self.reply[idx]


class ScriptedChat:
    """Chat client replaying scripted answers; first matching rule wins."""

    def __init__(self, rules: Sequence[ScriptRule] = (), default: Reply = ""):
        self.rules = list(rules)
        self.default = ScriptRule(default)
        self.history: list[tuple[ChatRequest, str]] = []
        self._lock = threading.Lock()

    def add(self, reply: Reply, pattern: str | None = None, schema: str | None = None, task: str | None = None):
        self.rules.append(ScriptRule(reply, pattern, schema, task))
        return self

    def send(self, request: ChatRequest) -> str:
        with self._lock:
            for rule in self.rules:
                if rule.matches(request):
                    reply = rule.answer(request)
                    break
            else:
                reply = self.default.answer(request)
            self.history.append((request, reply))
            return reply

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedChat":
        """Load a script file.

        Format (YAML)::

            version: 1
            default: "..."
            rules:
              - {task: verify_target, schema: yes-no, match: "refrigerator", reply: "yes"}
              - {schema: index-choice, replies: ["2", "0"]}
        """
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        if data.get("version", 1) != 1:
            raise ConfigurationError(f"unsupported script version {data.get('version')}")
        rules = []
        for entry in data.get("rules", []):
            reply = entry.get("replies", entry.get("reply"))
            if reply is None:
                raise ConfigurationError(f"script rule without reply: {entry!r}")
            rules.append(ScriptRule(reply, entry.get("match"), entry.get("schema"), entry.get("task")))
        return cls(rules, data.get("default", ""))


class FailingChat:
    """Chat client whose every call fails at the transport layer."""

    def __init__(self, message: str = "gateway unavailable"):
        self.message = message

    def send(self, request: ChatRequest) -> str:
        raise GatewayError(self.message, retryable=True)


# --------------------------------------------------------------- wire client


def _image_part(ref: str) -> dict:
    if ref.startswith(("http://", "https://", "data:")):
        url = ref
    else:
        path = Path(ref)
        if not path.is_file():
            return {"type": "text", "text": f"[image: {ref}]"}
        mime = mimetypes.guess_type(path.name)[0] or "image/png"
        url = f"data:{mime};base64,{base64.b64encode(path.read_bytes()).decode()}"
    return {"type": "image_url", "image_url": {"url": url}}


def to_openai_messages(req: ChatRequest) -> list[dict]:
    messages: list[dict] = []
    if req.system:
        messages.append({"role": "system", "content": req.system})
    for turn in req.turns:
        if turn.images:
            content = [{"type": "text", "text": turn.text}] + [_image_part(r) for r in turn.images]
        else:
            content = turn.text
        messages.append({"role": turn.role, "content": content})
    return messages


@dataclass
class EndpointConfig:
    api_base: str = "https://api.openai.com/v1"
    api_key: str = ""
    chat_model: str = "gpt-4o"
    embed_model: str = "text-embedding-3-small"
    embed_dim: int = 1536
    timeout: float = 60.0

    @classmethod
    def from_env(cls, base: dict | None = None) -> "EndpointConfig":
        cfg = cls(**(base or {}))
        cfg.api_base = os.environ.get(ENV_API_BASE, cfg.api_base)
        cfg.api_key = os.environ.get(ENV_API_KEY, cfg.api_key)
        cfg.chat_model = os.environ.get(ENV_CHAT_MODEL, cfg.chat_model)
        cfg.embed_model = os.environ.get(ENV_EMBED_MODEL, cfg.embed_model)
        return cfg


def _post(http: httpx.Client, url: str, payload: dict) -> dict:
    try:
        resp = http.post(url, json=payload)
    except httpx.TransportError as exc:
        raise GatewayError(f"request to {url} failed: {exc}", retryable=True) from exc
    if resp.status_code >= 400:
        retryable = resp.status_code == 429 or resp.status_code >= 500
        raise GatewayError(f"{url} returned HTTP {resp.status_code}: {resp.text[:200]}", retryable=retryable)
    try:
        return resp.json()
    except ValueError as exc:
        raise GatewayError(f"{url} returned invalid JSON") from exc


class OpenAIChatClient:
    def __init__(self, config: EndpointConfig, http: httpx.Client | None = None):
        self.config = config
        headers = {"Authorization": f"Bearer {config.api_key}"} if config.api_key else {}
        self.http = http or httpx.Client(timeout=config.timeout, headers=headers)

    def send(self, request: ChatRequest) -> str:
        payload = {
            "model": self.config.chat_model,
            "messages": to_openai_messages(request),
            "temperature": 0,
        }
        data = _post(self.http, self.config.api_base.rstrip("/") + "/chat/completions", payload)
        try:
            return data["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError) as exc:
            raise GatewayError("chat reply missing choices[0].message.content") from exc


class OpenAIEmbedder:
    def __init__(self, config: EndpointConfig, http: httpx.Client | None = None):
        self.config = config
        self.dim = config.embed_dim
        headers = {"Authorization": f"Bearer {config.api_key}"} if config.api_key else {}
        self.http = http or httpx.Client(timeout=config.timeout, headers=headers)

    def embed_raw(self, text: str) -> np.ndarray:
        payload = {"model": self.config.embed_model, "input": text}
        data = _post(self.http, self.config.api_base.rstrip("/") + "/embeddings", payload)
        try:
            vec = np.asarray(data["data"][0]["embedding"], dtype=np.float64)
        except (KeyError, IndexError, TypeError) as exc:
            raise GatewayError("embedding reply missing data[0].embedding") from exc
        if vec.shape != (self.dim,):
            raise ConfigurationError(f"provider returned dimension {vec.shape[0]}, configured {self.dim}")
        return vec
