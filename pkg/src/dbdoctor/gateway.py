"""Chat-completion and embedding gateway over model providers.

Two provider kinds:

* ``http-openai-compatible`` — talks the OpenAI chat-completions and
  embeddings wire shapes against any compatible endpoint.
* ``scripted`` — a deterministic offline backend driven by an ordered rule
  script; every agent trajectory in the test suite and the bench replays
  through it.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import re
import threading
import time
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import requests

from .errors import (
    ConfigError,
    GatewayError,
    MalformedResponseError,
    NoMatchingRuleError,
    TransportError,
)
from .textutil import tokenize


class Role(str, Enum):
    SYSTEM = "system"
    USER = "user"
    ASSISTANT = "assistant"
    TOOL = "tool"
    HUMAN_FEEDBACK = "human-feedback"


_SCALARS = (str, int, float, bool)


@dataclass(frozen=True)
class ToolInvocation:
    """A tool call: name plus a flat map of scalar arguments."""

    tool_name: str
    arguments: dict

    def __post_init__(self):
        if not self.tool_name:
            raise ValueError("tool_name must be non-empty")
        for key, value in self.arguments.items():
            if not isinstance(value, _SCALARS):
                raise ValueError(f"argument {key!r} is not a scalar")

    def render(self) -> str:
        return f"{self.tool_name}({json.dumps(self.arguments, sort_keys=True)})"


@dataclass
class ChatMessage:
    role: Role
    content: str
    seq: int
    tool_call: ToolInvocation | None = None

    def __post_init__(self):
        if self.tool_call is not None and self.role is not Role.ASSISTANT:
            raise ValueError("tool_call only allowed on assistant messages")


@dataclass
class CompletionRequest:
    messages: list[ChatMessage]
    available_tools: list = field(default_factory=list)
    temperature: float = 0.0
    max_tokens: int = 1024

    def __post_init__(self):
        if not self.messages:
            raise ValueError("messages must be non-empty")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_tokens <= 0:
            raise ValueError("max_tokens must be positive")
        seqs = [m.seq for m in self.messages]
        if any(b <= a for a, b in zip(seqs, seqs[1:])):
            raise ValueError("message seq must be strictly increasing")


@dataclass(frozen=True)
class EmbeddingVector:
    values: tuple
    dim: int

    def __post_init__(self):
        if self.dim <= 0 or len(self.values) != self.dim:
            raise ValueError("values length must equal dim")

    def norm(self) -> float:
        return math.sqrt(sum(v * v for v in self.values))


class ProviderKind(str, Enum):
    HTTP = "http-openai-compatible"
    SCRIPTED = "scripted"


@dataclass
class ProviderConfig:
    kind: ProviderKind
    endpoint: str | None = None
    api_key_env: str | None = None
    script_path: str | Path | None = None
    embed_dim: int = 64
    model: str = "gpt-4"
    max_retries: int = 2

    def __post_init__(self):
        self.kind = ProviderKind(self.kind)
        if self.embed_dim <= 0:
            raise ConfigError("embed_dim must be positive")
        if self.kind is ProviderKind.HTTP:
            if not self.endpoint or not self.api_key_env:
                raise ConfigError("http provider requires endpoint and api_key_env")
        else:
            if self.script_path is None:
                raise ConfigError("scripted provider requires script_path")


# --- scripted backend -------------------------------------------------------


@dataclass
class ScriptRule:
    match: str
    reply: str
    match_kind: str = "substring"
    max_uses: int | None = None

    def matches(self, content: str) -> bool:
        if self.match_kind == "regex":
            return re.search(self.match, content) is not None
        return self.match in content


def load_script(path: str | Path) -> list[ScriptRule]:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(raw, list):
        raise ConfigError(f"script {path} must be a JSON array of rules")
    rules = []
    for i, entry in enumerate(raw):
        try:
            rules.append(
                ScriptRule(
                    match=entry["match"],
                    reply=entry["reply"],
                    match_kind=entry.get("match_kind", "substring"),
                    max_uses=entry.get("max_uses"),
                )
            )
        except KeyError as exc:
            raise ConfigError(f"script rule {i} missing field {exc}") from exc
    return rules


def latest_user_or_tool_content(messages: list[ChatMessage]) -> str:
    for msg in reversed(messages):
        if msg.role in (Role.USER, Role.TOOL):
            return msg.content
    return messages[-1].content


class _ScriptedBackend:
    """Ordered first-match-wins rule engine with per-rule use counters."""

    def __init__(self, rules: list[ScriptRule]):
        self._rules = rules
        self._uses = [0] * len(rules)
        self._lock = threading.Lock()

    def reply_for(self, content: str) -> str:
        with self._lock:
            for i, rule in enumerate(self._rules):
                if rule.max_uses is not None and self._uses[i] >= rule.max_uses:
                    continue
                if rule.matches(content):
                    self._uses[i] += 1
                    return rule.reply
        snippet = content[-240:].replace("\n", " ")
        raise NoMatchingRuleError(
            f"no script rule matches prompt tail: ...{snippet!r}"
        )


# --- scripted embeddings ----------------------------------------------------

_EMBED_SEED = b"dbdoctor-embed-v1:"


def pseudo_embedding(text: str, dim: int) -> EmbeddingVector:
    """Deterministic pseudo-embedding: hash of the token multiset, unit norm.

    Each distinct token expands to a fixed pseudo-random direction via
    shake_256; directions are summed weighted by token count and the result is
    L2-normalized. Token order never matters, identical text always maps to
    the identical vector, and no model is involved.
    """
    counts = Counter(tokenize(text))
    if not counts:
        raise GatewayError("cannot embed text with no tokens")
    acc = [0.0] * dim
    for token, count in counts.items():
        raw = hashlib.shake_256(_EMBED_SEED + token.encode("utf-8")).digest(8 * dim)
        for i in range(dim):
            u = int.from_bytes(raw[8 * i : 8 * i + 8], "big") / 2.0**64
            acc[i] += count * (u - 0.5)
    norm = math.sqrt(sum(v * v for v in acc))
    if norm == 0.0:  # unreachable in practice; guards the division
        raise GatewayError("degenerate zero embedding")
    return EmbeddingVector(tuple(v / norm for v in acc), dim)


# --- the gateway ------------------------------------------------------------


class LlmGateway:
    """Uniform complete/embed facade; immutable config, counters synchronized."""

    def __init__(self, cfg: ProviderConfig):
        self.cfg = cfg
        self._lock = threading.Lock()
        self.completion_calls = 0
        self.embedding_calls = 0
        self.transport_attempts = 0
        self.request_log: list[str] = []
        self._scripted: _ScriptedBackend | None = None
        if cfg.kind is ProviderKind.SCRIPTED:
            self._scripted = _ScriptedBackend(load_script(cfg.script_path))

    # -- complete

    def complete(self, req: CompletionRequest) -> ChatMessage:
        content = latest_user_or_tool_content(req.messages)
        with self._lock:
            self.completion_calls += 1
            self.request_log.append(content)
        if self._scripted is not None:
            reply = self._scripted.reply_for(content)
            tool_call = None
        else:
            reply, tool_call = self._http_complete(req)
        return ChatMessage(
            role=Role.ASSISTANT,
            content=reply,
            seq=req.messages[-1].seq + 1,
            tool_call=tool_call,
        )

    def _http_complete(self, req: CompletionRequest):
        body = {
            "model": self.cfg.model,
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
            "messages": [
                {"role": m.role.value, "content": m.content} for m in req.messages
            ],
        }
        if req.available_tools:
            body["tools"] = [
                {
                    "type": "function",
                    "function": {
                        "name": spec.name,
                        "description": spec.description,
                        "parameters": _openai_parameters(spec),
                    },
                }
                for spec in req.available_tools
            ]
        data = self._post("/chat/completions", body)
        try:
            message = data["choices"][0]["message"]
            content = message.get("content") or ""
            tool_call = None
            calls = message.get("tool_calls") or []
            if calls:
                fn = calls[0]["function"]
                tool_call = ToolInvocation(fn["name"], json.loads(fn["arguments"]))
            return content, tool_call
        except (KeyError, IndexError, TypeError, json.JSONDecodeError) as exc:
            raise MalformedResponseError(f"bad chat completion payload: {exc}") from exc

    # -- embed

    def embed(self, text: str) -> EmbeddingVector:
        if not text.strip():
            raise GatewayError("cannot embed empty text")
        with self._lock:
            self.embedding_calls += 1
        if self._scripted is not None or self.cfg.kind is ProviderKind.SCRIPTED:
            return pseudo_embedding(text, self.cfg.embed_dim)
        data = self._post("/embeddings", {"model": self.cfg.model, "input": text})
        try:
            values = tuple(float(v) for v in data["data"][0]["embedding"])
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise MalformedResponseError(f"bad embedding payload: {exc}") from exc
        return EmbeddingVector(values, len(values))

    # -- transport

    def _post(self, path: str, body: dict) -> dict:
        key = os.environ.get(self.cfg.api_key_env or "")
        if not key:
            raise ConfigError(f"API key env var {self.cfg.api_key_env} is not set")
        url = self.cfg.endpoint.rstrip("/") + path
        headers = {"Authorization": f"Bearer {key}"}
        last_exc: Exception | None = None
        for attempt in range(self.cfg.max_retries + 1):
            with self._lock:
                self.transport_attempts += 1
            try:
                resp = requests.post(url, json=body, headers=headers, timeout=30)
                resp.raise_for_status()
                return resp.json()
            except (requests.RequestException, ValueError) as exc:
                last_exc = exc
                if attempt < self.cfg.max_retries:
                    time.sleep(0.2)
        raise TransportError(f"POST {url} failed after retries: {last_exc}")


def _openai_parameters(spec) -> dict:
    props = {}
    required = []
    for arg, meta in spec.args_schema.items():
        props[arg] = {"type": meta.get("type", "string")}
        if meta.get("required"):
            required.append(arg)
    return {"type": "object", "properties": props, "required": required}


def scripted_gateway(script_path: str | Path, embed_dim: int = 64) -> LlmGateway:
    return LlmGateway(
        ProviderConfig(
            kind=ProviderKind.SCRIPTED, script_path=script_path, embed_dim=embed_dim
        )
    )
