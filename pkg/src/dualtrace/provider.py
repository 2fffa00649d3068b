"""Text-generation and embedding backends.

Two implementations share one surface (``generate`` / ``embed``):

* :class:`OpenAICompatibleProvider` talks to any server exposing the
  ``/chat/completions`` and ``/embeddings`` JSON endpoints.
* :class:`MockProvider` is deterministic and offline. Token counts are
  whitespace-token counts of the prompt messages and the reply.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import re
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Protocol, Sequence

import httpx

logger = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 300.0
DEFAULT_EMBED_DIM = 256


class ProviderError(RuntimeError):
    retryable = False


class RetryableProviderError(ProviderError):
    retryable = True


class ProviderTimeout(RetryableProviderError):
    pass


class TransportError(RetryableProviderError):
    pass


class FatalProviderError(ProviderError):
    pass


class MalformedResponse(FatalProviderError):
    pass


@dataclass(frozen=True)
class Message:
    role: str
    content: str


@dataclass(frozen=True)
class Usage:
    prompt_tokens: int = 0
    completion_tokens: int = 0

    def __add__(self, other: Usage) -> Usage:
        return Usage(self.prompt_tokens + other.prompt_tokens, self.completion_tokens + other.completion_tokens)

    @property
    def total(self) -> int:
        return self.prompt_tokens + self.completion_tokens


@dataclass(frozen=True)
class ProviderRequest:
    messages: tuple[Message, ...]
    max_tokens: int = 1024
    temperature: float = 0.0
    timeout: float | None = None
    # Local annotations (task name, session id). Never sent over the wire and
    # excluded from the request hash.
    meta: Mapping[str, str] = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "messages", tuple(self.messages))
        if not self.messages:
            raise ValueError("request needs at least one message")

    def digest(self) -> str:
        payload = {
            "messages": [[m.role, m.content] for m in self.messages],
            "max_tokens": self.max_tokens,
            "temperature": self.temperature,
        }
        raw = json.dumps(payload, sort_keys=True, ensure_ascii=False).encode()
        return hashlib.sha256(raw).hexdigest()


@dataclass(frozen=True)
class ProviderResponse:
    text: str
    prompt_tokens: int
    completion_tokens: int

    def __post_init__(self) -> None:
        if self.prompt_tokens < 0 or self.completion_tokens < 0:
            raise ValueError("token counts must be non-negative")

    @property
    def usage(self) -> Usage:
        return Usage(self.prompt_tokens, self.completion_tokens)


class Provider(Protocol):
    def generate(self, request: ProviderRequest) -> ProviderResponse: ...

    def embed(self, texts: Sequence[str]) -> list[list[float]]: ...


# Base delay in seconds before the first retry; doubles per attempt.
RETRY_BACKOFF = 1.0


def call_with_retries(fn: Callable, *args, attempts: int = 3, backoff: float | None = None, sleep=None, **kwargs):
    """Call ``fn``, retrying retryable provider errors with exponential backoff."""
    backoff = RETRY_BACKOFF if backoff is None else backoff
    sleep = time.sleep if sleep is None else sleep
    if attempts < 1:
        raise ValueError("attempts must be >= 1")
    for attempt in range(attempts):
        try:
            return fn(*args, **kwargs)
        except RetryableProviderError as exc:
            if attempt == attempts - 1:
                raise
            delay = backoff * (2**attempt)
            logger.warning("retryable provider error (%s), attempt %d/%d, sleeping %.1fs", exc, attempt + 1, attempts, delay)
            if delay > 0:
                sleep(delay)


def whitespace_tokens(text: str) -> int:
    return len(text.split())


_WORD_RE = re.compile(r"[a-z0-9]+")


def hashed_bow_vector(text: str, dim: int = DEFAULT_EMBED_DIM) -> list[float]:
    """L2-normalized signed hashed bag-of-words; the empty text maps to zeros."""
    vec = [0.0] * dim
    for tok in _WORD_RE.findall(text.lower()):
        h = hashlib.blake2b(tok.encode(), digest_size=8).digest()
        idx = int.from_bytes(h[:4], "little") % dim
        sign = 1.0 if h[4] & 1 else -1.0
        vec[idx] += sign
    norm = math.sqrt(sum(v * v for v in vec))
    if norm == 0.0:
        return vec
    return [v / norm for v in vec]


class MockProvider:
    """Deterministic offline provider.

    Reply selection, first match wins:

    1. ``fixtures[request.digest()]`` if present;
    2. ``handler(request)`` if a handler is configured;
    3. echo of the last user message.

    ``failures`` maps a 0-based call index to an exception raised instead of
    replying, which is how timeouts and outages are simulated. ``log`` keeps
    every successful call's usage for audits.
    """

    def __init__(
        self,
        *,
        fixtures: Mapping[str, str] | None = None,
        handler: Callable[[ProviderRequest], str] | None = None,
        failures: Mapping[int, Exception] | None = None,
        embed_dim: int = DEFAULT_EMBED_DIM,
    ):
        self.fixtures = dict(fixtures or {})
        self.handler = handler
        self.failures = dict(failures or {})
        self.embed_dim = embed_dim
        self.calls = 0
        self.log: list[tuple[str, Usage]] = []
        self._lock = threading.Lock()

    def generate(self, request: ProviderRequest) -> ProviderResponse:
        with self._lock:
            index = self.calls
            self.calls += 1
        if index in self.failures:
            raise self.failures[index]
        key = request.digest()
        if key in self.fixtures:
            text = self.fixtures[key]
        elif self.handler is not None:
            text = self.handler(request)
        else:
            users = [m.content for m in request.messages if m.role == "user"]
            text = users[-1] if users else request.messages[-1].content
        response = ProviderResponse(
            text=text,
            prompt_tokens=sum(whitespace_tokens(m.content) for m in request.messages),
            completion_tokens=whitespace_tokens(text),
        )
        with self._lock:
            self.log.append((request.meta.get("task", ""), response.usage))
        return response

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        if not texts:
            raise ValueError("embed needs at least one text")
        return [hashed_bow_vector(t, self.embed_dim) for t in texts]

    def total_usage(self) -> Usage:
        total = Usage()
        for _, usage in self.log:
            total = total + usage
        return total


@dataclass
class ProviderConfig:
    base_url: str = "https://api.openai.com/v1"
    model: str = "gpt-4o"
    embedding_model: str = "text-embedding-3-small"
    api_key: str | None = None
    timeout: float = DEFAULT_TIMEOUT

    @classmethod
    def from_env(cls, overrides: Mapping | None = None, env: Mapping[str, str] | None = None) -> ProviderConfig:
        env = os.environ if env is None else env
        values = dict(overrides or {})
        cfg = cls(**{k: v for k, v in values.items() if k in cls.__dataclass_fields__})
        if env.get("DUALTRACE_BASE_URL"):
            cfg.base_url = env["DUALTRACE_BASE_URL"]
        if env.get("DUALTRACE_MODEL"):
            cfg.model = env["DUALTRACE_MODEL"]
        if env.get("DUALTRACE_EMBEDDING_MODEL"):
            cfg.embedding_model = env["DUALTRACE_EMBEDDING_MODEL"]
        cfg.api_key = env.get("DUALTRACE_API_KEY") or env.get("OPENAI_API_KEY") or cfg.api_key
        if env.get("DUALTRACE_TIMEOUT"):
            cfg.timeout = float(env["DUALTRACE_TIMEOUT"])
        return cfg


_RETRYABLE_STATUS = {408, 409, 429, 500, 502, 503, 504}


class OpenAICompatibleProvider:
    """Client for OpenAI-style chat-completions and embeddings endpoints."""

    def __init__(self, config: ProviderConfig, *, transport: httpx.BaseTransport | None = None):
        self.config = config
        headers = {"Content-Type": "application/json"}
        if config.api_key:
            headers["Authorization"] = f"Bearer {config.api_key}"
        self._client = httpx.Client(
            base_url=config.base_url.rstrip("/") + "/",
            headers=headers,
            timeout=config.timeout,
            transport=transport,
        )

    def close(self) -> None:
        self._client.close()

    def _post(self, path: str, payload: dict, timeout: float | None) -> dict:
        try:
            resp = self._client.post(path, json=payload, timeout=timeout or self.config.timeout)
        except httpx.TimeoutException as exc:
            raise ProviderTimeout(f"{path}: timed out") from exc
        except httpx.TransportError as exc:
            raise TransportError(f"{path}: {exc}") from exc
        if resp.status_code in _RETRYABLE_STATUS:
            raise TransportError(f"{path}: HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise FatalProviderError(f"{path}: HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            return resp.json()
        except ValueError as exc:
            raise MalformedResponse(f"{path}: body is not JSON") from exc

    def generate(self, request: ProviderRequest) -> ProviderResponse:
        payload = {
            "model": self.config.model,
            "messages": [{"role": m.role, "content": m.content} for m in request.messages],
            "max_tokens": request.max_tokens,
            "temperature": request.temperature,
        }
        data = self._post("chat/completions", payload, request.timeout)
        try:
            text = data["choices"][0]["message"]["content"] or ""
            usage = data["usage"]
            return ProviderResponse(text, int(usage["prompt_tokens"]), int(usage["completion_tokens"]))
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise MalformedResponse(f"chat/completions: unexpected reply shape ({exc})") from exc

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        if not texts:
            raise ValueError("embed needs at least one text")
        data = self._post("embeddings", {"model": self.config.embedding_model, "input": list(texts)}, None)
        try:
            rows = sorted(data["data"], key=lambda row: row["index"])
            vectors = [[float(x) for x in row["embedding"]] for row in rows]
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedResponse(f"embeddings: unexpected reply shape ({exc})") from exc
        if len(vectors) != len(texts) or len({len(v) for v in vectors}) != 1:
            raise MalformedResponse("embeddings: wrong count or inconsistent dimension")
        return vectors


def cosine(a: Iterable[float], b: Iterable[float]) -> float:
    a, b = list(a), list(b)
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(x * x for x in b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return sum(x * y for x, y in zip(a, b)) / (na * nb)
