"""Uniform client layer for chat-completion and embedding endpoints.

Two provider implementations share one surface: :class:`HttpProvider` speaks
the common ``/chat/completions`` + ``/embeddings`` JSON shapes, and
:class:`MockProvider` replays a deterministic script for offline runs and
tests. Retries follow an exponential-backoff policy with injectable sleep
and RNG so the schedule can be asserted in virtual time.
"""

from __future__ import annotations

import hashlib
import json
import os
import random
import threading
import time
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from typing import Any

import httpx
import numpy as np

API_KEY_ENV = "DIAGSIM_API_KEY"

CHAT_ROLES = ("system", "user", "assistant")

DEFAULT_RETRYABLE_STATUSES = frozenset({429, 500, 502, 503, 504})


class GatewayError(Exception):
    """Base error for provider interactions."""

    retryable = False
    status: int | None = None


class RateLimited(GatewayError):
    retryable = True
    status = 429


class AuthFailed(GatewayError):
    status = 401


class RequestTimeout(GatewayError):
    retryable = True


class MalformedResponse(GatewayError):
    """Endpoint replied, but the body could not be interpreted."""


class HttpStatusError(GatewayError):
    """Any other non-2xx status; retryability decided by the policy."""

    def __init__(self, status: int, message: str) -> None:
        super().__init__(message)
        self.status = status


class ExhaustedRetries(GatewayError):
    """All attempts failed; ``last_error`` holds the final underlying error."""

    def __init__(self, attempts: int, last_error: GatewayError) -> None:
        super().__init__(f"gave up after {attempts} attempts: {last_error}")
        self.attempts = attempts
        self.last_error = last_error


class DimensionMismatch(GatewayError):
    """Provider returned an embedding of a different dimension than before."""


class UnscriptedRequest(GatewayError):
    """Mock provider received a request its script does not cover."""


@dataclass(frozen=True)
class ProviderConfig:
    """Connection settings for one model endpoint."""

    base_url: str
    chat_model: str
    api_key: str | None = None
    embed_model: str = "nomic-embed-text"
    timeout: float = 60.0

    def __post_init__(self) -> None:
        if not self.base_url:
            raise ValueError("base_url must be non-empty")
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")

    def resolve_api_key(self) -> str | None:
        return self.api_key or os.environ.get(API_KEY_ENV)


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def __post_init__(self) -> None:
        if self.role not in CHAT_ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        if self.role != "system" and not self.content:
            raise ValueError(f"{self.role} message content must be non-empty")

    def as_wire(self) -> dict[str, str]:
        return {"role": self.role, "content": self.content}


@dataclass(frozen=True)
class EmbeddingVector:
    values: tuple[float, ...]

    @property
    def dim(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class RetryPolicy:
    """Exponential backoff: delay(n) = base_delay * multiplier**(n-1)."""

    max_attempts: int = 6
    base_delay: float = 1.0
    multiplier: float = 2.0
    jitter_fraction: float = 0.1
    retryable_statuses: frozenset[int] = DEFAULT_RETRYABLE_STATUSES

    def __post_init__(self) -> None:
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        if self.base_delay <= 0:
            raise ValueError("base_delay must be > 0")
        if self.multiplier < 1:
            raise ValueError("multiplier must be >= 1")
        if not 0 <= self.jitter_fraction < 1:
            raise ValueError("jitter_fraction must be in [0, 1)")

    def delay(self, attempt: int, rng: random.Random | None = None) -> float:
        base = self.base_delay * self.multiplier ** (attempt - 1)
        if self.jitter_fraction and rng is not None:
            base *= rng.uniform(1 - self.jitter_fraction, 1 + self.jitter_fraction)
        return base

    def is_retryable(self, exc: GatewayError) -> bool:
        if exc.status is not None:
            return exc.status in self.retryable_statuses
        return exc.retryable


DEFAULT_RETRY_POLICY = RetryPolicy()


def with_backoff(
    action: Callable[[], Any],
    policy: RetryPolicy = DEFAULT_RETRY_POLICY,
    *,
    sleep: Callable[[float], None] = time.sleep,
    rng: random.Random | None = None,
) -> Any:
    """Run ``action`` under the retry policy; never sleeps after the last try.

    Raises :class:`ExhaustedRetries` carrying the final error once the
    attempt budget is spent; non-retryable errors propagate immediately.
    """
    last: GatewayError | None = None
    for attempt in range(1, policy.max_attempts + 1):
        try:
            return action()
        except GatewayError as exc:
            if not policy.is_retryable(exc):
                raise
            last = exc
            if attempt < policy.max_attempts:
                sleep(policy.delay(attempt, rng))
    assert last is not None
    raise ExhaustedRetries(policy.max_attempts, last) from last


def _coerce_messages(messages: Sequence[ChatMessage | dict[str, str]]) -> list[ChatMessage]:
    if not messages:
        raise ValueError("messages must be non-empty")
    out = []
    for m in messages:
        out.append(m if isinstance(m, ChatMessage) else ChatMessage(m["role"], m["content"]))
    return out


def _salvage_json(body: str) -> Any:
    """One reparse attempt: extract the outermost brace block and parse it."""
    start = body.find("{")
    end = body.rfind("}")
    if start == -1 or end <= start:
        raise MalformedResponse("response body is not JSON")
    try:
        return json.loads(body[start : end + 1])
    except json.JSONDecodeError as exc:
        raise MalformedResponse("response body is not JSON after reparse") from exc


class HttpProvider:
    """Chat/embeddings client for any endpoint speaking the common JSON shape.

    Request bodies are exactly ``{"model", "messages", "temperature"}`` for
    chat and ``{"model", "input"}`` for embeddings; responses are read from
    ``choices[0].message.content`` and ``data[0].embedding``. Instances are
    immutable after construction and safe to share across worker threads.
    """

    def __init__(
        self,
        config: ProviderConfig,
        retry: RetryPolicy | None = None,
        *,
        client: httpx.Client | None = None,
        sleep: Callable[[float], None] = time.sleep,
        rng: random.Random | None = None,
    ) -> None:
        self.config = config
        self.retry = retry or DEFAULT_RETRY_POLICY
        self._client = client or httpx.Client(timeout=config.timeout)
        self._sleep = sleep
        self._rng = rng
        self._lock = threading.Lock()
        self._embed_dim: int | None = None
        self.total_usage: dict[str, int] = {}
        self.last_usage: dict[str, int] | None = None

    @property
    def model_id(self) -> str:
        return self.config.chat_model

    def close(self) -> None:
        self._client.close()

    def chat(self, messages: Sequence[ChatMessage | dict[str, str]], **params: Any) -> str:
        msgs = _coerce_messages(messages)
        return with_backoff(
            lambda: self._chat_once(msgs, params),
            self.retry,
            sleep=self._sleep,
            rng=self._rng,
        )

    def embed(self, text: str) -> EmbeddingVector:
        if not text.strip():
            raise ValueError("text must be non-empty")
        vector = with_backoff(
            lambda: self._embed_once(text),
            self.retry,
            sleep=self._sleep,
            rng=self._rng,
        )
        with self._lock:
            if self._embed_dim is None:
                self._embed_dim = vector.dim
            elif vector.dim != self._embed_dim:
                raise DimensionMismatch(
                    f"provider returned dim {vector.dim}, expected {self._embed_dim}"
                )
        return vector

    def _chat_once(self, messages: list[ChatMessage], params: dict[str, Any]) -> str:
        payload: dict[str, Any] = {
            "model": self.config.chat_model,
            "messages": [m.as_wire() for m in messages],
            "temperature": params.get("temperature", 0.7),
        }
        for key, value in params.items():
            if key != "temperature":
                payload[key] = value
        data = self._post("/chat/completions", payload)
        try:
            content = data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise MalformedResponse("missing choices[0].message.content") from exc
        if not isinstance(content, str):
            raise MalformedResponse("assistant content is not text")
        self._record_usage(data.get("usage"))
        return content

    def _embed_once(self, text: str) -> EmbeddingVector:
        payload = {"model": self.config.embed_model, "input": text}
        data = self._post("/embeddings", payload)
        try:
            values = data["data"][0]["embedding"]
        except (KeyError, IndexError, TypeError) as exc:
            raise MalformedResponse("missing data[0].embedding") from exc
        if not values:
            raise MalformedResponse("empty embedding")
        return EmbeddingVector(tuple(float(v) for v in values))

    def _post(self, path: str, payload: dict[str, Any]) -> Any:
        url = self.config.base_url.rstrip("/") + path
        headers = {}
        api_key = self.config.resolve_api_key()
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        try:
            response = self._client.post(url, json=payload, headers=headers)
        except httpx.TimeoutException as exc:
            raise RequestTimeout(str(exc)) from exc
        except httpx.TransportError as exc:
            raise HttpStatusError(503, f"transport failure: {exc}") from exc
        if response.status_code in (401, 403):
            raise AuthFailed(f"authentication rejected ({response.status_code})")
        if response.status_code == 429:
            raise RateLimited("rate limited")
        if response.status_code >= 400:
            raise HttpStatusError(response.status_code, response.text[:200])
        try:
            return response.json()
        except (json.JSONDecodeError, ValueError):
            return _salvage_json(response.text)

    def _record_usage(self, usage: Any) -> None:
        if not isinstance(usage, dict):
            self.last_usage = None
            return
        counts = {k: int(v) for k, v in usage.items() if isinstance(v, (int, float))}
        with self._lock:
            self.last_usage = counts
            for key, value in counts.items():
                self.total_usage[key] = self.total_usage.get(key, 0) + value


def _mock_embedding(seed: int, text: str, dim: int) -> EmbeddingVector:
    digest = hashlib.sha256(f"{seed}:{text}".encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    raw = rng.standard_normal(dim)
    raw /= np.linalg.norm(raw)
    return EmbeddingVector(tuple(float(v) for v in raw))


@dataclass
class MockRequest:
    kind: str
    fingerprint: str
    payload: Any


class MockProvider:
    """Deterministic offline provider driven by a fingerprint script.

    The fingerprint of a chat request is the content of its last user
    message. Script keys are tried as an exact match, then as the longest
    prefix, then as substrings where the key occurring furthest right in
    the fingerprint wins (longest on ties); the ``"*"`` key (or
    ``default``) answers anything else. Rightmost-wins lets one script
    drive a whole interview: a prompt ends with the newest question, so
    keys for earlier questions buried in the serialized history never
    shadow it. Identical fingerprints always yield identical replies.
    Embeddings are unit vectors seeded from a hash of the input, so they
    are stable across runs and platforms.
    """

    def __init__(
        self,
        script: dict[str, str] | None = None,
        *,
        default: str | None = None,
        model_id: str = "mock",
        embed_dim: int = 64,
        seed: int = 0,
        latency: float = 0.0,
    ) -> None:
        if embed_dim < 1:
            raise ValueError("embed_dim must be positive")
        self.script = dict(script or {})
        self.default = default if default is not None else self.script.get("*")
        self.model_id = model_id
        self.embed_dim = embed_dim
        self.seed = seed
        self.latency = latency
        self.requests: list[MockRequest] = []
        self._lock = threading.Lock()

    @property
    def config(self) -> ProviderConfig:
        return ProviderConfig(base_url="mock://", chat_model=self.model_id)

    def chat(self, messages: Sequence[ChatMessage | dict[str, str]], **params: Any) -> str:
        msgs = _coerce_messages(messages)
        fingerprint = self._fingerprint(msgs)
        self._log("chat", fingerprint, [m.as_wire() for m in msgs])
        if self.latency:
            time.sleep(self.latency)
        reply = self._lookup(fingerprint)
        if reply is None:
            raise UnscriptedRequest(f"no script entry matches {fingerprint[:120]!r}")
        return reply

    def embed(self, text: str) -> EmbeddingVector:
        if not text.strip():
            raise ValueError("text must be non-empty")
        self._log("embed", text, None)
        if self.latency:
            time.sleep(self.latency)
        return _mock_embedding(self.seed, text, self.embed_dim)

    def _fingerprint(self, messages: list[ChatMessage]) -> str:
        for message in reversed(messages):
            if message.role == "user":
                return message.content
        return messages[-1].content

    def _lookup(self, fingerprint: str) -> str | None:
        if fingerprint in self.script:
            return self.script[fingerprint]
        prefix: str | None = None
        for key in self.script:
            if key != "*" and fingerprint.startswith(key):
                if prefix is None or len(key) > len(prefix):
                    prefix = key
        if prefix is not None:
            return self.script[prefix]
        best: tuple[int, int, str] | None = None
        for key in self.script:
            if key == "*":
                continue
            pos = fingerprint.rfind(key)
            if pos >= 0 and (best is None or (pos, len(key)) > best[:2]):
                best = (pos, len(key), key)
        if best is not None:
            return self.script[best[2]]
        return self.default

    def _log(self, kind: str, fingerprint: str, payload: Any) -> None:
        with self._lock:
            self.requests.append(MockRequest(kind, fingerprint, payload))


def mock_provider(script: dict[str, str] | None = None, **kwargs: Any) -> MockProvider:
    return MockProvider(script, **kwargs)


def chat_complete(
    config: ProviderConfig,
    messages: Sequence[ChatMessage | dict[str, str]],
    params: dict[str, Any] | None = None,
    *,
    retry: RetryPolicy | None = None,
    client: httpx.Client | None = None,
    sleep: Callable[[float], None] = time.sleep,
    rng: random.Random | None = None,
) -> str:
    provider = HttpProvider(config, retry, client=client, sleep=sleep, rng=rng)
    return provider.chat(messages, **(params or {}))


def embed_text(
    config: ProviderConfig,
    text: str,
    *,
    retry: RetryPolicy | None = None,
    client: httpx.Client | None = None,
    sleep: Callable[[float], None] = time.sleep,
    rng: random.Random | None = None,
) -> EmbeddingVector:
    provider = HttpProvider(config, retry, client=client, sleep=sleep, rng=rng)
    return provider.embed(text)
