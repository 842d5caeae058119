"""Chat-completion gateway with a content-addressed record/replay cache.

Live mode sends OpenAI-compatible chat-completions requests over HTTPS and
records every (request, response) pair into an append-only JSONL store keyed
by a digest of the canonical request. Replay mode serves exclusively from
that store, which makes a whole pipeline run bit-deterministic and lets the
test suite run with no network at all.
"""

from __future__ import annotations

import hashlib
import json
import logging
import threading
import time
from dataclasses import dataclass
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Callable, Protocol

logger = logging.getLogger(__name__)

ROLES = ("system", "user", "assistant")


class GatewayError(Exception):
    """Base class for gateway failures."""


class TransportError(GatewayError):
    """Network-level failure (connection reset, timeout). Retryable."""


class RateLimitError(GatewayError):
    """HTTP 429 from the backend. Retryable."""


class ApiStatusError(GatewayError):
    """Non-2xx, non-429 response from the backend. Not retryable."""

    def __init__(self, status_code: int, detail: str = ""):
        super().__init__(f"backend returned status {status_code}: {detail}")
        self.status_code = status_code


class MissingRecordingError(GatewayError):
    """Replay mode was asked for a request that was never recorded."""

    def __init__(self, key: str):
        super().__init__(f"no recorded response for cache key {key}")
        self.key = key


@dataclass(frozen=True)
class Message:
    role: str
    content: str

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise ValueError(f"invalid message role {self.role!r}")


@dataclass(frozen=True)
class ChatRequest:
    model: str
    messages: tuple[Message, ...]
    temperature: float
    max_output_tokens: int

    def __post_init__(self) -> None:
        if not self.messages:
            raise ValueError("a chat request needs at least one message")
        if self.messages[0].role == "assistant":
            raise ValueError("the first message must be a system or user message")
        if self.max_output_tokens <= 0:
            raise ValueError("max_output_tokens must be positive")

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "messages": [{"role": m.role, "content": m.content} for m in self.messages],
            "temperature": self.temperature,
            "max_output_tokens": self.max_output_tokens,
        }

    @classmethod
    def from_dict(cls, row: dict) -> "ChatRequest":
        return cls(
            model=row["model"],
            messages=tuple(Message(m["role"], m["content"]) for m in row["messages"]),
            temperature=row["temperature"],
            max_output_tokens=row["max_output_tokens"],
        )


class FinishReason(str, Enum):
    STOP = "stop"
    LENGTH = "length"
    ERROR = "error"


@dataclass(frozen=True)
class ChatResponse:
    content: str
    finish_reason: FinishReason
    prompt_tokens: int = 0
    completion_tokens: int = 0

    def __post_init__(self) -> None:
        if self.finish_reason is FinishReason.STOP and not self.content:
            raise ValueError("a stop-finished response must have content")

    def to_dict(self) -> dict:
        return {
            "content": self.content,
            "finish_reason": self.finish_reason.value,
            "prompt_tokens": self.prompt_tokens,
            "completion_tokens": self.completion_tokens,
        }

    @classmethod
    def from_dict(cls, row: dict) -> "ChatResponse":
        return cls(
            content=row["content"],
            finish_reason=FinishReason(row["finish_reason"]),
            prompt_tokens=row.get("prompt_tokens", 0),
            completion_tokens=row.get("completion_tokens", 0),
        )


def canonical_request_json(request: ChatRequest) -> str:
    """Canonical serialization: sorted keys, compact separators, no whitespace games."""
    return json.dumps(request.to_dict(), sort_keys=True, separators=(",", ":"),
                      ensure_ascii=False)


def cache_key(request: ChatRequest) -> str:
    """SHA-256 hex digest of the canonical request serialization."""
    return hashlib.sha256(canonical_request_json(request).encode("utf-8")).hexdigest()


class Backend(Protocol):
    """Anything that can answer one chat request (live HTTP, or a scripted stand-in)."""

    def send(self, request: ChatRequest) -> ChatResponse: ...


class HttpBackend:
    """OpenAI-compatible chat-completions client over HTTPS."""

    def __init__(self, base_url: str, api_key: str, timeout: float = 60.0, session=None):
        import requests

        self.base_url = base_url.rstrip("/")
        self._api_key = api_key
        self.timeout = timeout
        self._session = session or requests.Session()

    def send(self, request: ChatRequest) -> ChatResponse:
        import requests

        payload = {
            "model": request.model,
            "messages": [{"role": m.role, "content": m.content} for m in request.messages],
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        }
        logger.debug("POST %s/chat/completions model=%s messages=%d",
                     self.base_url, request.model, len(request.messages))
        try:
            response = self._session.post(
                f"{self.base_url}/chat/completions",
                headers={"Authorization": f"Bearer {self._api_key}"},
                json=payload,
                timeout=self.timeout,
            )
        except requests.RequestException as exc:
            raise TransportError(str(exc)) from exc

        if response.status_code == 429:
            raise RateLimitError("rate limited by backend")
        if not 200 <= response.status_code < 300:
            raise ApiStatusError(response.status_code, response.text[:500])

        body = response.json()
        choice = body["choices"][0]
        usage = body.get("usage") or {}
        finish = choice.get("finish_reason", "stop")
        return ChatResponse(
            content=choice["message"]["content"] or "",
            finish_reason=FinishReason(finish) if finish in ("stop", "length") else FinishReason.ERROR,
            prompt_tokens=usage.get("prompt_tokens", 0),
            completion_tokens=usage.get("completion_tokens", 0),
        )


class GatewayMode(str, Enum):
    LIVE = "live"
    REPLAY = "replay"


class ChatGateway:
    """Uniform completion interface with the record/replay cache.

    In live mode every response is appended to the cache store, and repeated
    byte-identical requests are served from memory without a second upstream
    call. In replay mode the cache is the only source; a miss is an error
    naming the key, which is the harness's signal that fixtures are stale.
    """

    def __init__(self, mode: GatewayMode, cache_path: Path, backend: Backend | None = None):
        if mode is GatewayMode.LIVE and backend is None:
            raise GatewayError("live mode requires a backend")
        if mode is GatewayMode.REPLAY and not cache_path.exists():
            raise GatewayError(f"replay mode requires an existing cache file: {cache_path}")
        self.mode = mode
        self.cache_path = cache_path
        self.backend = backend
        self._write_lock = threading.Lock()
        self._cache: dict[str, ChatResponse] = {}
        if cache_path.exists():
            self._load_cache()

    def _load_cache(self) -> None:
        with self.cache_path.open(encoding="utf-8") as handle:
            for line in handle:
                line = line.strip()
                if not line:
                    continue
                row = json.loads(line)
                self._cache[row["key"]] = ChatResponse.from_dict(row["response"])
        logger.debug("loaded %d recorded completions from %s", len(self._cache), self.cache_path)

    def _record(self, key: str, request: ChatRequest, response: ChatResponse) -> None:
        if response.finish_reason is FinishReason.ERROR:
            return  # error responses are never cached
        row = {
            "key": key,
            "request": request.to_dict(),
            "response": response.to_dict(),
            "recorded_at": datetime.now(timezone.utc).isoformat(),
        }
        with self._write_lock:
            self._cache[key] = response
            self.cache_path.parent.mkdir(parents=True, exist_ok=True)
            with self.cache_path.open("a", encoding="utf-8") as handle:
                handle.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")

    def complete(self, request: ChatRequest) -> ChatResponse:
        key = cache_key(request)
        cached = self._cache.get(key)
        if cached is not None:
            logger.debug("cache hit %s", key[:12])
            return cached
        if self.mode is GatewayMode.REPLAY:
            raise MissingRecordingError(key)
        assert self.backend is not None
        response = self.backend.send(request)
        self._record(key, request, response)
        return response


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 3
    backoff_seconds: tuple[float, ...] = (0.5, 2.0, 8.0)

    def __post_init__(self) -> None:
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be at least 1")

    def delay(self, attempt: int) -> float:
        if not self.backoff_seconds:
            return 0.0
        return self.backoff_seconds[min(attempt, len(self.backoff_seconds) - 1)]


RETRYABLE_ERRORS = (TransportError, RateLimitError)


def with_retry(
    gateway: ChatGateway,
    request: ChatRequest,
    policy: RetryPolicy = RetryPolicy(),
    sleep: Callable[[float], None] = time.sleep,
) -> ChatResponse:
    """Call the gateway, retrying only transient failures per the policy."""
    last_error: GatewayError | None = None
    for attempt in range(policy.max_attempts):
        try:
            return gateway.complete(request)
        except RETRYABLE_ERRORS as exc:
            last_error = exc
            logger.warning("attempt %d/%d failed: %s", attempt + 1, policy.max_attempts, exc)
            if attempt + 1 < policy.max_attempts:
                sleep(policy.delay(attempt))
    assert last_error is not None
    raise last_error


def build_request(
    model: str,
    user_content: str,
    temperature: float,
    max_output_tokens: int,
    system_content: str | None = None,
) -> ChatRequest:
    messages: list[Message] = []
    if system_content:
        messages.append(Message("system", system_content))
    messages.append(Message("user", user_content))
    return ChatRequest(model=model, messages=tuple(messages),
                       temperature=temperature, max_output_tokens=max_output_tokens)
