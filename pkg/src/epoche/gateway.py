"""Chat-completion backends.

Every model call goes through ``backend.complete(request)``. Requests are
fingerprinted over a canonical form (image payloads enter by digest), which
keys the response cache, transcripts, and scripted replay.

Backends:

* :class:`LiveBackend` posts to an OpenAI-compatible ``/chat/completions``
  endpoint, with retries, a token-bucket rate limit, and an in-memory cache.
* :class:`ScriptedBackend` replays a recorded :class:`Transcript`.
* :class:`CallableBackend` answers from a Python function (test doubles).
* :class:`RecordingBackend` tees another backend into a transcript file.
"""

from __future__ import annotations

import base64
import enum
import hashlib
import json
import logging
import os
import random
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Optional, Protocol, Union

import httpx

logger = logging.getLogger(__name__)

DEFAULT_TEMPERATURE = 0.0
DEFAULT_MAX_OUTPUT_TOKENS = 700


class GatewayError(RuntimeError):
    """Base class for backend failures."""


class UnknownFingerprint(GatewayError):
    pass


class RateLimited(GatewayError):
    pass


class TransportError(GatewayError):
    pass


class MalformedResponse(GatewayError):
    pass


class ApiError(GatewayError):
    """Non-retryable HTTP status from the endpoint."""

    def __init__(self, status: int, body: str):
        super().__init__(f"HTTP {status}: {body[:200]}")
        self.status = status


class Origin(str, enum.Enum):
    LIVE = "live"
    CACHE = "cache"
    SCRIPT = "script"


@dataclass(frozen=True)
class TextPart:
    text: str

    def canonical(self) -> dict[str, Any]:
        return {"type": "text", "text": self.text}

    def wire(self) -> dict[str, Any]:
        return {"type": "text", "text": self.text}


@dataclass(frozen=True)
class ImagePart:
    """An image attachment, either inline bytes or a remote URL."""

    media_type: str = "image/jpeg"
    data: Optional[bytes] = field(default=None, repr=False)
    url: Optional[str] = None

    def __post_init__(self):
        if (self.data is None) == (self.url is None):
            raise ValueError("ImagePart needs exactly one of data or url")

    @property
    def digest(self) -> str:
        if self.data is not None:
            return hashlib.sha256(self.data).hexdigest()
        return hashlib.sha256(self.url.encode()).hexdigest()

    def canonical(self) -> dict[str, Any]:
        if self.url is not None:
            return {"type": "image_url", "url": self.url}
        return {"type": "image", "media_type": self.media_type, "sha256": self.digest}

    def wire(self) -> dict[str, Any]:
        if self.url is not None:
            url = self.url
        else:
            url = f"data:{self.media_type};base64,{base64.b64encode(self.data).decode('ascii')}"
        return {"type": "image_url", "image_url": {"url": url}}


Part = Union[TextPart, ImagePart]


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


@dataclass(frozen=True)
class ChatRequest:
    """One user turn of mixed text and image parts.

    ``temperature`` / ``max_output_tokens`` of ``None`` mean the parameter is
    omitted on the wire (models that reject sampling settings).
    """

    model: str
    parts: tuple[Part, ...]
    temperature: Optional[float] = DEFAULT_TEMPERATURE
    max_output_tokens: Optional[int] = DEFAULT_MAX_OUTPUT_TOKENS
    catalog_version: str = ""

    def __post_init__(self):
        if self.max_output_tokens is not None and self.max_output_tokens < 1:
            raise ValueError("max_output_tokens must be positive")
        object.__setattr__(self, "parts", tuple(self.parts))

    @property
    def text(self) -> str:
        return "\n".join(p.text for p in self.parts if isinstance(p, TextPart))

    @property
    def images(self) -> list[ImagePart]:
        return [p for p in self.parts if isinstance(p, ImagePart)]

    def canonical(self) -> dict[str, Any]:
        return {
            "model": self.model,
            "parts": [p.canonical() for p in self.parts],
            "temperature": self.temperature,
            "max_output_tokens": self.max_output_tokens,
            "catalog_version": self.catalog_version,
        }

    @property
    def fingerprint(self) -> str:
        return fingerprint_canonical(self.canonical())

    def wire_payload(self) -> dict[str, Any]:
        payload: dict[str, Any] = {
            "model": self.model,
            "messages": [{"role": "user", "content": [p.wire() for p in self.parts]}],
        }
        if self.temperature is not None:
            payload["temperature"] = self.temperature
        if self.max_output_tokens is not None:
            payload["max_tokens"] = self.max_output_tokens
        return payload


def fingerprint_canonical(canonical: dict[str, Any]) -> str:
    return hashlib.sha256(canonical_json(canonical).encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class ChatResponse:
    text: str
    origin: Origin
    fingerprint: str
    usage: dict[str, int] = field(default_factory=dict)
    latency: float = 0.0
    attempts: int = 1


class Backend(Protocol):
    model: str
    supports_sampling: bool

    def complete(self, request: ChatRequest) -> ChatResponse: ...


_NO_SAMPLING = re.compile(r"^(o\d)([-_.]|$)")


def model_supports_sampling(model: str) -> bool:
    """Reasoning-series model ids (``o1``, ``o3-mini``, ...) reject temperature/max_tokens."""
    return not _NO_SAMPLING.match(model)


class TokenBucket:
    """Thread-safe token bucket; ``acquire`` blocks until a token is available."""

    def __init__(
        self,
        rate: float,
        capacity: Optional[float] = None,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if rate <= 0:
            raise ValueError("rate must be positive")
        self.rate = rate
        self.capacity = capacity if capacity is not None else max(1.0, rate)
        self._tokens = self.capacity
        self._clock = clock
        self._sleep = sleep
        self._last = clock()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = self._clock()
                self._tokens = min(self.capacity, self._tokens + (now - self._last) * self.rate)
                self._last = now
                if self._tokens >= 1:
                    self._tokens -= 1
                    return
                wait = (1 - self._tokens) / self.rate
            self._sleep(wait)


class LiveBackend:
    """OpenAI-compatible chat-completions client."""

    def __init__(
        self,
        base_url: str,
        api_key: Optional[str],
        model: str,
        *,
        attempts: int = 3,
        backoff: float = 1.0,
        max_backoff: float = 30.0,
        timeout: float = 120.0,
        rate_limit: Optional[float] = None,
        cache: bool = True,
        supports_sampling: Optional[bool] = None,
        client: Optional[httpx.Client] = None,
        sleep: Callable[[float], None] = time.sleep,
        rng: Optional[random.Random] = None,
    ):
        if attempts < 1:
            raise ValueError("attempts must be >= 1")
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.attempts = attempts
        self.backoff = backoff
        self.max_backoff = max_backoff
        self.supports_sampling = (
            model_supports_sampling(model) if supports_sampling is None else supports_sampling
        )
        headers = {"Content-Type": "application/json"}
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        self._client = client or httpx.Client(timeout=timeout)
        self._headers = headers
        self._sleep = sleep
        self._rng = rng or random.Random()
        self._bucket = TokenBucket(rate_limit) if rate_limit else None
        self._cache: Optional[dict[str, ChatResponse]] = {} if cache else None
        self._lock = threading.Lock()
        self.retries = 0
        self.calls = 0

    @classmethod
    def from_env(cls, role: str, model: Optional[str] = None, **kwargs) -> "LiveBackend":
        """Build from ``EPOCHE_<ROLE>_BASE_URL`` / ``_API_KEY`` / ``_MODEL``, falling back to ``OPENAI_*``."""
        prefix = f"EPOCHE_{role.upper()}_"
        base_url = os.environ.get(prefix + "BASE_URL") or os.environ.get(
            "OPENAI_BASE_URL", "https://api.openai.com/v1"
        )
        api_key = os.environ.get(prefix + "API_KEY") or os.environ.get("OPENAI_API_KEY")
        model = model or os.environ.get(prefix + "MODEL")
        if not model:
            raise GatewayError(f"no model configured for {role} backend")
        if not api_key:
            raise GatewayError(f"no API key in {prefix}API_KEY or OPENAI_API_KEY")
        return cls(base_url, api_key, model, **kwargs)

    def close(self) -> None:
        self._client.close()

    def _delay(self, attempt: int, retry_after: Optional[str]) -> float:
        delay = min(self.max_backoff, self.backoff * (2 ** (attempt - 1)))
        delay += self._rng.uniform(0, delay / 2)
        if retry_after:
            try:
                delay = max(delay, min(float(retry_after), self.max_backoff))
            except ValueError:
                pass
        return delay

    def complete(self, request: ChatRequest) -> ChatResponse:
        fp = request.fingerprint
        if self._cache is not None:
            with self._lock:
                hit = self._cache.get(fp)
            if hit is not None:
                return ChatResponse(hit.text, Origin.CACHE, fp, hit.usage, 0.0, 0)

        payload = request.wire_payload()
        url = f"{self.base_url}/chat/completions"
        last_error: Exception = TransportError("no attempt made")
        for attempt in range(1, self.attempts + 1):
            if self._bucket is not None:
                self._bucket.acquire()
            started = time.perf_counter()
            retry_after = None
            try:
                resp = self._client.post(url, json=payload, headers=self._headers)
            except httpx.TransportError as exc:
                last_error = TransportError(f"{type(exc).__name__}: {exc}")
            else:
                with self._lock:
                    self.calls += 1
                if resp.status_code == 200:
                    text, usage = _parse_completion(resp)
                    out = ChatResponse(
                        text, Origin.LIVE, fp, usage, time.perf_counter() - started, attempt
                    )
                    if self._cache is not None:
                        with self._lock:
                            self._cache.setdefault(fp, out)
                    return out
                if resp.status_code == 429:
                    last_error = RateLimited(f"HTTP 429 after {attempt} attempt(s)")
                    retry_after = resp.headers.get("retry-after")
                elif resp.status_code >= 500:
                    last_error = TransportError(f"HTTP {resp.status_code}")
                else:
                    raise ApiError(resp.status_code, resp.text)
            if attempt < self.attempts:
                with self._lock:
                    self.retries += 1
                delay = self._delay(attempt, retry_after)
                logger.warning("%s; retrying in %.2fs", last_error, delay)
                self._sleep(delay)
        raise last_error


def _parse_completion(resp: httpx.Response) -> tuple[str, dict[str, int]]:
    try:
        body = resp.json()
        content = body["choices"][0]["message"]["content"]
    except (ValueError, KeyError, IndexError, TypeError) as exc:
        raise MalformedResponse(f"unexpected completion body: {resp.text[:200]}") from exc
    if isinstance(content, list):
        content = "".join(p.get("text", "") for p in content if isinstance(p, dict))
    if content is None:
        content = ""
    if not isinstance(content, str):
        raise MalformedResponse("completion content is not text")
    usage = {k: v for k, v in (body.get("usage") or {}).items() if isinstance(v, int)}
    return content, usage


@dataclass(frozen=True)
class TranscriptRecord:
    fingerprint: str
    request: dict[str, Any]
    response: str

    def to_json(self) -> str:
        return canonical_json(
            {"fingerprint": self.fingerprint, "request": self.request, "response": self.response}
        )


class TranscriptError(GatewayError):
    pass


class Transcript:
    """Recorded (fingerprint, canonical request, response) triples.

    Lookup is first-recorded-wins per fingerprint. Sequence mode ignores
    fingerprints and hands out responses in file order through a shared cursor.
    """

    def __init__(self, records: Iterable[TranscriptRecord] = ()):
        self.records = list(records)
        self._by_fp: dict[str, TranscriptRecord] = {}
        for rec in self.records:
            self._by_fp.setdefault(rec.fingerprint, rec)
        self._cursor = 0
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self.records)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Transcript":
        records = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    raw = json.loads(line)
                    records.append(TranscriptRecord(raw["fingerprint"], raw["request"], raw["response"]))
                except (ValueError, KeyError) as exc:
                    raise TranscriptError(f"{path}:{lineno}: bad transcript record") from exc
        return cls(records)

    def lookup(self, fingerprint: str) -> str:
        rec = self._by_fp.get(fingerprint)
        if rec is None:
            raise UnknownFingerprint(fingerprint)
        return rec.response

    def next_in_sequence(self) -> str:
        with self._lock:
            if self._cursor >= len(self.records):
                raise UnknownFingerprint("transcript sequence exhausted")
            rec = self.records[self._cursor]
            self._cursor += 1
        return rec.response


class ScriptedBackend:
    """Replays a transcript. Several backends (one per model id) may share one transcript."""

    def __init__(
        self,
        transcript: Transcript,
        model: str = "scripted",
        *,
        sequence: bool = False,
        supports_sampling: Optional[bool] = None,
    ):
        self.transcript = transcript
        self.model = model
        self.sequence = sequence
        self.requires_sequential = sequence
        self.supports_sampling = (
            model_supports_sampling(model) if supports_sampling is None else supports_sampling
        )

    def complete(self, request: ChatRequest) -> ChatResponse:
        fp = request.fingerprint
        text = self.transcript.next_in_sequence() if self.sequence else self.transcript.lookup(fp)
        return ChatResponse(text, Origin.SCRIPT, fp)


class CallableBackend:
    """Answers each request with ``responder(request)``."""

    def __init__(
        self,
        responder: Callable[[ChatRequest], str],
        model: str = "scripted",
        supports_sampling: bool = True,
    ):
        self.responder = responder
        self.model = model
        self.supports_sampling = supports_sampling
        self.requests: list[ChatRequest] = []
        self._lock = threading.Lock()

    def complete(self, request: ChatRequest) -> ChatResponse:
        with self._lock:
            self.requests.append(request)
        return ChatResponse(self.responder(request), Origin.SCRIPT, request.fingerprint)


class TranscriptWriter:
    """Append-only JSONL sink shared by recording backends."""

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        try:
            self._fh = open(self.path, "w", encoding="utf-8")
        except OSError as exc:
            raise TranscriptError(f"cannot write transcript {self.path}: {exc}") from exc
        self._seen: dict[str, str] = {}
        self._lock = threading.Lock()

    def seen(self, fingerprint: str) -> Optional[str]:
        with self._lock:
            return self._seen.get(fingerprint)

    def write(self, request: ChatRequest, response: ChatResponse) -> None:
        with self._lock:
            if response.fingerprint in self._seen:
                return
            self._seen[response.fingerprint] = response.text
            rec = TranscriptRecord(response.fingerprint, request.canonical(), response.text)
            self._fh.write(rec.to_json() + "\n")
            self._fh.flush()

    def close(self) -> None:
        with self._lock:
            self._fh.close()

    def __enter__(self) -> "TranscriptWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


class RecordingBackend:
    """Tees ``inner`` into a transcript.

    A fingerprint seen earlier in the session is answered from the
    transcript instead of the inner backend, so a recorded session replays
    exactly.
    """

    def __init__(self, inner: Backend, writer: TranscriptWriter):
        self.inner = inner
        self.writer = writer
        self.model = inner.model
        self.supports_sampling = getattr(inner, "supports_sampling", True)
        self.requires_sequential = getattr(inner, "requires_sequential", False)

    def complete(self, request: ChatRequest) -> ChatResponse:
        fp = request.fingerprint
        known = self.writer.seen(fp)
        if known is not None:
            return ChatResponse(known, Origin.CACHE, fp)
        response = self.inner.complete(request)
        self.writer.write(request, response)
        return response


def record_transcript(
    backend: Backend, path_or_writer: Union[str, Path, TranscriptWriter]
) -> RecordingBackend:
    """Wrap ``backend`` so every exchange is written to a transcript file."""
    writer = (
        path_or_writer
        if isinstance(path_or_writer, TranscriptWriter)
        else TranscriptWriter(path_or_writer)
    )
    return RecordingBackend(backend, writer)


def complete(backend: Backend, request: ChatRequest) -> ChatResponse:
    return backend.complete(request)
