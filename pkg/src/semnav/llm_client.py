"""Chat-completions transport, transcript recording and replay."""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path as FsPath

import httpx

from semnav.errors import (
    AuthError,
    ExhaustedTranscript,
    HashMismatch,
    HttpError,
    ProviderFailure,
    ProviderTimeout,
    RateLimited,
)
from semnav.semantic import PromptDoc, Query, Reply, prompt_hash

log = logging.getLogger(__name__)

DEFAULT_ENDPOINT = "https://api.openai.com/v1/chat/completions"
DEFAULT_KEY_ENV = "SEMNAV_API_KEY"


@dataclass(frozen=True)
class ClientConfig:
    endpoint_url: str = DEFAULT_ENDPOINT
    model_name: str = "gpt-4"
    api_key_source: str = DEFAULT_KEY_ENV
    timeout_s: float = 60.0
    max_retries: int = 3
    rate_limit_per_min: float | None = None
    temperature: float = 0.0
    backoff_s: float = 0.5

    def __post_init__(self) -> None:
        if not self.timeout_s > 0:
            raise ValueError("timeout_s must be positive")
        if self.max_retries < 0:
            raise ValueError("max_retries must be non-negative")
        if self.rate_limit_per_min is not None and not self.rate_limit_per_min > 0:
            raise ValueError("rate_limit_per_min must be positive")
        if self.backoff_s < 0:
            raise ValueError("backoff_s must be non-negative")

    def api_key(self) -> str:
        key = os.environ.get(self.api_key_source)
        if not key:
            raise AuthError(f"environment variable {self.api_key_source} is not set")
        return key


class RateLimiter:
    """Spaces request starts at least ``60 / per_min`` seconds apart."""

    def __init__(self, per_min: float | None) -> None:
        self._interval = 0.0 if per_min is None else 60.0 / per_min
        self._lock = threading.Lock()
        self._next = 0.0

    def acquire(self) -> None:
        if self._interval == 0.0:
            return
        with self._lock:
            now = time.monotonic()
            wait = self._next - now
            self._next = max(now, self._next) + self._interval
        if wait > 0:
            time.sleep(wait)


@dataclass(frozen=True)
class TranscriptRecord:
    prompt_hash: str
    prompt_text: str
    response_text: str
    latency_s: float
    timestamp: str

    @classmethod
    def new(cls, prompt_text: str, response_text: str, latency_s: float) -> TranscriptRecord:
        stamp = datetime.now(timezone.utc).isoformat()
        return cls(prompt_hash(prompt_text), prompt_text, response_text, latency_s, stamp)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> TranscriptRecord:
        data = json.loads(line)
        return cls(**{k: data[k] for k in cls.__dataclass_fields__})


def chat_payload(prompt: PromptDoc, config: ClientConfig) -> dict:
    return {
        "model": config.model_name,
        "temperature": config.temperature,
        "messages": [
            {"role": "system", "content": prompt.system_text},
            {"role": "user", "content": prompt.payload},
        ],
    }


def _extract_text(body) -> str:
    try:
        content = body["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError) as exc:
        raise HttpError(f"unexpected response shape: {exc!r}") from exc
    if not isinstance(content, str):
        raise HttpError("response content is not text")
    return content


def _single_request(prompt: PromptDoc, config: ClientConfig, client: httpx.Client, key: str) -> str:
    headers = {"Authorization": f"Bearer {key}"}
    try:
        resp = client.post(config.endpoint_url, json=chat_payload(prompt, config), headers=headers)
    except httpx.TimeoutException as exc:
        raise ProviderTimeout(f"request exceeded {config.timeout_s} s") from exc
    except httpx.HTTPError as exc:
        raise HttpError(f"transport failure: {exc}") from exc
    if resp.status_code in (401, 403):
        raise AuthError(f"HTTP {resp.status_code}: credentials rejected")
    if resp.status_code == 429:
        raise RateLimited("HTTP 429: rate limited")
    if resp.status_code >= 400:
        raise HttpError(resp.text[:200], resp.status_code)
    try:
        body = resp.json()
    except ValueError as exc:
        raise HttpError("response body is not JSON", resp.status_code) from exc
    return _extract_text(body)


def _retryable(exc: ProviderFailure) -> bool:
    if isinstance(exc, AuthError):
        return False
    if isinstance(exc, HttpError) and exc.status is not None and exc.status < 500:
        return False
    return True


def complete(
    prompt: PromptDoc,
    config: ClientConfig,
    *,
    client: httpx.Client | None = None,
    limiter: RateLimiter | None = None,
    transcript: TranscriptWriter | None = None,
) -> Reply:
    """Send one stateless chat request, retrying transient failures with
    exponential backoff. At most ``1 + max_retries`` requests are made."""
    key = config.api_key()
    own = client is None
    if own:
        client = httpx.Client(timeout=config.timeout_s)
    try:
        attempt = 0
        while True:
            if limiter is not None:
                limiter.acquire()
            t0 = time.perf_counter()
            try:
                text = _single_request(prompt, config, client, key)
            except ProviderFailure as exc:
                if attempt >= config.max_retries or not _retryable(exc):
                    raise
                delay = config.backoff_s * (2**attempt)
                log.warning("provider attempt %d failed (%s); retrying in %.2f s", attempt + 1, exc, delay)
                attempt += 1
                if delay:
                    time.sleep(delay)
                continue
            latency = time.perf_counter() - t0
            if transcript is not None:
                transcript.write(TranscriptRecord.new(prompt.text, text, latency))
            return Reply(text, latency)
    finally:
        if own:
            client.close()


class TranscriptWriter:
    """Appends records to a line-delimited JSON file."""

    def __init__(self, path) -> None:
        self.path = FsPath(path)
        self._lock = threading.Lock()

    def write(self, record: TranscriptRecord) -> None:
        with self._lock, self.path.open("a", encoding="utf-8") as fh:
            fh.write(record.to_json() + "\n")


def read_transcript(path) -> list[TranscriptRecord]:
    lines = FsPath(path).read_text(encoding="utf-8").splitlines()
    return [TranscriptRecord.from_json(line) for line in lines if line.strip()]


@dataclass
class LiveProvider:
    config: ClientConfig = field(default_factory=ClientConfig)
    transcript: TranscriptWriter | None = None
    kind: str = "live"

    def __post_init__(self) -> None:
        self._limiter = RateLimiter(self.config.rate_limit_per_min)
        self._client = httpx.Client(timeout=self.config.timeout_s)

    def respond(self, query: Query) -> Reply:
        return complete(
            query.prompt, self.config, client=self._client, limiter=self._limiter, transcript=self.transcript
        )

    def close(self) -> None:
        self._client.close()


@dataclass
class RecordingProvider:
    """Wraps any provider and logs every exchange for later replay."""

    inner: object
    transcript: TranscriptWriter

    @property
    def kind(self) -> str:
        return self.inner.kind

    def respond(self, query: Query) -> Reply:
        reply = self.inner.respond(query)
        self.transcript.write(TranscriptRecord.new(query.prompt.text, reply.text, reply.latency_s))
        return reply


class ReplayProvider:
    """Serves recorded responses in order, checking each prompt hash."""

    kind = "replay"

    def __init__(self, records) -> None:
        self._records = list(records)
        self._pos = 0
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path) -> ReplayProvider:
        return cls(read_transcript(path))

    def rewind(self) -> None:
        with self._lock:
            self._pos = 0

    @property
    def remaining(self) -> int:
        return len(self._records) - self._pos

    def respond(self, query: Query) -> Reply:
        with self._lock:
            if self._pos >= len(self._records):
                raise ExhaustedTranscript(f"transcript has only {len(self._records)} records")
            record = self._records[self._pos]
            expected = query.prompt.hash
            if record.prompt_hash != expected:
                raise HashMismatch(
                    f"record {self._pos} hash {record.prompt_hash[:12]} != prompt hash {expected[:12]}"
                )
            self._pos += 1
        return Reply(record.response_text, record.latency_s)
