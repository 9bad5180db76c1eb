"""Minimal OpenAI-compatible chat-completions client with retries."""
from __future__ import annotations

import json
import logging
import os
import random
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import httpx

_logger = logging.getLogger(__name__)

ENV_BASE_URL = "PROFILEDENOISE_LLM_BASE_URL"
ENV_API_KEY = "PROFILEDENOISE_LLM_API_KEY"


class ChatConfigError(RuntimeError):
    """Non-retryable request problem (bad credentials, unknown model, ...)."""


@dataclass
class Endpoint:
    base_url: str
    model: str
    api_key: str | None = None
    # decoding overrides for local servers; provider defaults apply when empty
    decoding: dict = field(default_factory=dict)

    @classmethod
    def from_env(cls, model: str, base_url: str | None = None, decoding: dict | None = None) -> "Endpoint":
        url = base_url or os.environ.get(ENV_BASE_URL) or os.environ.get("OPENAI_BASE_URL")
        if not url:
            raise ChatConfigError(f"no endpoint URL: set {ENV_BASE_URL} or pass base_url")
        key = os.environ.get(ENV_API_KEY) or os.environ.get("OPENAI_API_KEY")
        return cls(url, model, key, dict(decoding or {}))

    @property
    def url(self) -> str:
        base = self.base_url.rstrip("/")
        if base.endswith("/chat/completions"):
            return base
        if base.endswith("/v1"):
            return base + "/chat/completions"
        return base + "/v1/chat/completions"


@dataclass
class RetryPolicy:
    max_attempts: int = 4
    base_delay: float = 1.0
    max_delay: float = 30.0
    timeout: float = 60.0
    seed: int = 0

    def delay(self, attempt: int, rng: random.Random) -> float:
        d = min(self.max_delay, self.base_delay * 2 ** (attempt - 1))
        return d * (0.5 + rng.random())


@dataclass
class ChatExchange:
    request: dict
    text: str | None = None
    finish_reason: str | None = None
    latency: float = 0.0
    attempts: int = 0
    failure: str | None = None  # set when retries were exhausted

    @property
    def ok(self) -> bool:
        return self.failure is None


def _retryable(status: int) -> bool:
    return status == 429 or status >= 500


class ChatClient:
    """Thread-safe client; ``max_in_flight`` caps concurrent requests."""

    def __init__(self, endpoint: Endpoint, retry: RetryPolicy | None = None, *, max_in_flight: int = 4,
                 transcript: str | Path | None = None, sleep=time.sleep, transport: httpx.BaseTransport | None = None):
        self.endpoint = endpoint
        self.retry = retry or RetryPolicy()
        self._sem = threading.BoundedSemaphore(max_in_flight)
        self._lock = threading.Lock()
        self._rng = random.Random(self.retry.seed)
        self._sleep = sleep
        self.transcript = Path(transcript) if transcript else None
        self._http = httpx.Client(timeout=self.retry.timeout, transport=transport)

    def close(self) -> None:
        self._http.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def build_request(self, prompt: str) -> dict:
        body = {"model": self.endpoint.model, "messages": [{"role": "user", "content": prompt}]}
        body.update(self.endpoint.decoding)
        return body

    def chat(self, prompt: str, tag: str | None = None) -> ChatExchange:
        body = self.build_request(prompt)
        headers = {"Content-Type": "application/json"}
        if self.endpoint.api_key:
            headers["Authorization"] = f"Bearer {self.endpoint.api_key}"
        if tag:
            # distinguishes repeated runs of the same prompt without touching the body
            headers["X-Denoise-Request"] = tag
        ex = ChatExchange(request=body)
        t0 = time.perf_counter()
        last = "no attempt made"
        with self._sem:
            for attempt in range(1, self.retry.max_attempts + 1):
                ex.attempts = attempt
                try:
                    resp = self._http.post(self.endpoint.url, json=body, headers=headers)
                except httpx.HTTPError as exc:
                    last = f"transport: {exc.__class__.__name__}: {exc}"
                else:
                    if resp.status_code == 200:
                        try:
                            payload = resp.json()
                            choice = payload["choices"][0]
                            ex.text = choice["message"]["content"]
                            ex.finish_reason = choice.get("finish_reason")
                        except (ValueError, KeyError, IndexError, TypeError) as exc:
                            last = f"malformed response: {exc!r}"
                        else:
                            ex.failure = None
                            break
                    elif _retryable(resp.status_code):
                        last = f"HTTP {resp.status_code}"
                    else:
                        raise ChatConfigError(f"HTTP {resp.status_code} from {self.endpoint.url}: {resp.text[:200]}")
                if attempt < self.retry.max_attempts:
                    with self._lock:
                        wait = self.retry.delay(attempt, self._rng)
                    self._sleep(wait)
            else:
                ex.failure = last
                ex.text = None
        ex.latency = time.perf_counter() - t0
        if ex.failure:
            _logger.warning("chat request failed after %d attempts: %s", ex.attempts, ex.failure)
        self._record(ex, tag)
        return ex

    def _record(self, ex: ChatExchange, tag: str | None) -> None:
        if self.transcript is None:
            return
        rec = asdict(ex)
        rec["tag"] = tag
        line = json.dumps(rec, ensure_ascii=False, sort_keys=True)
        with self._lock:
            self.transcript.parent.mkdir(parents=True, exist_ok=True)
            with open(self.transcript, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")


def call_chat(endpoint: Endpoint, request: dict | str, retry: RetryPolicy | None = None, **kwargs) -> ChatExchange:
    """One-shot helper: ``request`` is a prompt or a body whose last user message is sent."""
    prompt = request if isinstance(request, str) else request["messages"][-1]["content"]
    with ChatClient(endpoint, retry, **kwargs) as client:
        return client.chat(prompt)
