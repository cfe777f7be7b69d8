"""Chat-completion backends with token accounting and deterministic mocking.

The wire protocol for live backends is the OpenAI-compatible chat-completions
HTTP JSON schema, which covers most hosted and self-served models without
bespoke adapters. Tests and synthetic runs use `MockBackend`, which replays a
rule table deterministically and enforces a configurable context limit.

Every completed call lands in a `TokenLedger` before the response is returned,
keyed by the request's tag, so reports can break token spend down by pipeline
phase (agent steps vs. evaluation vs. optimization vs. merging).
"""
from __future__ import annotations

import json
import math
import os
import threading
import time
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable

import requests


class RequestTag(str, Enum):
    AGENT_STEP = "agent_step"
    EVALUATE = "evaluate"
    OPTIMIZE = "optimize"
    MERGE = "merge"


class FinishReason(str, Enum):
    STOP = "stop"
    LENGTH = "length"
    CONTENT_FILTER = "content_filter"


class LlmError(Exception):
    """Base class for backend failures."""


class ContextWindowExceeded(LlmError):
    """The rendered prompt does not fit the backend's context window.

    Distinct from other failures because callers react to it specifically,
    e.g. by trimming trajectory/critique pairs and retrying.
    """


class TransportError(LlmError):
    """Transient transport failure that survived all retries."""


class AuthError(LlmError):
    """Authentication/authorization rejection. Never retried."""


class MockScriptError(LlmError):
    """A mock backend received a request no rule matches. Always a test bug."""


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def __post_init__(self) -> None:
        if self.role not in ("system", "user", "assistant"):
            raise ValueError(f"unknown message role {self.role!r}")


@dataclass(frozen=True)
class ChatRequest:
    messages: tuple[ChatMessage, ...]
    model_name: str
    temperature: float
    max_output_tokens: int
    request_tag: RequestTag

    def __post_init__(self) -> None:
        if not self.messages:
            raise ValueError("a request needs at least one message")
        if not math.isfinite(self.temperature) or self.temperature < 0:
            raise ValueError(f"temperature must be finite and >= 0, got {self.temperature}")


@dataclass
class ChatResponse:
    content: str
    prompt_tokens: int
    completion_tokens: int
    finish_reason: FinishReason
    latency_ms: int = 0

    def __post_init__(self) -> None:
        if self.prompt_tokens < 0 or self.completion_tokens < 0:
            raise ValueError("token counts must be nonnegative")


def estimate_tokens(text: str) -> int:
    """Deterministic monotone token estimate: ceil(utf-8 bytes / 4).

    Used for context pre-checks and by the mock backend; live backends report
    authoritative counts in their responses.
    """
    return (len(text.encode("utf-8")) + 3) // 4


def rendered_prompt(req: ChatRequest) -> str:
    return "\n".join(f"{m.role}: {m.content}" for m in req.messages)


# ---------------------------------------------------------------------------
# Token ledger
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LedgerEvent:
    tag: RequestTag
    prompt_tokens: int
    completion_tokens: int
    wall_clock_ms: int


@dataclass
class TagTotals:
    prompt_tokens: int = 0
    completion_tokens: int = 0
    calls: int = 0
    wall_clock_ms: int = 0


class TokenLedger:
    """Append-only log of per-call token usage with atomic running totals.

    Safe for concurrent appends; entries never mutate. The totals always equal
    the fold of the event log (`verify_conservation` checks exactly that).
    """

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._events: list[LedgerEvent] = []
        self._totals: dict[RequestTag, TagTotals] = {}

    def record(self, tag: RequestTag, prompt_tokens: int,
               completion_tokens: int, wall_clock_ms: int) -> None:
        event = LedgerEvent(tag, prompt_tokens, completion_tokens, wall_clock_ms)
        with self._lock:
            self._events.append(event)
            totals = self._totals.setdefault(tag, TagTotals())
            totals.prompt_tokens += prompt_tokens
            totals.completion_tokens += completion_tokens
            totals.calls += 1
            totals.wall_clock_ms += wall_clock_ms

    def events(self) -> list[LedgerEvent]:
        with self._lock:
            return list(self._events)

    def totals(self, tag: RequestTag) -> TagTotals:
        with self._lock:
            t = self._totals.get(tag, TagTotals())
            return TagTotals(t.prompt_tokens, t.completion_tokens, t.calls, t.wall_clock_ms)

    def totals_by_tag(self) -> dict[str, TagTotals]:
        with self._lock:
            return {tag.value: TagTotals(t.prompt_tokens, t.completion_tokens,
                                         t.calls, t.wall_clock_ms)
                    for tag, t in sorted(self._totals.items(), key=lambda kv: kv[0].value)}

    def grand_totals(self) -> TagTotals:
        out = TagTotals()
        for t in self.totals_by_tag().values():
            out.prompt_tokens += t.prompt_tokens
            out.completion_tokens += t.completion_tokens
            out.calls += t.calls
            out.wall_clock_ms += t.wall_clock_ms
        return out

    def verify_conservation(self) -> bool:
        """Recompute totals from the event log and compare with the running ones."""
        with self._lock:
            folded: dict[RequestTag, TagTotals] = {}
            for e in self._events:
                t = folded.setdefault(e.tag, TagTotals())
                t.prompt_tokens += e.prompt_tokens
                t.completion_tokens += e.completion_tokens
                t.calls += 1
                t.wall_clock_ms += e.wall_clock_ms
            return folded == self._totals

    def write_jsonl(self, path: str | Path) -> None:
        with self._lock:
            events = list(self._events)
        with open(path, "w", encoding="utf-8") as fh:
            for e in events:
                fh.write(json.dumps({
                    "tag": e.tag.value,
                    "prompt_tokens": e.prompt_tokens,
                    "completion_tokens": e.completion_tokens,
                    "wall_clock_ms": e.wall_clock_ms,
                }, sort_keys=True) + "\n")

    def load_jsonl(self, path: str | Path) -> None:
        """Append previously persisted events (used when resuming a run)."""
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                d = json.loads(line)
                self.record(RequestTag(d["tag"]), d["prompt_tokens"],
                            d["completion_tokens"], d["wall_clock_ms"])


# ---------------------------------------------------------------------------
# Mock backend
# ---------------------------------------------------------------------------

@dataclass
class MockRule:
    """One scripted reply: matches on request tag and/or a prompt substring.

    `reply` is either a literal string or a callable of (request, prompt text)
    so scripted agents can compute answers from the prompt deterministically.
    """

    reply: str | Callable[[ChatRequest, str], str]
    tag: RequestTag | None = None
    contains: str | None = None

    def matches(self, req: ChatRequest, prompt: str) -> bool:
        if self.tag is not None and req.request_tag is not self.tag:
            return False
        if self.contains is not None and self.contains not in prompt:
            return False
        return True


class MockBackend:
    """Deterministic scripted backend for tests and synthetic runs.

    Token counts come from `estimate_tokens`; reported latency is the fixed
    `latency_ms` so ledgers stay byte-reproducible. `delay_s` optionally adds a
    real sleep per call for scheduling experiments.
    """

    remote = False

    def __init__(self, rules: list[MockRule], *, context_limit: int | None = None,
                 latency_ms: int = 0, delay_s: float = 0.0, seed: int = 0) -> None:
        self.rules = list(rules)
        self.context_limit = context_limit
        self.latency_ms = latency_ms
        self.delay_s = delay_s
        self.seed = seed

    def complete(self, req: ChatRequest) -> ChatResponse:
        prompt = rendered_prompt(req)
        est = estimate_tokens(prompt)
        if self.context_limit is not None and est > self.context_limit:
            raise ContextWindowExceeded(
                f"estimated {est} prompt tokens exceed mock context limit "
                f"{self.context_limit}")
        if self.delay_s > 0:
            time.sleep(self.delay_s)
        for rule in self.rules:
            if rule.matches(req, prompt):
                content = rule.reply(req, prompt) if callable(rule.reply) else rule.reply
                return ChatResponse(content=content, prompt_tokens=est,
                                    completion_tokens=estimate_tokens(content),
                                    finish_reason=FinishReason.STOP,
                                    latency_ms=self.latency_ms)
        raise MockScriptError(
            f"no mock rule matches tag={req.request_tag.value} prompt={prompt[:120]!r}")


def mock_backend(rules: list[MockRule], *, context_limit: int | None = None,
                 latency_ms: int = 0, seed: int = 0) -> MockBackend:
    return MockBackend(rules, context_limit=context_limit,
                       latency_ms=latency_ms, seed=seed)


# ---------------------------------------------------------------------------
# Live backend (OpenAI-compatible chat completions)
# ---------------------------------------------------------------------------

ENDPOINT_ENV = "OPENAI_BASE_URL"
API_KEY_ENV = "OPENAI_API_KEY"
MODEL_ENV = "OPENAI_MODEL"

_CONTEXT_ERROR_MARKERS = (
    "context window", "context length", "context_length_exceeded",
    "maximum context", "too many tokens",
)


@dataclass(frozen=True)
class RetryPolicy:
    attempts: int = 5
    base_delay_s: float = 1.0
    max_delay_s: float = 30.0

    def delay(self, attempt: int) -> float:
        return min(self.base_delay_s * (2 ** attempt), self.max_delay_s)


class HttpBackend:
    """OpenAI-compatible chat completions over HTTP with capped backoff retries."""

    remote = True

    def __init__(self, *, endpoint: str | None = None, api_key: str | None = None,
                 timeout_s: float = 120.0, retry: RetryPolicy = RetryPolicy(),
                 session=None, sleep: Callable[[float], None] = time.sleep) -> None:
        self.endpoint = (endpoint or os.environ.get(ENDPOINT_ENV, "")).rstrip("/")
        if not self.endpoint:
            raise LlmError(f"no endpoint configured (set {ENDPOINT_ENV})")
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV, "")
        self.timeout_s = timeout_s
        self.retry = retry
        self.session = session or requests.Session()
        self.sleep = sleep

    def complete(self, req: ChatRequest) -> ChatResponse:
        url = f"{self.endpoint}/chat/completions"
        payload = {
            "model": req.model_name,
            "messages": [{"role": m.role, "content": m.content} for m in req.messages],
            "temperature": req.temperature,
            "max_tokens": req.max_output_tokens,
        }
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"

        last_error: Exception | None = None
        for attempt in range(self.retry.attempts):
            start = time.monotonic()
            try:
                resp = self.session.post(url, json=payload, headers=headers,
                                         timeout=self.timeout_s)
            except requests.RequestException as exc:
                last_error = exc
                if attempt + 1 < self.retry.attempts:
                    self.sleep(self.retry.delay(attempt))
                continue

            latency_ms = int((time.monotonic() - start) * 1000)
            if resp.status_code in (401, 403):
                raise AuthError(f"HTTP {resp.status_code}: {resp.text[:500]}")
            if resp.status_code == 400 and _looks_like_context_error(resp.text):
                raise ContextWindowExceeded(resp.text[:500])
            if resp.status_code in (408, 429) or resp.status_code >= 500:
                last_error = TransportError(f"HTTP {resp.status_code}: {resp.text[:300]}")
                if attempt + 1 < self.retry.attempts:
                    self.sleep(self.retry.delay(attempt))
                continue
            if resp.status_code != 200:
                raise LlmError(f"HTTP {resp.status_code}: {resp.text[:500]}")
            return _parse_chat_response(resp.json(), latency_ms)

        raise TransportError(
            f"request failed after {self.retry.attempts} attempts: {last_error}")


def _looks_like_context_error(body: str) -> bool:
    lowered = body.lower()
    return any(marker in lowered for marker in _CONTEXT_ERROR_MARKERS)


def _parse_chat_response(data: dict, latency_ms: int) -> ChatResponse:
    try:
        choice = data["choices"][0]
        content = choice["message"]["content"] or ""
        finish_raw = choice.get("finish_reason") or "stop"
    except (KeyError, IndexError, TypeError) as exc:
        raise LlmError(f"malformed chat completion response: {exc}") from exc
    usage = data.get("usage") or {}
    finish = {
        "stop": FinishReason.STOP,
        "length": FinishReason.LENGTH,
        "content_filter": FinishReason.CONTENT_FILTER,
    }.get(finish_raw, FinishReason.STOP)
    return ChatResponse(
        content=content,
        prompt_tokens=int(usage.get("prompt_tokens", 0)),
        completion_tokens=int(usage.get("completion_tokens", 0)),
        finish_reason=finish,
        latency_ms=latency_ms,
    )


# ---------------------------------------------------------------------------
# Client
# ---------------------------------------------------------------------------

@dataclass
class ModelParams:
    """Per-tag sampling defaults. Agent steps run greedy; the optimizer and
    merger sample with mild temperature; the judge stays greedy."""

    model_name: str = "mock"
    agent_temperature: float = 0.0
    optimizer_temperature: float = 0.7
    judge_temperature: float = 0.0
    max_output_tokens: int = 2048

    def temperature_for(self, tag: RequestTag) -> float:
        if tag is RequestTag.AGENT_STEP:
            return self.agent_temperature
        if tag is RequestTag.EVALUATE:
            return self.judge_temperature
        return self.optimizer_temperature


class LlmClient:
    """Backend wrapper that owns the ledger, transcript and in-flight limit.

    The in-flight semaphore only throttles remote backends; the mock is a pure
    in-process function and needs no pacing.
    """

    def __init__(self, backend, *, ledger: TokenLedger | None = None,
                 params: ModelParams | None = None,
                 transcript_path: str | Path | None = None,
                 max_in_flight: int = 8) -> None:
        self.backend = backend
        self.ledger = ledger if ledger is not None else TokenLedger()
        self.params = params or ModelParams()
        self.transcript_path = Path(transcript_path) if transcript_path else None
        self._gate = threading.Semaphore(max_in_flight)
        self._transcript_lock = threading.Lock()

    def complete(self, req: ChatRequest) -> ChatResponse:
        if self.backend.remote:
            with self._gate:
                resp = self.backend.complete(req)
        else:
            resp = self.backend.complete(req)
        self.ledger.record(req.request_tag, resp.prompt_tokens,
                           resp.completion_tokens, resp.latency_ms)
        if self.transcript_path is not None:
            self._log_transcript(req, resp)
        return resp

    def ask(self, tag: RequestTag, prompt: str, *, system: str | None = None) -> ChatResponse:
        messages = []
        if system:
            messages.append(ChatMessage("system", system))
        messages.append(ChatMessage("user", prompt))
        req = ChatRequest(messages=tuple(messages),
                          model_name=self.params.model_name,
                          temperature=self.params.temperature_for(tag),
                          max_output_tokens=self.params.max_output_tokens,
                          request_tag=tag)
        return self.complete(req)

    def _log_transcript(self, req: ChatRequest, resp: ChatResponse) -> None:
        entry = {
            "tag": req.request_tag.value,
            "model": req.model_name,
            "temperature": req.temperature,
            "messages": [{"role": m.role, "content": m.content} for m in req.messages],
            "content": resp.content,
            "prompt_tokens": resp.prompt_tokens,
            "completion_tokens": resp.completion_tokens,
            "finish_reason": resp.finish_reason.value,
        }
        with self._transcript_lock:
            with open(self.transcript_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")


class ScopedClient:
    """Client view that mirrors every call into a local ledger.

    Used wherever a cost figure has to be attributed to one evaluation run
    (per-epoch training stats, backtests, test scoring) while the shared
    ledger keeps the global per-tag totals. Safe under the same concurrency
    as the wrapped client.
    """

    def __init__(self, inner) -> None:
        self.inner = inner
        self.scope = TokenLedger()

    @property
    def params(self) -> ModelParams:
        return self.inner.params

    def complete(self, req: ChatRequest) -> ChatResponse:
        resp = self.inner.complete(req)
        self.scope.record(req.request_tag, resp.prompt_tokens,
                          resp.completion_tokens, resp.latency_ms)
        return resp

    def ask(self, tag: RequestTag, prompt: str, *, system: str | None = None) -> ChatResponse:
        resp = self.inner.ask(tag, prompt, system=system)
        self.scope.record(tag, resp.prompt_tokens,
                          resp.completion_tokens, resp.latency_ms)
        return resp
