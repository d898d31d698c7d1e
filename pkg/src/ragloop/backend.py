"""Text generation backends: an HTTP chat-completions client and a scripted mock."""

from __future__ import annotations

import enum
import logging
import math
import os
import re
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Protocol, Sequence

import httpx

from .protocol import PromptTemplate, render_prompt

logger = logging.getLogger(__name__)

DEFAULT_JUDGE_MODEL = "gpt-4.1-mini"


class BackendError(Exception):
    pass


class TransportError(BackendError):
    pass


class BackendTimeout(BackendError):
    pass


class BackendRejected(BackendError):
    def __init__(self, status: int, body: str):
        super().__init__(f"backend rejected request with status {status}: {body[:200]}")
        self.status = status
        self.body = body


class StopReason(str, enum.Enum):
    STOP_SEQUENCE = "stop_sequence"
    MAX_TOKENS = "max_tokens"
    END_OF_SEQUENCE = "end_of_sequence"


@dataclass(frozen=True)
class GenerationRequest:
    model_id: str
    prompt: str
    stop: tuple[str, ...] = ()
    max_new_tokens: int = 512
    temperature: float = 0.0
    seed: int | None = 0

    def __post_init__(self):
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if len(self.stop) > 4:
            raise ValueError("at most 4 stop sequences")
        object.__setattr__(self, "stop", tuple(self.stop))


@dataclass(frozen=True)
class Usage:
    prompt_tokens: int = 0
    completion_tokens: int = 0

    def __add__(self, other: Usage) -> Usage:
        return Usage(self.prompt_tokens + other.prompt_tokens,
                     self.completion_tokens + other.completion_tokens)


@dataclass(frozen=True)
class GenerationResult:
    text: str
    stop_reason: StopReason
    usage: Usage = Usage()


class Backend(Protocol):
    def generate(self, request: GenerationRequest) -> GenerationResult: ...


class RequestLimiter:
    """Caps the number of in-flight outbound calls across all episodes."""

    def __init__(self, max_concurrent: int = 4):
        if max_concurrent < 1:
            raise ValueError("max_concurrent must be >= 1")
        self.max_concurrent = max_concurrent
        self._sem = threading.BoundedSemaphore(max_concurrent)

    def __enter__(self):
        self._sem.acquire()
        return self

    def __exit__(self, *exc):
        self._sem.release()


DEFAULT_LIMITER = RequestLimiter(4)

_RETRY_STATUSES = frozenset({429, 500, 502, 503, 504})


class ChatCompletionsBackend:
    """Client for an OpenAI-style ``/chat/completions`` endpoint.

    The whole prompt (for the reasoner: the growing transcript) is sent as one
    user message. Transient failures are retried ``max_retries`` times with
    exponential backoff, so at most ``max_retries + 1`` attempts are made.
    """

    def __init__(
        self,
        base_url: str,
        api_key: str | None = None,
        *,
        api_key_env: str = "OPENAI_API_KEY",
        max_retries: int = 3,
        backoff: float = 1.0,
        timeout: float = 60.0,
        limiter: RequestLimiter | None = None,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.base_url = base_url.rstrip("/")
        self.api_key = api_key if api_key is not None else os.environ.get(api_key_env)
        self.max_retries = max_retries
        self.backoff = backoff
        self.limiter = limiter or DEFAULT_LIMITER
        self._sleep = sleep
        self._client = httpx.Client(timeout=timeout, transport=transport)

    def _payload(self, request: GenerationRequest) -> dict:
        body = {
            "model": request.model_id,
            "messages": [{"role": "user", "content": request.prompt}],
            "max_tokens": request.max_new_tokens,
            "temperature": request.temperature,
        }
        if request.stop:
            body["stop"] = list(request.stop)
        if request.seed is not None:
            body["seed"] = request.seed
        return body

    def generate(self, request: GenerationRequest) -> GenerationResult:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        url = f"{self.base_url}/chat/completions"
        payload = self._payload(request)
        last_error: BackendError | None = None
        for attempt in range(self.max_retries + 1):
            if attempt:
                self._sleep(self.backoff * 2 ** (attempt - 1))
            try:
                with self.limiter:
                    resp = self._client.post(url, json=payload, headers=headers)
            except httpx.TimeoutException as exc:
                last_error = BackendTimeout(str(exc) or "request timed out")
                continue
            except httpx.TransportError as exc:
                last_error = TransportError(str(exc) or type(exc).__name__)
                continue
            if resp.status_code in _RETRY_STATUSES:
                last_error = BackendRejected(resp.status_code, resp.text)
                logger.warning("attempt %d: status %d", attempt + 1, resp.status_code)
                continue
            if resp.status_code >= 400:
                raise BackendRejected(resp.status_code, resp.text)
            return _parse_completion(resp.json(), request)
        assert last_error is not None
        raise last_error

    def close(self):
        self._client.close()


def _parse_completion(data: Mapping, request: GenerationRequest) -> GenerationResult:
    try:
        choice = data["choices"][0]
        text = choice["message"]["content"] or ""
    except (KeyError, IndexError, TypeError) as exc:
        raise BackendRejected(200, f"malformed completion body: {exc!r}") from exc
    finish = choice.get("finish_reason")
    matched = choice.get("stop_reason")  # vLLM-style servers report the matched string
    if finish == "length":
        reason = StopReason.MAX_TOKENS
    elif isinstance(matched, str) and matched in request.stop:
        reason = StopReason.STOP_SEQUENCE
    elif finish == "stop" and request.stop:
        reason = StopReason.STOP_SEQUENCE
    else:
        reason = StopReason.END_OF_SEQUENCE
    if reason is StopReason.STOP_SEQUENCE:
        for s in request.stop:
            if text.endswith(s):
                text = text[: -len(s)]
                break
    usage = data.get("usage") or {}
    return GenerationResult(
        text, reason, Usage(int(usage.get("prompt_tokens", 0)), int(usage.get("completion_tokens", 0)))
    )


def generate_judged_text(
    backend: Backend,
    template: PromptTemplate,
    bindings: Mapping[str, str],
    *,
    model_id: str = DEFAULT_JUDGE_MODEL,
    max_new_tokens: int = 1024,
    temperature: float = 0.0,
    seed: int | None = 0,
) -> GenerationResult:
    prompt = render_prompt(template, bindings)
    return backend.generate(
        GenerationRequest(model_id, prompt, (), max_new_tokens, temperature, seed)
    )


# --- scripted mock ------------------------------------------------------------

MOCK_CHARS_PER_TOKEN = 4


def mock_token_count(text: str) -> int:
    return math.ceil(len(text) / MOCK_CHARS_PER_TOKEN)


class PolicyExhausted(AssertionError):
    pass


class PolicyMismatch(AssertionError):
    def __init__(self, step: int, diff: str):
        super().__init__(f"step {step}: {diff}")
        self.step = step
        self.diff = diff


@dataclass(frozen=True)
class PromptMatcher:
    """All ``contains`` substrings must occur in the prompt; ``regex`` must search-match."""

    contains: tuple[str, ...] = ()
    regex: str | None = None

    def mismatch(self, prompt: str) -> str | None:
        for needle in self.contains:
            if needle not in prompt:
                return f"prompt lacks {needle!r}"
        if self.regex is not None and re.search(self.regex, prompt, re.S) is None:
            return f"prompt does not match /{self.regex}/"
        return None


@dataclass(frozen=True)
class ScriptedStep:
    expect: PromptMatcher
    response: str


@dataclass(frozen=True)
class ScriptedPolicy:
    steps: tuple[ScriptedStep, ...]

    @classmethod
    def from_json(cls, steps: Sequence[Mapping]) -> ScriptedPolicy:
        return cls(tuple(
            ScriptedStep(PromptMatcher(tuple(s.get("contains", ())), s.get("regex")), s["response"])
            for s in steps
        ))


def apply_mock_limits(text: str, request: GenerationRequest) -> GenerationResult:
    """Cut at the first stop sequence (stripped), then at max_new_tokens * 4 characters."""
    reason = StopReason.END_OF_SEQUENCE
    cut = None
    for s in request.stop:
        i = text.find(s)
        if i >= 0 and (cut is None or i < cut):
            cut = i
    if cut is not None:
        text, reason = text[:cut], StopReason.STOP_SEQUENCE
    limit = request.max_new_tokens * MOCK_CHARS_PER_TOKEN
    if len(text) > limit:
        text, reason = text[:limit], StopReason.MAX_TOKENS
    return GenerationResult(text, reason, Usage(mock_token_count(request.prompt), mock_token_count(text)))


@dataclass
class ScriptedBackend:
    """Replays a policy strictly in order. One instance per episode."""

    policy: ScriptedPolicy
    calls: list[GenerationRequest] = field(default_factory=list)

    def generate(self, request: GenerationRequest) -> GenerationResult:
        index = len(self.calls)
        if index >= len(self.policy.steps):
            raise PolicyExhausted(f"no scripted step left for call {index + 1}")
        step = self.policy.steps[index]
        diff = step.expect.mismatch(request.prompt)
        if diff is not None:
            raise PolicyMismatch(index + 1, diff)
        self.calls.append(request)
        return apply_mock_limits(step.response, request)

