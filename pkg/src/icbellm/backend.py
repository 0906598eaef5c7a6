"""Completion backends: the LLM seen as a text-completion service.

``HTTPBackend`` talks to a completion endpoint, ``ScriptedBackend`` answers
from ordered regex rules for tests. Both share caching, call accounting and
the in-flight limit through :class:`Backend`.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from collections import Counter
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Sequence

import httpx
import yaml

from .errors import (
    BackendError,
    ConfigError,
    MalformedResponseError,
    NoMatchingRuleError,
    TransportError,
    UnmappableAnswerError,
)
from .normalize import clean_token
from .ontology import OptionLabel
from .store import cache_header, dumps_record, read_cache_records

log = logging.getLogger(__name__)

FINISH_REASONS = ("stop", "length", "error")
CHOICE_MAX_TOKENS = 8

RESTATEMENT = (
    "\n\nThat is not one of the listed options. Reply again with exactly one letter "
    "from the list above and nothing else.\nMy answer is the letter"
)


@dataclass(frozen=True)
class CompletionRequest:
    prompt: str
    max_new_tokens: int = 64
    temperature: float = 0.0
    stop_sequences: tuple[str, ...] = ()
    tag: str = ""

    def __post_init__(self):
        if not self.prompt:
            raise ValueError("prompt must be non-empty")
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be non-negative")

    @property
    def stage(self) -> str:
        return self.tag.split("/", 1)[0] if self.tag else "untagged"


@dataclass(frozen=True)
class CompletionResponse:
    text: str
    finish_reason: str = "stop"
    latency_ms: int = 0
    cached: bool = False


def cache_key(request: CompletionRequest, model_id: str) -> str:
    payload = json.dumps(
        [request.prompt, request.max_new_tokens, request.temperature,
         list(request.stop_sequences), model_id],
        ensure_ascii=False,
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def apply_stops(text: str, stops: Sequence[str]) -> tuple[str, bool]:
    cut = min((i for i in (text.find(s) for s in stops if s) if i >= 0), default=-1)
    if cut >= 0:
        return text[:cut], True
    return text, False


@dataclass
class CallCacheEntry:
    key: str
    response: CompletionResponse
    created_at: str
    model: str = ""


class CallCache:
    """Completion cache backed by an append-only file, one entry per line.

    With ``path=None`` the cache is memory-only.
    """

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self._entries: dict[str, CallCacheEntry] = {}
        self._lock = threading.Lock()
        if self.path is not None:
            for rec in read_cache_records(self.path):
                r = rec["response"]
                self._entries[rec["key"]] = CallCacheEntry(
                    rec["key"],
                    CompletionResponse(r["text"], r.get("finish_reason", "stop"), int(r.get("latency_ms", 0))),
                    rec.get("created_at", ""),
                    rec.get("model", ""),
                )

    def __len__(self) -> int:
        return len(self._entries)

    def get(self, key: str) -> CompletionResponse | None:
        entry = self._entries.get(key)
        return replace(entry.response, cached=True) if entry else None

    def put(self, key: str, response: CompletionResponse, model: str = "") -> None:
        stored = replace(response, cached=False)
        entry = CallCacheEntry(key, stored, datetime.now(timezone.utc).isoformat(timespec="seconds"), model)
        with self._lock:
            self._entries[key] = entry
            if self.path is None:
                return
            new_file = not self.path.exists() or self.path.stat().st_size == 0
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a", encoding="utf-8", newline="\n") as fh:
                if new_file:
                    fh.write(cache_header() + "\n")
                fh.write(dumps_record({
                    "key": key,
                    "model": model,
                    "created_at": entry.created_at,
                    "response": {"text": stored.text, "finish_reason": stored.finish_reason,
                                 "latency_ms": stored.latency_ms},
                }) + "\n")
                fh.flush()

    def entries(self) -> list[CallCacheEntry]:
        return list(self._entries.values())

    def clear(self) -> None:
        with self._lock:
            self._entries.clear()
            if self.path is not None and self.path.exists():
                self.path.unlink()


class Backend:
    """Shared request path: cache lookup, in-flight limit, call accounting."""

    identity = "abstract"

    def __init__(self, cache: CallCache | None = None, max_in_flight: int = 4):
        if max_in_flight < 1:
            raise ConfigError("max_in_flight must be >= 1")
        self.cache = cache
        self.calls: Counter[str] = Counter()
        self.remote_calls: Counter[str] = Counter()
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self._count_lock = threading.Lock()

    def _send(self, request: CompletionRequest) -> CompletionResponse:
        raise NotImplementedError

    def complete(self, request: CompletionRequest) -> CompletionResponse:
        with self._count_lock:
            self.calls[request.stage] += 1
        key = cache_key(request, self.identity)
        if self.cache is not None:
            hit = self.cache.get(key)
            if hit is not None:
                return hit
        with self._slots:
            with self._count_lock:
                self.remote_calls[request.stage] += 1
            response = self._send(request)
        if self.cache is not None and response.finish_reason != "error":
            self.cache.put(key, response, self.identity)
        return response

    def counters(self) -> tuple[dict[str, int], dict[str, int]]:
        with self._count_lock:
            return dict(self.calls), dict(self.remote_calls)


# ---------------------------------------------------------------------------
# scripted test double


@dataclass
class ScriptedRule:
    pattern: str
    response: str
    max_uses: int | None = None
    # expand \1 / \g<name> group references from the match into the response
    expand: bool = False
    uses: int = field(default=0, compare=False)

    def __post_init__(self):
        if self.max_uses is not None and self.max_uses < 1:
            raise ValueError("max_uses must be a positive integer")
        self._regex = re.compile(self.pattern)

    @property
    def exhausted(self) -> bool:
        return self.max_uses is not None and self.uses >= self.max_uses

    def match(self, prompt: str):
        return None if self.exhausted else self._regex.search(prompt)


class ScriptedBackend(Backend):
    """Answers prompts from ordered pattern/response rules; first match wins.

    A prompt that matches no rule raises :class:`NoMatchingRuleError`.
    """

    def __init__(self, rules: Sequence[ScriptedRule], cache: CallCache | None = None,
                 max_in_flight: int = 4):
        super().__init__(cache, max_in_flight)
        self.rules = list(rules)
        self._rule_lock = threading.Lock()
        digest = hashlib.sha256(
            json.dumps([(r.pattern, r.response, r.max_uses, r.expand) for r in self.rules]).encode()
        ).hexdigest()[:16]
        self.identity = f"scripted:{digest}"

    @classmethod
    def from_file(cls, path: str | Path, **kwargs) -> "ScriptedBackend":
        return cls(load_rules(path), **kwargs)

    @property
    def rule_uses(self) -> int:
        return sum(r.uses for r in self.rules)

    def _send(self, request: CompletionRequest) -> CompletionResponse:
        with self._rule_lock:
            for rule in self.rules:
                m = rule.match(request.prompt)
                if m is None:
                    continue
                rule.uses += 1
                text = m.expand(rule.response) if rule.expand else rule.response
                break
            else:
                raise NoMatchingRuleError(request.tag, request.prompt)
        text, _ = apply_stops(text, request.stop_sequences)
        return CompletionResponse(text, "stop", 0)


def load_rules(path: str | Path) -> list[ScriptedRule]:
    try:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read scripted rules {path}: {exc}") from None
    if isinstance(data, dict):
        data = data.get("rules")
    if not isinstance(data, list):
        raise ConfigError(f"{path}: scripted rules file must hold a list of rules")
    rules = []
    for i, raw in enumerate(data):
        try:
            rules.append(ScriptedRule(
                pattern=str(raw["pattern"]),
                response=str(raw["response"]),
                max_uses=raw.get("max_uses"),
                expand=bool(raw.get("expand", False)),
            ))
        except (KeyError, TypeError, ValueError, re.error) as exc:
            raise ConfigError(f"{path}: rule {i}: {exc}") from None
    return rules


# ---------------------------------------------------------------------------
# HTTP completion endpoint

RETRY_STATUS = frozenset({408, 429, 500, 502, 503, 504})


class HTTPBackend(Backend):
    """POSTs ``{prompt, max_tokens, temperature, stop}`` to a completion endpoint.

    Understands OpenAI-style ``choices[0].text`` bodies as well as the
    ``content`` / ``text`` bodies returned by local inference servers.
    """

    def __init__(
        self,
        endpoint: str,
        model: str = "",
        token_env: str = "ICBELLM_API_TOKEN",
        timeout: float = 120.0,
        max_retries: int = 3,
        backoff: float = 1.0,
        cache: CallCache | None = None,
        max_in_flight: int = 4,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        super().__init__(cache, max_in_flight)
        self.endpoint = endpoint
        self.model = model
        self.max_retries = max_retries
        self.backoff = backoff
        self._sleep = sleep
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(token_env) if token_env else None
        if token:
            headers["Authorization"] = f"Bearer {token}"
        self._client = httpx.Client(timeout=timeout, headers=headers, transport=transport)
        self.identity = f"http:{endpoint}#{model}"

    def close(self) -> None:
        self._client.close()

    def _payload(self, request: CompletionRequest) -> dict:
        body = {
            "prompt": request.prompt,
            "max_tokens": request.max_new_tokens,
            "temperature": request.temperature,
            "stop": list(request.stop_sequences),
        }
        if self.model:
            body["model"] = self.model
        return body

    def _send(self, request: CompletionRequest) -> CompletionResponse:
        payload = self._payload(request)
        last_error: Exception | None = None
        for attempt in range(self.max_retries + 1):
            if attempt:
                self._sleep(self.backoff * 2 ** (attempt - 1))
            started = time.monotonic()
            try:
                resp = self._client.post(self.endpoint, json=payload)
            except httpx.TransportError as exc:
                last_error = exc
                log.warning("transport error on %s (attempt %d): %s", request.tag, attempt + 1, exc)
                continue
            if resp.status_code in RETRY_STATUS:
                last_error = BackendError(f"HTTP {resp.status_code}")
                log.warning("HTTP %d on %s (attempt %d)", resp.status_code, request.tag, attempt + 1)
                continue
            if resp.status_code >= 400:
                raise BackendError(f"endpoint returned HTTP {resp.status_code}: {resp.text[:200]}")
            latency = int((time.monotonic() - started) * 1000)
            text, finish = parse_completion_body(resp)
            text, stopped = apply_stops(text, request.stop_sequences)
            return CompletionResponse(text, "stop" if stopped else finish, latency)
        raise TransportError(
            f"{request.tag}: giving up after {self.max_retries + 1} attempts: {last_error}"
        )


def parse_completion_body(resp: httpx.Response) -> tuple[str, str]:
    try:
        body = resp.json()
    except ValueError:
        raise MalformedResponseError(f"response is not JSON: {resp.text[:120]!r}") from None
    text = finish = None
    if isinstance(body, dict):
        choices = body.get("choices")
        if isinstance(choices, list) and choices and isinstance(choices[0], dict):
            first = choices[0]
            text = first.get("text")
            if text is None and isinstance(first.get("message"), dict):
                text = first["message"].get("content")
            finish = first.get("finish_reason")
        elif isinstance(body.get("content"), str):
            text = body["content"]
            finish = "length" if body.get("stopped_limit") else "stop"
        elif isinstance(body.get("text"), str):
            text = body["text"]
            finish = body.get("finish_reason")
    if not isinstance(text, str):
        raise MalformedResponseError(f"no completion text in response body: {str(body)[:120]}")
    return text, "length" if finish == "length" else "stop"


# ---------------------------------------------------------------------------
# multiple choice


def option_key(index: int) -> str:
    """A, B, ..., Z, AA, AB, ..."""
    key = ""
    index += 1
    while index:
        index, rem = divmod(index - 1, 26)
        key = chr(ord("A") + rem) + key
    return key


def format_options(options: Sequence[OptionLabel]) -> str:
    return "\n".join(f"{option_key(i)}. {o.display}" for i, o in enumerate(options))


_KEYED = re.compile(r"^\(?([A-Za-z]{1,2})[.):]\s*(.+)$", re.S)


def _labels(opt: OptionLabel) -> set[str]:
    return {opt.canonical, clean_token(opt.display), *(clean_token(a) for a in opt.aliases)}


def _unique(hits: list[int]) -> int | None:
    hits = sorted(set(hits))
    return hits[0] if len(hits) == 1 else None


def map_answer(text: str, options: Sequence[OptionLabel]) -> int | None:
    """Map emitted text to one option: exact, then normalized, then
    unique prefix. Returns None when no unique mapping exists."""
    keys = [option_key(i) for i in range(len(options))]
    raw = text.strip()
    if not raw:
        return None
    exact = [
        i for i, o in enumerate(options)
        if raw in (keys[i], f"{keys[i]}.", f"{keys[i]})", o.display, f"{keys[i]}. {o.display}")
    ]
    if (hit := _unique(exact)) is not None:
        return hit

    norm = clean_token(raw)
    if not norm:
        return None
    normalized = [i for i, o in enumerate(options) if norm == keys[i].lower() or norm in _labels(o)]
    m = _KEYED.match(raw)
    if m:
        key, rest = m.group(1).upper(), clean_token(m.group(2))
        normalized += [i for i, o in enumerate(options) if keys[i] == key and rest in _labels(o)]
    if (hit := _unique(normalized)) is not None:
        return hit

    prefixed = [i for i, o in enumerate(options) if any(lbl.startswith(norm) for lbl in _labels(o))]
    return _unique(prefixed)


def choose_option(
    backend: Backend,
    prompt: str,
    options: Sequence[OptionLabel],
    *,
    tag: str = "",
    max_new_tokens: int = CHOICE_MAX_TOKENS,
    temperature: float = 0.0,
) -> tuple[int, str]:
    """Ask a multiple-choice question; ``prompt`` already lists the options.

    Retries once with a restatement when the first answer cannot be mapped,
    then raises :class:`UnmappableAnswerError`.
    """
    if len(options) < 2:
        raise ValueError("choose_option needs at least two options")
    stops = ("\n",)
    first = backend.complete(CompletionRequest(prompt, max_new_tokens, temperature, stops, tag))
    idx = map_answer(first.text, options)
    if idx is not None:
        return idx, first.text
    retry_prompt = prompt + first.text + RESTATEMENT
    second = backend.complete(CompletionRequest(retry_prompt, max_new_tokens, temperature, stops, tag + "#retry"))
    idx = map_answer(second.text, options)
    if idx is not None:
        return idx, second.text
    raise UnmappableAnswerError([first.text, second.text], tag)
