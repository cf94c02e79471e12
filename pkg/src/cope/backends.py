"""Chat-completion backends: OpenAI-compatible HTTP, a deterministic mock, and a response cache."""

from __future__ import annotations

import json
import logging
import os
import re
import time
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Mapping

from .util import atomic_write_text, canonical_json, dump_json, sha256_text

logger = logging.getLogger(__name__)

ROLES = ("system", "user", "assistant")
DEFAULT_TOKEN_ENV = "COPE_API_TOKEN"
MOCK_SIGNATURE = "most likely mRS score at 90 days is"


class BackendError(Exception):
    """Transport exhausted, non-2xx response, or malformed envelope."""

    def __init__(self, message: str, status: int | None = None, body: str | None = None, attempts: int = 1):
        self.status = status
        self.body = body
        self.attempts = attempts
        super().__init__(message)


class MockPromptError(BackendError):
    """The mock could not recognize the prompt as a reasoning, extraction or direct prompt."""


class TransientHTTPError(Exception):
    """Retryable failure inside the transport (5xx, 429, connection reset, timeout)."""


@dataclass(frozen=True)
class BackendConfig:
    kind: str
    model_name: str
    base_url: str | None = None
    temperature: float = 0.0
    max_tokens: int = 1024
    request_timeout: float = 120.0
    max_retries: int = 3
    auth_token_env: str | None = DEFAULT_TOKEN_ENV
    backoff_base: float = 0.5
    # mock only: score perturbation in [-noise_level, noise_level], seeded per note
    noise_level: int = 0
    seed: int = 0

    def problems(self) -> list[str]:
        out = []
        if self.kind not in ("http_chat", "mock"):
            out.append(f"kind must be 'http_chat' or 'mock', got {self.kind!r}")
        if self.kind == "http_chat" and not self.base_url:
            out.append("http_chat backend requires base_url")
        if not self.model_name:
            out.append("model_name is required")
        if not (isinstance(self.temperature, (int, float)) and 0 <= self.temperature < float("inf")):
            out.append(f"temperature must be finite and >= 0, got {self.temperature!r}")
        if not isinstance(self.max_tokens, int) or self.max_tokens < 1:
            out.append(f"max_tokens must be an integer >= 1, got {self.max_tokens!r}")
        if self.max_retries < 0:
            out.append("max_retries must be >= 0")
        if self.request_timeout <= 0:
            out.append("request_timeout must be > 0")
        if self.noise_level not in (0, 1, 2):
            out.append("noise_level must be 0, 1 or 2")
        return out

    def validate(self) -> "BackendConfig":
        problems = self.problems()
        if problems:
            raise ValueError("; ".join(problems))
        return self

    def snapshot(self) -> dict[str, Any]:
        """Config as a dict; only the *name* of the token variable is ever recorded."""
        return asdict(self)

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "BackendConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown backend config keys: {sorted(unknown)}")
        return cls(**dict(data))


@dataclass(frozen=True)
class Message:
    role: str
    content: str

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")


@dataclass(frozen=True)
class ChatRequest:
    messages: tuple[Message, ...]
    params: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.messages:
            raise ValueError("a chat request needs at least one message")
        if self.messages[-1].role != "user":
            raise ValueError("the last message must have role 'user'")

    @classmethod
    def user(cls, content: str, **params: Any) -> "ChatRequest":
        return cls((Message("user", content),), params)

    def with_params(self, **params: Any) -> "ChatRequest":
        return replace(self, params={**self.params, **params})

    @property
    def text(self) -> str:
        return "\n\n".join(m.content for m in self.messages)

    def wire_messages(self) -> list[dict[str, str]]:
        return [{"role": m.role, "content": m.content} for m in self.messages]


@dataclass(frozen=True)
class ChatResponse:
    content: str
    latency: float
    attempt: int
    from_cache: bool = False


def effective_params(config: BackendConfig, request: ChatRequest) -> tuple[float, int]:
    temperature = float(request.params.get("temperature", config.temperature))
    max_tokens = int(request.params.get("max_tokens", config.max_tokens))
    return temperature, max_tokens


def cache_key(config: BackendConfig, request: ChatRequest) -> str:
    """Hex SHA-256 digest identifying a completion request."""
    temperature, max_tokens = effective_params(config, request)
    payload: dict[str, Any] = {
        "kind": config.kind,
        "model_name": config.model_name,
        "messages": request.wire_messages(),
        "temperature": temperature,
        "max_tokens": max_tokens,
    }
    if config.kind == "mock":
        # the mock's output also depends on its noise settings
        payload["mock"] = {"noise_level": config.noise_level, "seed": config.seed}
    return sha256_text(canonical_json(payload))


class ResponseCache:
    """Content-addressed completions on disk: ``<digest>.txt`` plus ``<digest>.meta.json``.

    Writes go through a temp file and ``os.replace``, so concurrent writers of
    the same key leave exactly one intact entry.
    """

    def __init__(self, directory: str | os.PathLike):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    def _paths(self, key: str) -> tuple[Path, Path]:
        if not re.fullmatch(r"[0-9a-f]{16,128}", key):
            raise ValueError(f"malformed cache key {key!r}")
        return self.directory / f"{key}.txt", self.directory / f"{key}.meta.json"

    def lookup(self, key: str) -> str | None:
        text_path, _ = self._paths(key)
        try:
            return text_path.read_text(encoding="utf-8")
        except FileNotFoundError:
            return None

    def store(self, key: str, value: str, meta: Mapping[str, Any] | None = None) -> None:
        text_path, meta_path = self._paths(key)
        record = {"stored_at": datetime.now(timezone.utc).isoformat(timespec="seconds"), **(meta or {})}
        atomic_write_text(meta_path, dump_json(record))
        atomic_write_text(text_path, value)

    def __contains__(self, key: str) -> bool:
        return self._paths(key)[0].exists()

    def __len__(self) -> int:
        return sum(1 for _ in self.directory.glob("*.txt"))


# ---------------------------------------------------------------------------
# HTTP transport

# (url, json_body, headers, timeout) -> (status, body_text)
Transport = Callable[[str, Mapping[str, Any], Mapping[str, str], float], tuple[int, str]]


def requests_transport(url: str, body: Mapping[str, Any], headers: Mapping[str, str], timeout: float) -> tuple[int, str]:
    import requests

    try:
        resp = requests.post(url, json=body, headers=dict(headers), timeout=timeout)
    except (requests.ConnectionError, requests.Timeout) as exc:
        raise TransientHTTPError(f"{type(exc).__name__}: {exc}") from exc
    return resp.status_code, resp.text


def _is_retryable(status: int) -> bool:
    return status == 429 or status >= 500


def _parse_envelope(body: str) -> str:
    try:
        content = json.loads(body)["choices"][0]["message"]["content"]
    except (ValueError, KeyError, IndexError, TypeError) as exc:
        raise BackendError(f"malformed response envelope: {exc!r}", body=body[:2000]) from exc
    if not isinstance(content, str):
        raise BackendError("response content is not a string", body=body[:2000])
    return content


def http_complete(
    config: BackendConfig,
    request: ChatRequest,
    transport: Transport | None = None,
    sleep: Callable[[float], None] = time.sleep,
) -> tuple[str, int]:
    """POST to ``{base_url}/v1/chat/completions``; returns (content, attempts used)."""
    transport = transport or requests_transport
    temperature, max_tokens = effective_params(config, request)
    url = config.base_url.rstrip("/") + "/v1/chat/completions"
    body = {
        "model": config.model_name,
        "messages": request.wire_messages(),
        "temperature": temperature,
        "max_tokens": max_tokens,
    }
    headers = {"Content-Type": "application/json"}
    token = os.environ.get(config.auth_token_env) if config.auth_token_env else None
    if token:
        headers["Authorization"] = f"Bearer {token}"

    last_error = ""
    for attempt in range(1, config.max_retries + 2):
        try:
            status, text = transport(url, body, headers, config.request_timeout)
        except TransientHTTPError as exc:
            last_error = str(exc)
        else:
            if 200 <= status < 300:
                return _parse_envelope(text), attempt
            if not _is_retryable(status):
                raise BackendError(f"HTTP {status} from {url}: {text[:500]}", status=status, body=text, attempts=attempt)
            last_error = f"HTTP {status}: {text[:500]}"
        if attempt <= config.max_retries:
            delay = config.backoff_base * 2 ** (attempt - 1)
            logger.warning("attempt %d/%d failed (%s); retrying in %.2fs", attempt, config.max_retries + 1, last_error, delay)
            sleep(delay)
    raise BackendError(
        f"giving up after {config.max_retries + 1} attempts: {last_error}", attempts=config.max_retries + 1
    )


# ---------------------------------------------------------------------------
# mock


def _mock_offset(note_text: str, noise_level: int, seed: int) -> int:
    if noise_level == 0:
        return 0
    digest = sha256_text(f"{seed}:{note_text}")
    return int(digest[:8], 16) % (2 * noise_level + 1) - noise_level


def mock_complete(request: ChatRequest, noise_level: int = 0, seed: int = 0) -> str:
    """Deterministic stand-in for both model roles on synthetic notes.

    * extraction prompt (contains mock reasoning): returns the score stated in it
    * reasoning prompt (asks for a rationale over a synthetic note): returns a
      short rationale restating the note's variables and the oracle score
    * direct prompt (asks for a single integer over a synthetic note): returns
      the score as a bare integer
    """
    from .features import extract_features
    from .synth import oracle_from

    text = request.text
    m = re.search(re.escape(MOCK_SIGNATURE) + r"\s+(\d)\b", text)
    if m:
        return m.group(1)

    f = extract_features(text)
    if f.nihss_discharge is None or f.age_years is None:
        raise MockPromptError("mock backend: prompt contains neither mock reasoning nor a synthetic note")
    score = oracle_from(f.nihss_discharge, f.age_years)
    score = min(max(score + _mock_offset(text, noise_level, seed), 0), 6)

    lowered = text.lower()
    if "rationale" not in lowered:
        if "single integer" in lowered:
            return str(score)
        raise MockPromptError("mock backend: prompt asks for neither a rationale nor a single integer")

    cues = [f"Age {int(f.age_years)} years"]
    if f.nihss_baseline is not None:
        cues.append(f"baseline NIHSS {f.nihss_baseline}")
    cues.append(f"discharge NIHSS {f.nihss_discharge}")
    if f.evt is not None:
        cues.append("treated with thrombectomy" if f.evt else "no thrombectomy")
    if f.discharge_destination is not None:
        cues.append(f"discharge destination {f.discharge_destination.replace('_', ' ')}")
    return (
        "Key clinical cues: " + "; ".join(cues) + ".\n"
        "Reasoning: residual deficit at discharge is the dominant predictor, adjusted for age.\n"
        f"Prognosis: the {MOCK_SIGNATURE} {score}."
    )


# ---------------------------------------------------------------------------
# facade


class Backend:
    """A configured endpoint plus optional cache; ``complete`` is safe to call from many threads."""

    def __init__(
        self,
        config: BackendConfig,
        cache: ResponseCache | None = None,
        transport: Transport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.config = config.validate()
        self.cache = cache
        self.transport = transport
        self.sleep = sleep

    @property
    def model_name(self) -> str:
        return self.config.model_name

    def complete(self, request: ChatRequest) -> ChatResponse:
        return complete_chat(self.config, request, cache=self.cache, transport=self.transport, sleep=self.sleep)


def complete_chat(
    config: BackendConfig,
    request: ChatRequest,
    cache: ResponseCache | None = None,
    transport: Transport | None = None,
    sleep: Callable[[float], None] = time.sleep,
) -> ChatResponse:
    """Return the first choice's content for ``request``, consulting ``cache`` before any network call."""
    key = cache_key(config, request) if cache is not None else None
    if key is not None:
        hit = cache.lookup(key)
        if hit is not None:
            return ChatResponse(hit, 0.0, attempt=1, from_cache=True)

    start = time.perf_counter()
    if config.kind == "mock":
        content, attempt = mock_complete(request, config.noise_level, config.seed), 1
    elif config.kind == "http_chat":
        content, attempt = http_complete(config, request, transport=transport, sleep=sleep)
    else:
        raise BackendError(f"unknown backend kind {config.kind!r}")
    latency = time.perf_counter() - start

    if key is not None:
        temperature, max_tokens = effective_params(config, request)
        cache.store(
            key,
            content,
            {
                "kind": config.kind,
                "model_name": config.model_name,
                "temperature": temperature,
                "max_tokens": max_tokens,
                "messages": request.wire_messages(),
            },
        )
    return ChatResponse(content, latency, attempt=attempt, from_cache=False)


def redact(snapshot: Mapping[str, Any]) -> dict[str, Any]:
    """Drop anything that looks like a secret value from a config snapshot."""
    out = {}
    for k, v in snapshot.items():
        if re.search(r"(token|key|secret|password)", k, re.I) and not k.endswith("_env"):
            out[k] = "***"
        else:
            out[k] = v
    return out
