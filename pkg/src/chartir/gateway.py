"""Uniform chat-completion gateway over remote multimodal endpoints and a scripted mock.

Five pipeline roles plus the judge share one request shape. The remote
backend speaks the OpenAI-compatible chat-completions wire format with
base64-embedded PNGs; the mock backend replays a scripted playbook and makes
the whole pipeline deterministic offline.
"""

from __future__ import annotations

import base64
import json
import logging
import os
import re
import time
from dataclasses import dataclass, field
from pathlib import Path

import requests

from .images import ChartImage

log = logging.getLogger(__name__)

# Number of input images each role expects, in request order. For two-image
# roles, index 0 is always the reference and index 1 the generated chart.
ROLE_IMAGE_ARITY: dict[str, int] = {
    "describer": 1,
    "coder": 1,
    "differ": 2,
    "refiner": 2,
    "debugger": 0,
    "judge": 2,
}

ENV_API_KEY = "CHARTIR_API_KEY"
ENV_API_BASE = "CHARTIR_API_BASE"
ENV_MODEL = "CHARTIR_MODEL"


class GatewayError(Exception):
    """Base class for completion failures."""


class TransportError(GatewayError):
    def __init__(self, status: int | None, message: str = "") -> None:
        super().__init__(f"transport failure (status={status}): {message}")
        self.status = status


class AuthError(GatewayError):
    pass


class RateLimitedError(GatewayError):
    def __init__(self, retry_after: float | None) -> None:
        super().__init__(f"rate limited (retry_after={retry_after})")
        self.retry_after = retry_after


class PlaybookExhausted(GatewayError):
    pass


class PlaybookMismatch(GatewayError):
    pass


class RoleArityMismatch(GatewayError):
    pass


class EmptyExtraction(ValueError):
    """No code content could be extracted from a model response."""


class NoRating(ValueError):
    """No ``Rating: [[n]]`` pattern found in a judge response."""


class OutOfRange(ValueError):
    def __init__(self, rating: int, minimum: int, maximum: int) -> None:
        super().__init__(f"rating {rating} outside [{minimum}, {maximum}]")
        self.rating = rating


@dataclass(frozen=True)
class Sampling:
    temperature: float
    max_tokens: int

    def __post_init__(self) -> None:
        if self.temperature < 0.0:
            raise ValueError("temperature must be >= 0")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be positive")


def default_sampling(role_id: str) -> Sampling:
    """Per-role defaults: independent judge samples, long outputs for code roles."""
    temperature = 1.0 if role_id == "judge" else 0.2
    max_tokens = 4096 if role_id in ("coder", "refiner", "debugger") else 1024
    return Sampling(temperature=temperature, max_tokens=max_tokens)


@dataclass(frozen=True)
class Usage:
    prompt_tokens: int = 0
    completion_tokens: int = 0

    def __post_init__(self) -> None:
        if self.prompt_tokens < 0 or self.completion_tokens < 0:
            raise ValueError("token counts must be non-negative")


@dataclass(frozen=True)
class ChatRequest:
    role_id: str
    prompt: str
    images: tuple[ChartImage, ...] = ()
    sampling: Sampling | None = None

    def __post_init__(self) -> None:
        if self.role_id not in ROLE_IMAGE_ARITY:
            raise ValueError(f"unknown role '{self.role_id}'")
        if not 0 <= len(self.images) <= 2:
            raise ValueError("requests carry at most two images")
        if self.sampling is None:
            object.__setattr__(self, "sampling", default_sampling(self.role_id))


@dataclass(frozen=True)
class ChatResponse:
    text: str
    usage: Usage = Usage()


@dataclass(frozen=True)
class PlaybookEntry:
    expect_role: str
    response: str


@dataclass
class MockPlaybook:
    """Scripted responses consumed strictly in order; running out is an error."""

    entries: list[PlaybookEntry]
    _cursor: int = field(default=0, repr=False)

    @classmethod
    def from_jsonl(cls, path: str | Path) -> "MockPlaybook":
        entries = []
        for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            obj = json.loads(line)
            try:
                entries.append(PlaybookEntry(obj["expect_role"], obj["response"]))
            except (KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{line_no}: bad playbook entry") from exc
        return cls(entries)

    def next_entry(self, role_id: str) -> PlaybookEntry:
        if self._cursor >= len(self.entries):
            raise PlaybookExhausted(
                f"playbook exhausted after {len(self.entries)} entries (wanted {role_id})"
            )
        entry = self.entries[self._cursor]
        if entry.expect_role != role_id:
            raise PlaybookMismatch(
                f"playbook entry {self._cursor} expects role "
                f"'{entry.expect_role}', request was '{role_id}'"
            )
        self._cursor += 1
        return entry

    @property
    def remaining(self) -> int:
        return len(self.entries) - self._cursor


class MockBackend:
    """Offline backend replaying a per-session playbook."""

    def __init__(self, playbook: MockPlaybook) -> None:
        self.playbook = playbook

    def complete(self, request: ChatRequest) -> ChatResponse:
        entry = self.playbook.next_entry(request.role_id)
        return ChatResponse(text=entry.response)


def _image_part(image: ChartImage) -> dict:
    encoded = base64.b64encode(image.to_png_bytes()).decode("ascii")
    return {"type": "image_url", "image_url": {"url": f"data:image/png;base64,{encoded}"}}


class OpenAIBackend:
    """OpenAI-compatible chat-completions client with bounded retry.

    Transient transport failures (connection errors, 5xx, 429) are retried
    with exponential backoff; authentication and other 4xx responses are
    surfaced immediately.
    """

    def __init__(
        self,
        base_url: str,
        api_key: str,
        model_for_role: dict[str, str],
        *,
        max_retries: int = 3,
        backoff_base: float = 0.5,
        timeout: float = 120.0,
        session: requests.Session | None = None,
        sleep=time.sleep,
    ) -> None:
        if not api_key:
            raise AuthError("missing API key")
        self.base_url = base_url.rstrip("/")
        self.api_key = api_key
        self.model_for_role = model_for_role
        self.max_retries = max_retries
        self.backoff_base = backoff_base
        self.timeout = timeout
        self._session = session or requests.Session()
        self._sleep = sleep

    @classmethod
    def from_env(
        cls,
        env: dict | None = None,
        model_overrides: dict[str, str] | None = None,
        **kwargs,
    ) -> "OpenAIBackend":
        """Build from CHARTIR_API_KEY / CHARTIR_API_BASE / CHARTIR_MODEL[_<ROLE>].

        ``model_overrides`` (e.g. from a run config file) beats the env vars.
        """
        env = dict(os.environ if env is None else env)
        api_key = env.get(ENV_API_KEY, "")
        base_url = env.get(ENV_API_BASE, "")
        if not api_key:
            raise AuthError(f"{ENV_API_KEY} is not set")
        if not base_url:
            raise ValueError(f"{ENV_API_BASE} is not set")
        default_model = env.get(ENV_MODEL, "")
        overrides = model_overrides or {}
        models = {}
        for role in ROLE_IMAGE_ARITY:
            models[role] = overrides.get(
                role, env.get(f"{ENV_MODEL}_{role.upper()}", default_model)
            )
        if not all(models.values()):
            raise ValueError(f"{ENV_MODEL} (or per-role overrides) must be set")
        return cls(base_url, api_key, models, **kwargs)

    def _post(self, payload: dict) -> requests.Response:
        return self._session.post(
            f"{self.base_url}/chat/completions",
            headers={"Authorization": f"Bearer {self.api_key}"},
            json=payload,
            timeout=self.timeout,
        )

    def complete(self, request: ChatRequest) -> ChatResponse:
        content: list[dict] = [{"type": "text", "text": request.prompt}]
        content.extend(_image_part(img) for img in request.images)
        payload = {
            "model": self.model_for_role.get(request.role_id, ""),
            "messages": [{"role": "user", "content": content}],
            "temperature": request.sampling.temperature,
            "max_tokens": request.sampling.max_tokens,
        }
        attempt = 0
        while True:
            retry_after: float | None = None
            try:
                resp = self._post(payload)
                status = resp.status_code
            except requests.RequestException as exc:
                status = None
                failure: GatewayError = TransportError(None, str(exc))
            else:
                if status in (401, 403):
                    raise AuthError(f"authentication rejected (status={status})")
                if status == 429:
                    header = resp.headers.get("Retry-After")
                    retry_after = float(header) if header else None
                    failure = RateLimitedError(retry_after)
                elif status >= 500:
                    failure = TransportError(status, resp.text[:200])
                elif status >= 400:
                    # Content-policy and other client errors: never retried.
                    raise TransportError(status, resp.text[:200])
                else:
                    return self._parse_success(resp)
            if attempt >= self.max_retries:
                raise failure
            delay = retry_after if retry_after is not None else self.backoff_base * (2**attempt)
            log.warning("retrying %s request in %.1fs: %s", request.role_id, delay, failure)
            self._sleep(delay)
            attempt += 1

    def _parse_success(self, resp: requests.Response) -> ChatResponse:
        try:
            body = resp.json()
            text = body["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise TransportError(resp.status_code, f"malformed response body: {exc}")
        if not text:
            raise TransportError(resp.status_code, "provider returned empty completion")
        usage = body.get("usage") or {}
        return ChatResponse(
            text=text,
            usage=Usage(
                prompt_tokens=int(usage.get("prompt_tokens", 0)),
                completion_tokens=int(usage.get("completion_tokens", 0)),
            ),
        )


class ModelGateway:
    """Role-aware completion front end; shareable across concurrent sessions.

    Every request/response pair is appended to the supplied session
    transcript before ``complete`` returns.
    """

    def __init__(self, backend) -> None:
        self._backend = backend

    def complete(self, request: ChatRequest, transcript=None) -> ChatResponse:
        if not request.prompt or not request.prompt.strip():
            raise ValueError("prompt must be non-empty")
        expected = ROLE_IMAGE_ARITY[request.role_id]
        if len(request.images) != expected:
            raise RoleArityMismatch(
                f"role '{request.role_id}' takes {expected} image(s), "
                f"got {len(request.images)}"
            )
        if transcript is not None:
            transcript.record(
                "prompt",
                {"role": request.role_id, "text": request.prompt, "images": len(request.images)},
            )
        response = self._backend.complete(request)
        if transcript is not None:
            transcript.record(
                "response",
                {
                    "role": request.role_id,
                    "text": response.text,
                    "usage": {
                        "prompt_tokens": response.usage.prompt_tokens,
                        "completion_tokens": response.usage.completion_tokens,
                    },
                },
            )
        return response


_FENCE = re.compile(r"```[^\n]*\n(.*?)```", re.DOTALL)


def extract_code_block(response_text: str) -> str:
    """Contents of the first fenced code block, or the whole text trimmed.

    Fence markers are never part of the result; a blank extraction is an error.
    """
    match = _FENCE.search(response_text)
    candidate = match.group(1) if match else response_text
    result = candidate.strip()
    if not result:
        raise EmptyExtraction("no code content in response")
    return result


_RATING = re.compile(r"Rating: \[\[(-?\d+)\]\]")


def parse_rating(response_text: str, *, minimum: int = 1, maximum: int = 10) -> int:
    """Integer n from the last ``Rating: [[n]]`` occurrence, bounds-checked."""
    matches = _RATING.findall(response_text)
    if not matches:
        raise NoRating(f"no rating pattern in: {response_text[:120]!r}")
    rating = int(matches[-1])
    if not minimum <= rating <= maximum:
        raise OutOfRange(rating, minimum, maximum)
    return rating
