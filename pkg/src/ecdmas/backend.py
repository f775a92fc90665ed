"""Text and image generation backends.

``HttpChatBackend`` speaks any chat-completion style HTTP API. The request
body is rendered from a JSON template whose string leaves may contain
``{{placeholder}}`` markers, so a different vendor only needs a different
template in the config file. ``MockBackend`` (see :mod:`ecdmas.mock`) is
the deterministic stand-in used by tests and offline runs.
"""

from __future__ import annotations

import base64
import copy
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Protocol, Sequence

import httpx

from ._fs import atomic_write

log = logging.getLogger(__name__)

LLM_KEY_ENV = "ECD_LLM_API_KEY"
IMAGE_KEY_ENV = "ECD_IMAGE_API_KEY"

# retries on transient failures: 2 extra attempts, waits before each
RETRY_BACKOFF_S: tuple[float, ...] = (0.25, 1.0)

DEFAULT_CHAT_TEMPLATE: dict[str, Any] = {
    "model": "{{model}}",
    "messages": [
        {"role": "system", "content": "{{system_prompt}}"},
        {"role": "user", "content": "{{user_prompt}}"},
    ],
    "temperature": "{{temperature}}",
}
DEFAULT_RESPONSE_PATH: tuple[str | int, ...] = ("choices", 0, "message", "content")
DEFAULT_IMAGE_TEMPLATE: dict[str, Any] = {"prompt": "{{prompt}}"}


class BackendError(RuntimeError):
    pass


class TransportError(BackendError):
    """Network failure or timeout that survived the retry policy."""


class RemoteError(BackendError):
    def __init__(self, status: int, body_excerpt: str):
        self.status = status
        self.body_excerpt = body_excerpt
        super().__init__(f"remote returned HTTP {status}: {body_excerpt}")


class EmptyCompletion(BackendError):
    pass


@dataclass(frozen=True)
class GenerationRequest:
    system_prompt: str
    user_prompt: str
    stage_label: str
    temperature: float = 0.7
    max_output_chars: int = 20_000

    def __post_init__(self):
        if not self.system_prompt.strip() or not self.user_prompt.strip():
            raise ValueError("prompts must be non-empty")
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError(f"temperature {self.temperature} outside [0, 2]")
        if self.max_output_chars <= 0:
            raise ValueError("max_output_chars must be positive")


@dataclass(frozen=True)
class GenerationResponse:
    text: str
    backend_label: str
    latency_ms: int = 0


@dataclass(frozen=True)
class ImageResult:
    prompt_path: Path
    asset_path: Path | None = None


class TextBackend(Protocol):
    label: str

    def generate(self, request: GenerationRequest) -> GenerationResponse: ...


class ImageBackend(Protocol):
    def generate_image(self, prompt: str, *, bundle_id: str, output_dir: Path) -> ImageResult: ...


# --------------------------------------------------------------------------
# request templating
# --------------------------------------------------------------------------

_PLACEHOLDER = re.compile(r"\{\{\s*([a-z_]+)\s*\}\}")


def render_template(template: Any, values: dict[str, Any]) -> Any:
    """Substitute ``{{name}}`` markers in every string leaf of a JSON template.

    A leaf that is exactly one marker takes the value with its native JSON
    type (so ``"{{temperature}}"`` becomes a number); markers embedded in
    longer strings are substituted as text.
    """
    if isinstance(template, dict):
        return {k: render_template(v, values) for k, v in template.items()}
    if isinstance(template, list):
        return [render_template(v, values) for v in template]
    if not isinstance(template, str):
        return copy.deepcopy(template)
    whole = _PLACEHOLDER.fullmatch(template)
    if whole:
        return values[_known(whole.group(1), values)]
    return _PLACEHOLDER.sub(lambda m: str(values[_known(m.group(1), values)]), template)


def _known(name: str, values: dict[str, Any]) -> str:
    if name not in values:
        raise ValueError(f"request template uses unknown placeholder {{{{{name}}}}}")
    return name


def _dig(payload: Any, path: Sequence[str | int]) -> Any:
    cur = payload
    for step in path:
        try:
            cur = cur[step]
        except (KeyError, IndexError, TypeError):
            return None
    return cur


# --------------------------------------------------------------------------
# HTTP transport with retry
# --------------------------------------------------------------------------


class _HttpPoster:
    def __init__(self, endpoint: str, api_key: str | None, timeout: float,
                 backoff: Sequence[float], sleep: Callable[[float], None],
                 client: httpx.Client | None):
        self.endpoint = endpoint
        self._api_key = api_key
        self.backoff = tuple(backoff)
        self._sleep = sleep
        self._client = client or httpx.Client(timeout=timeout)

    def post(self, body: Any) -> httpx.Response:
        headers = {"Content-Type": "application/json"}
        if self._api_key:
            headers["Authorization"] = f"Bearer {self._api_key}"
        max_tries = len(self.backoff) + 1
        for attempt in range(max_tries):
            if attempt:
                self._sleep(self.backoff[attempt - 1])
            last = attempt == max_tries - 1
            try:
                resp = self._client.post(self.endpoint, json=body, headers=headers)
            except (httpx.TimeoutException, httpx.NetworkError, httpx.RemoteProtocolError) as exc:
                log.warning("transport failure on %s (try %d/%d): %s",
                            self.endpoint, attempt + 1, max_tries, type(exc).__name__)
                if last:
                    raise TransportError(f"{type(exc).__name__}: {exc}") from exc
                continue
            if resp.status_code >= 500 and not last:
                log.warning("HTTP %d from %s (try %d/%d)", resp.status_code, self.endpoint,
                            attempt + 1, max_tries)
                continue
            if not 200 <= resp.status_code < 300:
                raise RemoteError(resp.status_code, resp.text[:500])
            return resp
        raise AssertionError("unreachable")  # pragma: no cover

    def close(self) -> None:
        self._client.close()


class HttpChatBackend:
    """Chat-completion client for any endpoint reachable by one JSON POST."""

    def __init__(
        self,
        endpoint: str,
        model: str,
        *,
        request_template: dict[str, Any] | None = None,
        response_path: Sequence[str | int] = DEFAULT_RESPONSE_PATH,
        api_key: str | None = None,
        timeout: float = 60.0,
        backoff: Sequence[float] = RETRY_BACKOFF_S,
        sleep: Callable[[float], None] = time.sleep,
        client: httpx.Client | None = None,
    ):
        if api_key is None:
            api_key = os.environ.get(LLM_KEY_ENV)
        self.model = model
        self.request_template = request_template or DEFAULT_CHAT_TEMPLATE
        self.response_path = tuple(response_path)
        self.label = f"http:{model}"
        self._http = _HttpPoster(endpoint, api_key, timeout, backoff, sleep, client)

    def generate(self, request: GenerationRequest) -> GenerationResponse:
        body = render_template(self.request_template, {
            "model": self.model,
            "system_prompt": request.system_prompt,
            "user_prompt": request.user_prompt,
            "temperature": request.temperature,
            "max_output_chars": request.max_output_chars,
            "stage_label": request.stage_label,
        })
        t0 = time.monotonic()
        resp = self._http.post(body)
        latency = int((time.monotonic() - t0) * 1000)
        try:
            payload = resp.json()
        except ValueError as exc:
            raise RemoteError(resp.status_code, f"non-JSON body: {resp.text[:200]}") from exc
        text = _dig(payload, self.response_path)
        if not isinstance(text, str) or not text.strip():
            raise EmptyCompletion(f"no completion text at {list(self.response_path)}")
        return GenerationResponse(text=text[: request.max_output_chars],
                                  backend_label=self.label, latency_ms=latency)

    def close(self) -> None:
        self._http.close()


# --------------------------------------------------------------------------
# image backends
# --------------------------------------------------------------------------


def _write_prompt(prompt: str, bundle_id: str, output_dir: Path) -> Path:
    if not prompt.strip():
        raise ValueError("image prompt must be non-empty")
    path = Path(output_dir) / f"{bundle_id}.image-prompt.txt"
    atomic_write(path, prompt.encode("utf-8"))
    return path


class StubImageBackend:
    """Records the image prompt on disk; produces no image."""

    label = "stub"

    def generate_image(self, prompt: str, *, bundle_id: str, output_dir: Path) -> ImageResult:
        return ImageResult(prompt_path=_write_prompt(prompt, bundle_id, output_dir))


class HttpImageBackend:
    """Posts the prompt to an image endpoint and stores the returned PNG."""

    label = "http-image"

    def __init__(
        self,
        endpoint: str,
        *,
        request_template: dict[str, Any] | None = None,
        api_key: str | None = None,
        timeout: float = 120.0,
        backoff: Sequence[float] = RETRY_BACKOFF_S,
        sleep: Callable[[float], None] = time.sleep,
        client: httpx.Client | None = None,
    ):
        if api_key is None:
            api_key = os.environ.get(IMAGE_KEY_ENV)
        self.request_template = request_template or DEFAULT_IMAGE_TEMPLATE
        self._http = _HttpPoster(endpoint, api_key, timeout, backoff, sleep, client)

    def generate_image(self, prompt: str, *, bundle_id: str, output_dir: Path) -> ImageResult:
        prompt_path = _write_prompt(prompt, bundle_id, output_dir)
        resp = self._http.post(render_template(self.request_template, {"prompt": prompt}))
        data = _image_bytes(resp)
        asset = Path(output_dir) / f"{bundle_id}.image.png"
        atomic_write(asset, data)
        return ImageResult(prompt_path=prompt_path, asset_path=asset)

    def close(self) -> None:
        self._http.close()


def _image_bytes(resp: httpx.Response) -> bytes:
    ctype = resp.headers.get("content-type", "")
    if ctype.startswith("image/") or ctype == "application/octet-stream":
        if not resp.content:
            raise RemoteError(resp.status_code, "empty image body")
        return resp.content
    try:
        payload = resp.json()
    except ValueError as exc:
        raise RemoteError(resp.status_code, f"unrecognized image payload ({ctype})") from exc
    for path in (("data", 0, "b64_json"), ("b64_json",), ("image",)):
        encoded = _dig(payload, path)
        if isinstance(encoded, str):
            return base64.b64decode(encoded)
    raise RemoteError(resp.status_code, "image payload carries no base64 data")


# --------------------------------------------------------------------------
# test hook
# --------------------------------------------------------------------------


@dataclass
class RecordingBackend:
    """Wraps a text backend and keeps every request it forwards."""

    inner: TextBackend
    requests: list[GenerationRequest] = field(default_factory=list)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @property
    def label(self) -> str:
        return self.inner.label

    def generate(self, request: GenerationRequest) -> GenerationResponse:
        with self._lock:
            self.requests.append(request)
        return self.inner.generate(request)

    def prompts_for(self, stage: str) -> list[str]:
        return [r.user_prompt for r in self.requests if r.stage_label == stage]
