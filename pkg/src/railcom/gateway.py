"""Client for OpenAI-compatible multimodal chat endpoints, plus a scripted mock."""

from __future__ import annotations

import base64
import json
import logging
import mimetypes
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import httpx

from .prompting import ImagePart, PromptBundle, TextPart

log = logging.getLogger(__name__)

ENV_API_KEY = "RAILCOM_API_KEY"
ENV_BASE_URL = "RAILCOM_BASE_URL"
MOCK_DEFAULT_KEY = "*"


class GatewayError(RuntimeError):
    pass


class GatewayTransportError(GatewayError):
    def __init__(self, message: str, attempts: int):
        super().__init__(message)
        self.attempts = attempts


class GatewayRequestError(GatewayError):
    def __init__(self, status: int, body: str):
        super().__init__(f"HTTP {status}: {body[:500]}")
        self.status = status
        self.body = body


class GatewayProtocolError(GatewayError):
    pass


@dataclass(frozen=True)
class BackendConfig:
    base_url: str = "http://localhost:8000/v1"
    api_key: str | None = field(default=None, repr=False)
    model_name: str = "default"
    timeout_ms: int = 120_000
    max_retries: int = 2
    max_in_flight: int = 4
    mode: str = "remote"
    temperature: float | None = 0.0
    max_tokens: int | None = None
    backoff_ms: int = 500
    backoff_max_ms: int = 8_000

    def __post_init__(self) -> None:
        if self.timeout_ms <= 0:
            raise ValueError("timeout_ms must be > 0")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")
        if self.mode not in ("remote", "mock"):
            raise ValueError(f"unknown backend mode {self.mode!r}")

    def with_env(self, env: Mapping[str, str] | None = None) -> "BackendConfig":
        env = os.environ if env is None else env
        kw: dict[str, Any] = {}
        if env.get(ENV_API_KEY):
            kw["api_key"] = env[ENV_API_KEY]
        if env.get(ENV_BASE_URL):
            kw["base_url"] = env[ENV_BASE_URL]
        return replace(self, **kw) if kw else self


@dataclass(frozen=True)
class LmmResult:
    text: str
    prompt_tokens: int
    completion_tokens: int
    latency_ms: float
    attempt_count: int = 1
    estimated: bool = False


def estimate_tokens(text: str) -> int:
    return len(text.split())


def image_url(ref: str) -> str:
    """Local files become base64 data URIs; anything else passes as a URL."""
    path = Path(ref)
    if "://" not in ref and not ref.startswith("data:") and path.is_file():
        mime = mimetypes.guess_type(path.name)[0] or "application/octet-stream"
        data = base64.b64encode(path.read_bytes()).decode("ascii")
        return f"data:{mime};base64,{data}"
    return ref


def bundle_to_messages(b: PromptBundle) -> list[dict[str, Any]]:
    content: list[dict[str, Any]] = []
    for p in b.user_parts:
        if isinstance(p, TextPart):
            content.append({"type": "text", "text": p.text})
        elif isinstance(p, ImagePart):
            if p.ref is None:
                content.append({"type": "text", "text": p.placeholder})
            else:
                content.append({"type": "text", "text": p.label})
                content.append({"type": "image_url", "image_url": {"url": image_url(p.ref)}})
    return [
        {"role": "system", "content": b.system_text},
        {"role": "user", "content": content},
    ]


def request_body(b: PromptBundle, cfg: BackendConfig) -> dict[str, Any]:
    body: dict[str, Any] = {"model": cfg.model_name, "messages": bundle_to_messages(b)}
    if cfg.temperature is not None:
        body["temperature"] = cfg.temperature
    if cfg.max_tokens is not None:
        body["max_tokens"] = cfg.max_tokens
    return body


@dataclass(frozen=True)
class MockEntry:
    text: str
    completion_tokens: int
    latency_ms: int
    prompt_tokens: int = 0


def load_mock_script(source: str | Path | Mapping[str, Any]) -> dict[str, MockEntry]:
    """Mock script: scenario id -> {"text", "completion_tokens", "latency_ms"}.

    A ``"*"`` entry answers any scenario not listed.
    """
    obj = json.loads(Path(source).read_text(encoding="utf-8")) if not isinstance(source, Mapping) else source
    if not isinstance(obj, Mapping):
        raise GatewayProtocolError("mock script must be a JSON object")
    out = {}
    for key, entry in obj.items():
        try:
            out[key] = MockEntry(
                str(entry["text"]),
                int(entry["completion_tokens"]),
                int(entry["latency_ms"]),
                int(entry.get("prompt_tokens", 0)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise GatewayProtocolError(f"mock entry {key!r} malformed: {exc}") from None
    return out


class Gateway:
    """Shared, thread-safe access to one backend.

    At most ``max_in_flight`` requests are outstanding at any time. Remote
    calls retry transport failures and 5xx responses with capped
    exponential backoff; 4xx responses fail immediately.
    """

    def __init__(
        self,
        cfg: BackendConfig,
        *,
        mock_script: Mapping[str, MockEntry] | None = None,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
        mock_sleep: bool = False,
    ):
        if cfg.mode == "mock" and mock_script is None:
            raise GatewayError("mock mode needs a response script")
        self.cfg = cfg
        self.mock_script = dict(mock_script or {})
        self._sleep = sleep
        self._mock_sleep = mock_sleep
        self._sem = threading.BoundedSemaphore(cfg.max_in_flight)
        self._lock = threading.Lock()
        self.in_flight = 0
        self.peak_in_flight = 0
        self.calls = 0
        self._client: httpx.Client | None = None
        self._transport = transport

    def _client_for(self) -> httpx.Client:
        with self._lock:
            return self._client or self._open_client()

    def _open_client(self) -> httpx.Client:
        if self._client is None:
            headers = {"Content-Type": "application/json"}
            if self.cfg.api_key:
                headers["Authorization"] = f"Bearer {self.cfg.api_key}"
            self._client = httpx.Client(
                base_url=self.cfg.base_url.rstrip("/"),
                headers=headers,
                timeout=self.cfg.timeout_ms / 1000.0,
                transport=self._transport,
            )
        return self._client

    def close(self) -> None:
        if self._client is not None:
            self._client.close()
            self._client = None

    def __enter__(self) -> "Gateway":
        return self

    def __exit__(self, *exc: Any) -> None:
        self.close()

    def complete(self, b: PromptBundle) -> LmmResult:
        with self._sem:
            with self._lock:
                self.in_flight += 1
                self.calls += 1
                self.peak_in_flight = max(self.peak_in_flight, self.in_flight)
            try:
                if self.cfg.mode == "mock":
                    return self._mock(b)
                return self._remote(b)
            finally:
                with self._lock:
                    self.in_flight -= 1

    def complete_many(self, bundles: Sequence[PromptBundle], jobs: int | None = None) -> list[LmmResult | GatewayError]:
        """Run bundles concurrently; results keep input order, failures stay per item."""

        def one(b: PromptBundle) -> LmmResult | GatewayError:
            try:
                return self.complete(b)
            except GatewayError as exc:
                return exc

        workers = jobs or self.cfg.max_in_flight
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(one, bundles))

    def _mock(self, b: PromptBundle) -> LmmResult:
        entry = self.mock_script.get(b.scenario_id) or self.mock_script.get(MOCK_DEFAULT_KEY)
        if entry is None:
            raise GatewayProtocolError(f"mock script has no entry for scenario {b.scenario_id!r}")
        if self._mock_sleep:
            self._sleep(entry.latency_ms / 1000.0)
        return LmmResult(entry.text, entry.prompt_tokens, entry.completion_tokens, float(entry.latency_ms), 1)

    def _remote(self, b: PromptBundle) -> LmmResult:
        body = request_body(b, self.cfg)
        client = self._client_for()
        t0 = time.perf_counter()
        attempts = 0
        last_err = ""
        while True:
            attempts += 1
            try:
                resp = client.post("/chat/completions", json=body)
            except httpx.HTTPError as exc:
                last_err = f"{type(exc).__name__}: {exc}"
            else:
                if resp.status_code < 400:
                    latency = (time.perf_counter() - t0) * 1000.0
                    return self._decode(resp, latency, attempts)
                if resp.status_code < 500:
                    raise GatewayRequestError(resp.status_code, resp.text)
                last_err = f"HTTP {resp.status_code}"
            if attempts > self.cfg.max_retries:
                raise GatewayTransportError(f"gave up after {attempts} attempt(s): {last_err}", attempts)
            delay = min(self.cfg.backoff_ms * 2 ** (attempts - 1), self.cfg.backoff_max_ms) / 1000.0
            log.warning("chat request failed (%s); retry %d in %.2fs", last_err, attempts, delay)
            self._sleep(delay)

    @staticmethod
    def _decode(resp: httpx.Response, latency: float, attempts: int) -> LmmResult:
        try:
            data = resp.json()
            text = data["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError):
            raise GatewayProtocolError(f"response lacks choices[0].message.content: {resp.text[:300]}") from None
        if not isinstance(text, str):
            raise GatewayProtocolError("completion content is not a string")
        usage = data.get("usage") or {}
        ct, pt = usage.get("completion_tokens"), usage.get("prompt_tokens")
        estimated = not isinstance(ct, int)
        if estimated:
            ct = estimate_tokens(text)
        return LmmResult(text, pt if isinstance(pt, int) else 0, ct, latency, attempts, estimated)
