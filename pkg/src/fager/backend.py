"""Uniform chat-completion backend with live, record, and replay modes.

One wire format (OpenAI-compatible chat completions with image parts) covers
both the text-only and the image-conditioned agent roles. Replay mode serves
responses from a fixture store keyed by a content fingerprint of the request
and never opens a network connection.
"""

from __future__ import annotations

import base64
import hashlib
import json
import os
import threading
import time
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Any, Callable

import httpx
import jsonschema

from .errors import (
    AuthError,
    ConfigError,
    FagerError,
    ImageReadError,
    RateLimitError,
    ReplayMissError,
    StructuredOutputError,
    TransportError,
)
from .model import dumps_canonical


class RoleTag(Enum):
    FACT_PROPOSAL = "fact_proposal"
    REF_EXTRACTION = "ref_extraction"
    VERIFICATION = "verification"
    QA_GENERATION = "qa_generation"
    EVALUATION = "evaluation"


#: Roles served by the vision-language model; the rest use the text-only model.
VLM_ROLES = frozenset({RoleTag.REF_EXTRACTION, RoleTag.EVALUATION})


class BackendMode(Enum):
    LIVE = "live"
    RECORD = "record"
    REPLAY = "replay"


@dataclass(frozen=True)
class ModelRequest:
    role_tag: RoleTag
    system_text: str
    user_text: str
    images: tuple[str, ...] = ()  # local image paths, encoded at transport time
    response_schema_id: str | None = None
    temperature: float = 0.0

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.images and self.role_tag not in VLM_ROLES:
            raise ValueError(f"images not allowed for role {self.role_tag.value}")


@dataclass(frozen=True)
class ModelResponse:
    raw_text: str
    usage: dict[str, int] | None = None
    latency: float = 0.0


Transport = Callable[[ModelRequest, str], str]


def _sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def image_bytes(path: str) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError:
        raise ImageReadError(path) from None


def extract_json_block(text: str) -> Any:
    """Parse JSON from model output, tolerating surrounding prose.

    Tries a direct parse first, then the first balanced JSON object or array
    found in the text. Raises ValueError when no parseable block exists.
    """
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        pass
    decoder = json.JSONDecoder()
    for idx, ch in enumerate(text):
        if ch in "{[":
            try:
                value, _ = decoder.raw_decode(text, idx)
                return value
            except json.JSONDecodeError:
                continue
    raise ValueError("no JSON block found in model output")


def fail_on_network_transport(req: ModelRequest, model: str) -> str:
    """Transport that fails loudly; injected to prove replay does no network I/O."""
    raise AssertionError(f"network transport used in replay mode (role={req.role_tag.value})")


class HttpTransport:
    """OpenAI-compatible chat-completions transport."""

    def __init__(self, base_url: str, api_key: str, timeout: float = 120.0):
        self.base_url = base_url.rstrip("/")
        self.api_key = api_key
        self.timeout = timeout

    def __call__(self, req: ModelRequest, model: str) -> str:
        content: Any
        if req.images:
            parts: list[dict[str, Any]] = [{"type": "text", "text": req.user_text}]
            for path in req.images:
                b64 = base64.b64encode(image_bytes(path)).decode("ascii")
                parts.append(
                    {"type": "image_url", "image_url": {"url": f"data:image/png;base64,{b64}"}}
                )
            content = parts
        else:
            content = req.user_text
        payload = {
            "model": model,
            "temperature": req.temperature,
            "messages": [
                {"role": "system", "content": req.system_text},
                {"role": "user", "content": content},
            ],
        }
        try:
            resp = httpx.post(
                f"{self.base_url}/chat/completions",
                headers={"Authorization": f"Bearer {self.api_key}"},
                json=payload,
                timeout=self.timeout,
            )
        except httpx.HTTPError as exc:
            raise TransportError(str(exc)) from exc
        if resp.status_code in (401, 403):
            raise AuthError(f"authentication failed ({resp.status_code})")
        if resp.status_code == 429:
            raise RateLimitError("rate limited")
        if resp.status_code >= 500:
            raise TransportError(f"server error {resp.status_code}")
        if resp.status_code >= 400:
            raise FagerError(f"request rejected ({resp.status_code}): {resp.text[:500]}")
        data = resp.json()
        return data["choices"][0]["message"]["content"]


class ModelBackend:
    """Shareable handle for all agent model calls.

    In record mode a response is fetched over the transport once and persisted
    to the fixture store; identical later requests are served from the store.
    In replay mode only the store is consulted.
    """

    def __init__(
        self,
        mode: BackendMode,
        llm_model: str,
        vlm_model: str,
        fixture_dir: str | Path | None = None,
        transport: Transport | None = None,
        max_attempts: int = 3,
        backoff_base: float = 0.5,
        max_concurrency: int = 4,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if mode in (BackendMode.RECORD, BackendMode.REPLAY) and fixture_dir is None:
            raise ConfigError(f"{mode.value} mode requires a fixture directory")
        if mode in (BackendMode.LIVE, BackendMode.RECORD) and transport is None:
            raise ConfigError(f"{mode.value} mode requires a transport")
        self.mode = mode
        self.llm_model = llm_model
        self.vlm_model = vlm_model
        self.fixture_dir = Path(fixture_dir) if fixture_dir is not None else None
        self.transport = transport
        self.max_attempts = max_attempts
        self.backoff_base = backoff_base
        self._sleep = sleep
        self._limiter = threading.Semaphore(max_concurrency)

    @classmethod
    def from_env(
        cls, mode: BackendMode, fixture_dir: str | Path | None = None, **kwargs: Any
    ) -> "ModelBackend":
        llm = os.environ.get("FAGER_LLM_MODEL", "gpt-5.4-mini")
        vlm = os.environ.get("FAGER_VLM_MODEL", "qwen3-vl-8b-instruct")
        transport: Transport | None = None
        if mode in (BackendMode.LIVE, BackendMode.RECORD):
            base = os.environ.get("FAGER_API_BASE")
            key = os.environ.get("FAGER_API_KEY")
            if not base or not key:
                raise ConfigError("FAGER_API_BASE and FAGER_API_KEY must be set for live/record mode")
            transport = HttpTransport(base, key)
        return cls(mode, llm, vlm, fixture_dir=fixture_dir, transport=transport, **kwargs)

    def model_for(self, role: RoleTag) -> str:
        return self.vlm_model if role in VLM_ROLES else self.llm_model

    def fingerprint(self, req: ModelRequest) -> str:
        """Stable content hash of the request; keys the fixture store."""
        digest_input = {
            "role_tag": req.role_tag.value,
            "model": self.model_for(req.role_tag),
            "system_text": req.system_text,
            "user_text": req.user_text,
            "image_hashes": [hashlib.sha256(image_bytes(p)).hexdigest() for p in req.images],
            "temperature": req.temperature,
        }
        return hashlib.sha256(dumps_canonical(digest_input).encode("utf-8")).hexdigest()

    def _fixture_path(self, fingerprint: str) -> Path:
        assert self.fixture_dir is not None
        return self.fixture_dir / f"{fingerprint}.json"

    def _fixture_read(self, fingerprint: str) -> str | None:
        path = self._fixture_path(fingerprint)
        if not path.exists():
            return None
        return json.loads(path.read_text(encoding="utf-8"))["raw_text"]

    def _fixture_write(self, fingerprint: str, req: ModelRequest, raw_text: str) -> None:
        assert self.fixture_dir is not None
        self.fixture_dir.mkdir(parents=True, exist_ok=True)
        record = {
            "fingerprint": fingerprint,
            "role_tag": req.role_tag.value,
            "model": self.model_for(req.role_tag),
            "temperature": req.temperature,
            "system_sha256": _sha256_text(req.system_text),
            "user_sha256": _sha256_text(req.user_text),
            "image_sha256": [hashlib.sha256(image_bytes(p)).hexdigest() for p in req.images],
            "raw_text": raw_text,
        }
        path = self._fixture_path(fingerprint)
        tmp = path.with_suffix(f".tmp.{os.getpid()}.{threading.get_ident()}")
        tmp.write_text(json.dumps(record, sort_keys=True, ensure_ascii=False, indent=2), encoding="utf-8")
        os.replace(tmp, path)

    def _call_with_retry(self, req: ModelRequest) -> str:
        assert self.transport is not None
        model = self.model_for(req.role_tag)
        last: Exception | None = None
        for attempt in range(self.max_attempts):
            try:
                with self._limiter:
                    return self.transport(req, model)
            except (RateLimitError, TransportError) as exc:
                last = exc
                if attempt + 1 < self.max_attempts:
                    self._sleep(self.backoff_base * (2**attempt))
        assert last is not None
        raise last

    def complete(self, req: ModelRequest) -> ModelResponse:
        start = time.monotonic()
        fp = self.fingerprint(req)
        if self.mode is BackendMode.REPLAY:
            raw = self._fixture_read(fp)
            if raw is None:
                raise ReplayMissError(fp)
            return ModelResponse(raw_text=raw, latency=time.monotonic() - start)
        if self.mode is BackendMode.RECORD:
            cached = self._fixture_read(fp)
            if cached is not None:
                return ModelResponse(raw_text=cached, latency=time.monotonic() - start)
        raw = self._call_with_retry(req)
        if self.mode is BackendMode.RECORD:
            self._fixture_write(fp, req, raw)
        return ModelResponse(raw_text=raw, latency=time.monotonic() - start)

    def complete_structured(self, req: ModelRequest, max_repairs: int = 2) -> Any:
        """Call the model and parse/validate JSON output against the registered schema.

        On parse or validation failure, re-prompts with the error appended,
        at most ``max_repairs`` times.
        """
        from .schemas import SCHEMAS  # late import avoids a cycle

        if req.response_schema_id is None or req.response_schema_id not in SCHEMAS:
            raise ConfigError(f"unknown response schema: {req.response_schema_id!r}")
        schema = SCHEMAS[req.response_schema_id]
        attempts: list[str] = []
        current = req
        for _ in range(max_repairs + 1):
            raw = self.complete(current).raw_text
            attempts.append(raw)
            try:
                value = extract_json_block(raw)
                jsonschema.validate(value, schema)
                return value
            except (ValueError, jsonschema.ValidationError) as exc:
                repair_note = (
                    f"\n\nYour previous response was invalid: {exc}\n"
                    "Respond again with ONLY valid JSON matching the required format."
                )
                current = replace(req, user_text=req.user_text + repair_note)
        raise StructuredOutputError(req.response_schema_id, attempts)
