from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import pytest

from fager.backend import (
    BackendMode,
    ModelBackend,
    ModelRequest,
    RoleTag,
    fail_on_network_transport,
)

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"
RESPONSES = FIXTURES / "responses"
MANIFEST = FIXTURES / "manifest.jsonl"

LLM = "gpt-5.4-mini"
VLM = "qwen3-vl-8b-instruct"


def write_png(path: Path, rgb: tuple[int, int, int] = (10, 20, 30), size: int = 4) -> Path:
    raw = b"".join(b"\x00" + bytes(rgb) * size for _ in range(size))

    def chunk(tag: bytes, data: bytes) -> bytes:
        return (
            struct.pack(">I", len(data))
            + tag
            + data
            + struct.pack(">I", zlib.crc32(tag + data) & 0xFFFFFFFF)
        )

    ihdr = struct.pack(">IIBBBBB", size, size, 8, 2, 0, 0, 0)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(
        b"\x89PNG\r\n\x1a\n" + chunk(b"IHDR", ihdr) + chunk(b"IDAT", zlib.compress(raw)) + chunk(b"IEND", b"")
    )
    return path


class CountingTransport:
    """Wraps a transport, recording every request it serves."""

    def __init__(self, inner):
        self.inner = inner
        self.requests: list[ModelRequest] = []

    def __call__(self, req: ModelRequest, model: str) -> str:
        self.requests.append(req)
        return self.inner(req, model)

    def count(self, role: RoleTag | None = None) -> int:
        if role is None:
            return len(self.requests)
        return sum(1 for r in self.requests if r.role_tag is role)


def scripted(handler) -> CountingTransport:
    """CountingTransport over a handler(req) -> raw text."""
    return CountingTransport(lambda req, model: handler(req))


def answer_all(policy) -> CountingTransport:
    """Evaluation transport answering every question via policy(qa_id, question)."""

    def handler(req: ModelRequest) -> str:
        payload = json.loads(req.user_text.split("Questions:\n", 1)[1].split("\n\nYour previous")[0])
        answers = []
        for q in payload:
            answer, rationale = policy(q["qa_id"], q["question"])
            answers.append({"qa_id": q["qa_id"], "answer": answer, "rationale": rationale})
        return json.dumps({"answers": answers})

    return scripted(handler)


def live_backend(transport, **kwargs) -> ModelBackend:
    return ModelBackend(BackendMode.LIVE, LLM, VLM, transport=transport, **kwargs)


@pytest.fixture
def replay_backend() -> ModelBackend:
    """Backend over the shipped fixture store; any network use trips an assertion."""
    return ModelBackend(
        BackendMode.REPLAY,
        LLM,
        VLM,
        fixture_dir=RESPONSES,
        transport=fail_on_network_transport,
    )


@pytest.fixture
def image(tmp_path: Path) -> str:
    return str(write_png(tmp_path / "img.png"))
