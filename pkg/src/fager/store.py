"""Manifest ingestion, run-directory persistence, and content-hash caching.

Run directory layout:
    <run_dir>/run.json
    <run_dir>/<prompt_id>/{proposal.json, refelems.<i>.json, rubric.json,
                           qaset.json, eval.<tag>.json, refined.*}
    <run_dir>/cache/<stage>/<fingerprint>.json
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigError, FagerError
from .model import PromptSpec, dumps_artifact, dumps_canonical


@dataclass(frozen=True)
class ManifestEntry:
    prompt_id: str
    prompt: str
    dataset: str | None = None
    reference_images: tuple[str, ...] = ()
    factual_image: str | None = None
    generated_image: str | None = None

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "prompt_id": self.prompt_id,
            "prompt": self.prompt,
            "dataset": self.dataset,
            "reference_images": list(self.reference_images),
            "factual_image": self.factual_image,
            "generated_image": self.generated_image,
        }

    @classmethod
    def from_json_dict(cls, d: dict[str, Any]) -> "ManifestEntry":
        return cls(
            prompt_id=d["prompt_id"],
            prompt=d["prompt"],
            dataset=d.get("dataset"),
            reference_images=tuple(d.get("reference_images") or ()),
            factual_image=d.get("factual_image"),
            generated_image=d.get("generated_image"),
        )

    def to_prompt_spec(self) -> PromptSpec:
        return PromptSpec(prompt_id=self.prompt_id, text=self.prompt, dataset=self.dataset)


class ManifestError(FagerError):
    pass


def _resolve(base: Path, image: str | None) -> str | None:
    if image is None:
        return None
    p = Path(image)
    return image if p.is_absolute() else str(base / p)


def load_manifest(path: str | Path, mode: str = "eval") -> list[ManifestEntry]:
    """Load a JSON Lines manifest; `mode` is 'rubric', 'eval', 'ab', or 'refine'.

    A/B mode requires both factual_image and generated_image; eval/refine
    require generated_image. Relative image paths are resolved against the
    manifest's directory.
    """
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    base = path.parent
    entries: list[ManifestEntry] = []
    seen: set[str] = set()
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            raw = json.loads(line)
            entry = ManifestEntry.from_json_dict(raw)
            entry = ManifestEntry(
                prompt_id=entry.prompt_id,
                prompt=entry.prompt,
                dataset=entry.dataset,
                reference_images=tuple(_resolve(base, p) for p in entry.reference_images),  # type: ignore[misc]
                factual_image=_resolve(base, entry.factual_image),
                generated_image=_resolve(base, entry.generated_image),
            )
        except (json.JSONDecodeError, KeyError) as exc:
            raise ManifestError(f"{path}:{lineno}: invalid manifest entry: {exc}") from exc
        if entry.prompt_id in seen:
            raise ManifestError(f"{path}:{lineno}: duplicate prompt_id: {entry.prompt_id}")
        seen.add(entry.prompt_id)
        if mode == "ab" and (entry.factual_image is None or entry.generated_image is None):
            raise ManifestError(
                f"{path}:{lineno}: entry {entry.prompt_id} missing factual_image/generated_image for A/B mode"
            )
        if mode in ("eval", "refine") and entry.generated_image is None:
            raise ManifestError(
                f"{path}:{lineno}: entry {entry.prompt_id} missing generated_image for {mode} mode"
            )
        entries.append(entry)
    return entries


def save_manifest(entries: list[ManifestEntry], path: str | Path) -> None:
    lines = [dumps_canonical(e.to_json_dict()) for e in entries]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass
class RunRecord:
    run_id: str
    config: dict[str, Any]
    artifacts: dict[str, list[str]] = field(default_factory=dict)
    created_at: str = ""
    updated_at: str = ""

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "run_id": self.run_id,
            "config": self.config,
            "artifacts": self.artifacts,
            "created_at": self.created_at,
            "updated_at": self.updated_at,
        }

    @classmethod
    def from_json_dict(cls, d: dict[str, Any]) -> "RunRecord":
        return cls(
            run_id=d["run_id"],
            config=d["config"],
            artifacts=d.get("artifacts", {}),
            created_at=d.get("created_at", ""),
            updated_at=d.get("updated_at", ""),
        )


def stage_fingerprint(stage: str, model_ids: dict[str, str], template_version: str, inputs: Any) -> str:
    """Content hash keying the stage cache; includes models and template version."""
    payload = {
        "stage": stage,
        "models": model_ids,
        "template_version": template_version,
        "inputs": inputs,
    }
    return hashlib.sha256(dumps_canonical(payload).encode("utf-8")).hexdigest()


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp.{os.getpid()}.{threading.get_ident()}")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


class RunStore:
    """Filesystem persistence for one run: stage artifacts plus the stage cache."""

    def __init__(self, run_dir: str | Path):
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)

    def prompt_dir(self, prompt_id: str) -> Path:
        d = self.run_dir / prompt_id
        d.mkdir(parents=True, exist_ok=True)
        return d

    def artifact_path(self, prompt_id: str, name: str) -> Path:
        return self.prompt_dir(prompt_id) / name

    def save_artifact(self, prompt_id: str, name: str, value: dict[str, Any]) -> Path:
        path = self.artifact_path(prompt_id, name)
        _atomic_write(path, dumps_artifact(value))
        return path

    def load_artifact(self, prompt_id: str, name: str) -> dict[str, Any] | None:
        path = self.artifact_path(prompt_id, name)
        if not path.exists():
            return None
        return json.loads(path.read_text(encoding="utf-8"))

    # -- stage cache ---------------------------------------------------------

    def _cache_path(self, stage: str, fingerprint: str) -> Path:
        return self.run_dir / "cache" / stage / f"{fingerprint}.json"

    def cache_lookup(self, stage: str, fingerprint: str) -> dict[str, Any] | None:
        path = self._cache_path(stage, fingerprint)
        if not path.exists():
            return None
        try:
            return json.loads(path.read_text(encoding="utf-8"))
        except (json.JSONDecodeError, OSError):
            # corrupt entry: quarantine and treat as a miss
            try:
                os.replace(path, path.with_suffix(".corrupt"))
            except OSError:
                pass
            return None

    def cache_store(self, stage: str, fingerprint: str, artifact: dict[str, Any]) -> None:
        _atomic_write(self._cache_path(stage, fingerprint), dumps_artifact(artifact))

    # -- run record ----------------------------------------------------------

    def load_run_record(self) -> RunRecord | None:
        path = self.run_dir / "run.json"
        if not path.exists():
            return None
        return RunRecord.from_json_dict(json.loads(path.read_text(encoding="utf-8")))

    def save_run_record(self, record: RunRecord) -> None:
        now = time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime())
        if not record.created_at:
            record.created_at = now
        record.updated_at = now
        _atomic_write(self.run_dir / "run.json", dumps_artifact(record.to_json_dict()))

    def index_artifact(self, record: RunRecord, prompt_id: str, name: str) -> None:
        files = record.artifacts.setdefault(prompt_id, [])
        if name not in files:
            files.append(name)
