"""Feedback-driven refinement: route keep/edit/regenerate decisions to image
backends for a single round."""

from __future__ import annotations

import shutil
import subprocess
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Protocol, Union

from .backend import ModelBackend
from .errors import ConfigError, FagerError, ImageBackendError
from .evaluate import EvalConfig, evaluate
from .model import (
    Decision,
    EvaluationOutcome,
    FactualRubric,
    PromptSpec,
    QASet,
    dumps_artifact,
)
from .store import RunStore

#: Join token between the original prompt and a regeneration constraint.
PROMPT_JOIN = ", "


@dataclass(frozen=True)
class KeepAction:
    image: str


@dataclass(frozen=True)
class EditAction:
    instruction: str
    source_image: str

    def __post_init__(self) -> None:
        if not self.instruction:
            raise ValueError("edit action requires a non-empty instruction")


@dataclass(frozen=True)
class RegenerateAction:
    augmented_prompt: str


RefinementAction = Union[KeepAction, EditAction, RegenerateAction]


class ImageGenerator(Protocol):
    backend_id: str

    def generate(self, prompt: str, out_path: Path) -> None: ...


class ImageEditor(Protocol):
    backend_id: str

    def edit(self, image: str, instruction: str, out_path: Path) -> None: ...


class CommandImageBackend:
    """Subprocess adapter: a command template with {prompt}, {image},
    {instruction}, and {output} placeholders, expected to write the output image."""

    def __init__(self, command: str, timeout: float = 600.0):
        self.command = command
        self.timeout = timeout
        self.backend_id = f"command:{command.split()[0]}"

    def _run(self, **fields: str) -> None:
        cmd = self.command.format(**fields)
        try:
            proc = subprocess.run(cmd, shell=True, capture_output=True, timeout=self.timeout)
        except subprocess.TimeoutExpired as exc:
            raise ImageBackendError(f"image backend timed out: {cmd}") from exc
        if proc.returncode != 0:
            raise ImageBackendError(
                f"image backend failed ({proc.returncode}): {proc.stderr.decode(errors='replace')[:500]}"
            )
        if not Path(fields["output"]).exists():
            raise ImageBackendError(f"image backend returned no image: {cmd}")

    def generate(self, prompt: str, out_path: Path) -> None:
        self._run(prompt=prompt, image="", instruction="", output=str(out_path))

    def edit(self, image: str, instruction: str, out_path: Path) -> None:
        self._run(prompt="", image=image, instruction=instruction, output=str(out_path))


@dataclass
class ImageBackendConfig:
    generator: ImageGenerator | None = None
    editor: ImageEditor | None = None
    output_dir: Path | None = None


def route(outcome: EvaluationOutcome, prompt: PromptSpec) -> RefinementAction:
    """Turn an evaluation decision into the corresponding refinement action."""
    if outcome.decision is Decision.KEEP:
        return KeepAction(image=outcome.image_ref)
    if not outcome.feedback:
        raise FagerError(f"decision {outcome.decision.value} requires feedback ({outcome.prompt_id})")
    if outcome.decision is Decision.EDIT:
        return EditAction(instruction=outcome.feedback, source_image=outcome.image_ref)
    return RegenerateAction(augmented_prompt=prompt.text + PROMPT_JOIN + outcome.feedback)


def apply(action: RefinementAction, cfg: ImageBackendConfig, dest_dir: Path) -> str:
    """Execute a refinement action; non-keep actions invoke the configured image
    backend and persist the refined image plus provenance metadata."""
    if isinstance(action, KeepAction):
        return action.image

    dest_dir.mkdir(parents=True, exist_ok=True)
    out_path = dest_dir / "refined.png"
    started = time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime())
    meta: dict[str, Any]
    if isinstance(action, EditAction):
        if cfg.editor is None:
            raise ConfigError("edit decision present but no editor backend configured")
        cfg.editor.edit(action.source_image, action.instruction, out_path)
        meta = {
            "action": "edit",
            "instruction": action.instruction,
            "source_image": action.source_image,
            "backend_id": cfg.editor.backend_id,
        }
    else:
        if cfg.generator is None:
            raise ConfigError("regenerate decision present but no generator backend configured")
        cfg.generator.generate(action.augmented_prompt, out_path)
        meta = {
            "action": "regenerate",
            "prompt": action.augmented_prompt,
            "backend_id": cfg.generator.backend_id,
        }
    if not out_path.exists():
        raise ImageBackendError("image backend returned no image")
    meta["started_at"] = started
    meta["finished_at"] = time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime())
    (dest_dir / "refined.meta.json").write_text(dumps_artifact(meta), encoding="utf-8")
    return str(out_path)


@dataclass(frozen=True)
class RefinementResult:
    outcome: EvaluationOutcome
    refined_image: str
    post_outcome: EvaluationOutcome | None = None


def refine_once(
    prompt: PromptSpec,
    image: str,
    qaset: QASet,
    rubric: FactualRubric,
    eval_cfg: EvalConfig,
    image_cfg: ImageBackendConfig,
    backend: ModelBackend,
    store: RunStore | None = None,
    reevaluate: bool = False,
) -> RefinementResult:
    """Single refinement round: evaluate (gated), route, apply.

    The optional re-evaluation of the refined image is reporting-only and
    never triggers further refinement.
    """
    outcome = evaluate(image, qaset, eval_cfg, backend, rubric=rubric, prompt=prompt)
    if store is not None:
        store.save_artifact(prompt.prompt_id, "eval.generated.json", outcome.to_json_dict())
    action = route(outcome, prompt)
    dest_dir = (
        store.prompt_dir(prompt.prompt_id)
        if store is not None
        else (image_cfg.output_dir or Path("."))
    )
    refined = apply(action, image_cfg, Path(dest_dir))

    post: EvaluationOutcome | None = None
    if reevaluate:
        from dataclasses import replace

        post = evaluate(
            refined, qaset, replace(eval_cfg, gated=False), backend, rubric=rubric, prompt=prompt
        )
        if store is not None:
            store.save_artifact(prompt.prompt_id, "eval.refined.json", post.to_json_dict())
    return RefinementResult(outcome=outcome, refined_image=refined, post_outcome=post)
