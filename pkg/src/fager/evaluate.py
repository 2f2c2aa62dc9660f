"""Evaluation agent: answers QA sets against an image, computes the gated
hierarchical factuality score, decides keep/edit/regenerate, and synthesizes
textual feedback."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

from . import templates
from .backend import ModelBackend, ModelRequest, RoleTag
from .errors import CardinalityError, FagerError
from .model import (
    ANSWER_FRACTIONS,
    Answer,
    Decision,
    EvaluationOutcome,
    FactLevel,
    FactualRubric,
    PromptSpec,
    QAPair,
    QASet,
    QuestionResult,
    dumps_canonical,
)
from .qa import split_by_level

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EvalConfig:
    regeneration_threshold: float = 20.0
    keep_threshold: float = 95.0
    gated: bool = True
    batch_size: int = 10

    def __post_init__(self) -> None:
        if not (0 <= self.regeneration_threshold < self.keep_threshold <= 100):
            raise ValueError("need 0 <= regeneration_threshold < keep_threshold <= 100")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def score(results: Sequence[QuestionResult]) -> float:
    """Factuality score: 100 x mean of answer values, computed exactly."""
    if not results:
        raise FagerError("cannot score an empty result list")
    total = sum((ANSWER_FRACTIONS[r.answer] for r in results), Fraction(0))
    return float(total * 100 / len(results))


def decide(l1_score: float | None, overall_score: float, cfg: EvalConfig) -> Decision:
    """Strict-comparison decision rule: L1 below the regeneration threshold
    regenerates; an overall score exceeding the keep threshold keeps; else edit."""
    if l1_score is not None and l1_score < cfg.regeneration_threshold:
        return Decision.REGENERATE
    if overall_score > cfg.keep_threshold:
        return Decision.KEEP
    return Decision.EDIT


def _coerce_answer(raw: str, qa_id: str) -> Answer:
    try:
        return Answer(raw.strip().lower())
    except ValueError:
        log.warning("out-of-vocabulary answer %r for %s coerced to unknown", raw, qa_id)
        return Answer.UNKNOWN


def _parse_answers(parsed: dict, wanted: set[str]) -> dict[str, QuestionResult]:
    out: dict[str, QuestionResult] = {}
    for item in parsed["answers"]:
        qa_id = item["qa_id"]
        if qa_id not in wanted or qa_id in out:
            continue
        rationale = item["rationale"].strip() or "no rationale provided"
        out[qa_id] = QuestionResult(
            qa_id=qa_id, answer=_coerce_answer(item["answer"], qa_id), rationale=rationale
        )
    return out


def answer_questions(
    image: str,
    pairs: Sequence[QAPair],
    backend: ModelBackend,
    batch_size: int = 10,
) -> list[QuestionResult]:
    """Answer the given questions against the image, one result per pair in order."""
    if not pairs:
        raise FagerError("answer_questions requires at least one question")
    results: dict[str, QuestionResult] = {}
    for start in range(0, len(pairs), batch_size):
        batch = pairs[start : start + batch_size]
        payload = [{"qa_id": p.qa_id, "question": p.question} for p in batch]
        req = ModelRequest(
            role_tag=RoleTag.EVALUATION,
            system_text=templates.system_text("evaluation"),
            user_text=f"Questions:\n{dumps_canonical(payload)}",
            images=(image,),
            response_schema_id="answer_list",
        )
        wanted = {p.qa_id for p in batch}
        parsed = backend.complete_structured(req)
        got = _parse_answers(parsed, wanted)
        missing = wanted - set(got)
        if missing:
            repair = ModelRequest(
                role_tag=req.role_tag,
                system_text=req.system_text,
                user_text=(
                    req.user_text
                    + "\n\nYour previous response did not answer every question. "
                    + "Missing qa_ids: "
                    + dumps_canonical(sorted(missing))
                    + "\nRespond again with exactly one answer per question."
                ),
                images=req.images,
                response_schema_id="answer_list",
            )
            parsed = backend.complete_structured(repair)
            got.update({k: v for k, v in _parse_answers(parsed, wanted).items() if k not in got})
            missing = wanted - set(got)
            if missing:
                raise CardinalityError(f"{len(missing)} question(s) left unanswered: {sorted(missing)}")
        results.update(got)
    return [results[p.qa_id] for p in pairs]


def make_feedback(
    decision: Decision,
    results: Sequence[QuestionResult],
    qaset: QASet,
    rubric: FactualRubric | None,
    prompt: PromptSpec,
    backend: ModelBackend,
    image: str | None = None,
) -> str:
    """Synthesize edit/regeneration feedback from the failed questions.

    Falls back to a mechanical concatenation of the failed fact statements
    when the backend call fails, so refinement can always proceed.
    """
    if decision is Decision.KEEP:
        raise FagerError("feedback is only generated for edit/regenerate decisions")
    pairs_by_id = {p.qa_id: p for p in qaset.pairs}
    facts_by_id = {f.fact_id: f for f in rubric.facts} if rubric is not None else {}
    failed = []
    for r in results:
        if r.answer is Answer.YES:
            continue
        pair = pairs_by_id.get(r.qa_id)
        if pair is None:
            continue
        fact = facts_by_id.get(pair.fact_id)
        failed.append(
            {
                "question": pair.question,
                "answer": r.answer.value,
                "rationale": r.rationale,
                "fact": fact.statement if fact is not None else pair.question,
            }
        )
    instruction = (
        templates.REGENERATE_INSTRUCTION
        if decision is Decision.REGENERATE
        else templates.EDIT_INSTRUCTION
    )
    req = ModelRequest(
        role_tag=RoleTag.EVALUATION,
        system_text=templates.system_text("feedback", mode_instruction=instruction),
        user_text=(
            f"Original prompt: {prompt.text}\n\nFailed checks:\n{dumps_canonical(failed)}"
        ),
        images=(image,) if image is not None else (),
        response_schema_id="feedback",
    )
    try:
        parsed = backend.complete_structured(req)
        return parsed["feedback"].strip()
    except Exception as exc:
        log.warning("feedback generation failed (%s); using mechanical fallback", exc)
        return "ensure: " + "; ".join(item["fact"] for item in failed)


def evaluate(
    image: str,
    qaset: QASet,
    cfg: EvalConfig,
    backend: ModelBackend,
    rubric: FactualRubric | None = None,
    prompt: PromptSpec | None = None,
) -> EvaluationOutcome:
    """Run the coarse-to-fine evaluation of one image against its QA set.

    With gating enabled, Level 1 is answered first; an L1 score below the
    regeneration threshold short-circuits to a regenerate decision without
    issuing any L2/L3 backend calls.
    """
    by_level = split_by_level(qaset)
    l1_pairs = by_level[FactLevel.L1]
    if cfg.gated and not l1_pairs:
        raise FagerError(f"gated evaluation requires at least one l1 question ({qaset.prompt_id})")

    results: list[QuestionResult] = []
    level_scores: dict[FactLevel, float] = {}
    l1_score: float | None = None
    gated_stop = False

    if l1_pairs:
        l1_results = answer_questions(image, l1_pairs, backend, cfg.batch_size)
        results.extend(l1_results)
        l1_score = score(l1_results)
        level_scores[FactLevel.L1] = l1_score
        if cfg.gated and l1_score < cfg.regeneration_threshold:
            gated_stop = True

    if not gated_stop:
        for level in (FactLevel.L2, FactLevel.L3):
            pairs = by_level[level]
            if not pairs:
                continue
            level_results = answer_questions(image, pairs, backend, cfg.batch_size)
            results.extend(level_results)
            level_scores[level] = score(level_results)

    overall = score(results)
    decision = Decision.REGENERATE if gated_stop else decide(l1_score, overall, cfg)

    feedback: str | None = None
    if decision is not Decision.KEEP:
        if prompt is None:
            prompt = PromptSpec(prompt_id=qaset.prompt_id, text=qaset.prompt_id)
        feedback = make_feedback(decision, results, qaset, rubric, prompt, backend, image=image)

    return EvaluationOutcome(
        prompt_id=qaset.prompt_id,
        image_ref=image,
        results=tuple(results),
        level_scores=level_scores,
        overall_score=overall,
        decision=decision,
        feedback=feedback,
        gated=gated_stop,
    )
