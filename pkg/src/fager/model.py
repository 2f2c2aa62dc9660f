"""Shared domain types for the factual rubric pipeline.

All types are immutable (frozen dataclasses) and carry canonical JSON
encodings used as the persistence and fixture format everywhere else.
Enumerations serialize as lowercase strings.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Any


class FactLevel(Enum):
    """Coarse-to-fine fact hierarchy: identity/scene, key components, fine details."""

    L1 = "l1"
    L2 = "l2"
    L3 = "l3"

    @property
    def rank(self) -> int:
        return {"l1": 1, "l2": 2, "l3": 3}[self.value]

    def __lt__(self, other: "FactLevel") -> bool:
        if not isinstance(other, FactLevel):
            return NotImplemented
        return self.rank < other.rank


class FactCategory(Enum):
    EXISTENCE = "existence"
    COUNTING = "counting"
    RELATION = "relation"
    SHAPE = "shape"
    SIZE = "size"
    COLOR = "color"
    POSTURE = "posture"
    SCENE = "scene"
    OTHERS = "others"

    @classmethod
    def coerce(cls, raw: str) -> "FactCategory":
        """Parse a category string, falling back to OTHERS for anything unrecognized."""
        try:
            return cls(raw.strip().lower())
        except ValueError:
            return cls.OTHERS


class FactSource(Enum):
    PROPOSAL = "proposal"
    REFERENCE = "reference"
    VERIFICATION_ADDED = "verification_added"


class Answer(Enum):
    YES = "yes"
    NO = "no"
    UNKNOWN = "unknown"


#: Exact rational values used for score arithmetic.
ANSWER_FRACTIONS: dict[Answer, Fraction] = {
    Answer.YES: Fraction(1),
    Answer.NO: Fraction(0),
    Answer.UNKNOWN: Fraction(1, 2),
}


def answer_value(a: Answer) -> float:
    """Numeric value of an answer: yes=1.0, no=0.0, unknown=0.5."""
    return float(ANSWER_FRACTIONS[a])


class Decision(Enum):
    KEEP = "keep"
    EDIT = "edit"
    REGENERATE = "regenerate"


class LedgerAction(Enum):
    ADDED = "added"
    DROPPED = "dropped"
    KEPT = "kept"


@dataclass(frozen=True)
class PromptSpec:
    prompt_id: str
    text: str
    dataset: str | None = None

    def __post_init__(self) -> None:
        if not self.text:
            raise ValueError("prompt text must be non-empty")

    def to_json_dict(self) -> dict[str, Any]:
        return {"prompt_id": self.prompt_id, "text": self.text, "dataset": self.dataset}

    @classmethod
    def from_json_dict(cls, d: dict[str, Any]) -> "PromptSpec":
        return cls(prompt_id=d["prompt_id"], text=d["text"], dataset=d.get("dataset"))


@dataclass(frozen=True)
class Fact:
    fact_id: str
    level: FactLevel
    category: FactCategory
    statement: str
    source: FactSource

    def __post_init__(self) -> None:
        if not self.statement:
            raise ValueError("fact statement must be non-empty")

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "fact_id": self.fact_id,
            "level": self.level.value,
            "category": self.category.value,
            "statement": self.statement,
            "source": self.source.value,
        }

    @classmethod
    def from_json_dict(cls, d: dict[str, Any]) -> "Fact":
        return cls(
            fact_id=d["fact_id"],
            level=FactLevel(d["level"]),
            category=FactCategory(d["category"]),
            statement=d["statement"],
            source=FactSource(d["source"]),
        )


@dataclass(frozen=True)
class LedgerEntry:
    action: LedgerAction
    fact_id: str
    reason: str

    def to_json_dict(self) -> dict[str, Any]:
        return {"action": self.action.value, "fact_id": self.fact_id, "reason": self.reason}

    @classmethod
    def from_json_dict(cls, d: dict[str, Any]) -> "LedgerEntry":
        return cls(action=LedgerAction(d["action"]), fact_id=d["fact_id"], reason=d["reason"])


@dataclass(frozen=True)
class FactualRubric:
    prompt_id: str
    facts: tuple[Fact, ...]
    ledger: tuple[LedgerEntry, ...] = ()

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "prompt_id": self.prompt_id,
            "facts": [f.to_json_dict() for f in self.facts],
            "ledger": [e.to_json_dict() for e in self.ledger],
        }

    @classmethod
    def from_json_dict(cls, d: dict[str, Any]) -> "FactualRubric":
        return cls(
            prompt_id=d["prompt_id"],
            facts=tuple(Fact.from_json_dict(f) for f in d["facts"]),
            ledger=tuple(LedgerEntry.from_json_dict(e) for e in d.get("ledger", [])),
        )


@dataclass(frozen=True)
class QAPair:
    qa_id: str
    fact_id: str
    level: FactLevel
    category: FactCategory
    question: str
    expected: Answer = Answer.YES

    def __post_init__(self) -> None:
        if self.expected is not Answer.YES:
            raise ValueError("expected answer is always yes")

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "qa_id": self.qa_id,
            "fact_id": self.fact_id,
            "level": self.level.value,
            "category": self.category.value,
            "question": self.question,
            "expected": self.expected.value,
        }

    @classmethod
    def from_json_dict(cls, d: dict[str, Any]) -> "QAPair":
        return cls(
            qa_id=d["qa_id"],
            fact_id=d["fact_id"],
            level=FactLevel(d["level"]),
            category=FactCategory(d["category"]),
            question=d["question"],
            expected=Answer(d.get("expected", "yes")),
        )


@dataclass(frozen=True)
class QASet:
    prompt_id: str
    pairs: tuple[QAPair, ...]

    def to_json_dict(self) -> dict[str, Any]:
        return {"prompt_id": self.prompt_id, "pairs": [p.to_json_dict() for p in self.pairs]}

    @classmethod
    def from_json_dict(cls, d: dict[str, Any]) -> "QASet":
        return cls(prompt_id=d["prompt_id"], pairs=tuple(QAPair.from_json_dict(p) for p in d["pairs"]))


@dataclass(frozen=True)
class QuestionResult:
    qa_id: str
    answer: Answer
    rationale: str

    def __post_init__(self) -> None:
        if not self.rationale:
            raise ValueError("rationale must be non-empty")

    def to_json_dict(self) -> dict[str, Any]:
        return {"qa_id": self.qa_id, "answer": self.answer.value, "rationale": self.rationale}

    @classmethod
    def from_json_dict(cls, d: dict[str, Any]) -> "QuestionResult":
        return cls(qa_id=d["qa_id"], answer=Answer(d["answer"]), rationale=d["rationale"])


@dataclass(frozen=True)
class EvaluationOutcome:
    prompt_id: str
    image_ref: str
    results: tuple[QuestionResult, ...]
    level_scores: dict[FactLevel, float]
    overall_score: float
    decision: Decision
    feedback: str | None = None
    gated: bool = False

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "prompt_id": self.prompt_id,
            "image_ref": self.image_ref,
            "results": [r.to_json_dict() for r in self.results],
            "level_scores": {lvl.value: s for lvl, s in sorted(self.level_scores.items(), key=lambda kv: kv[0].rank)},
            "overall_score": self.overall_score,
            "decision": self.decision.value,
            "feedback": self.feedback,
            "gated": self.gated,
        }

    @classmethod
    def from_json_dict(cls, d: dict[str, Any]) -> "EvaluationOutcome":
        return cls(
            prompt_id=d["prompt_id"],
            image_ref=d["image_ref"],
            results=tuple(QuestionResult.from_json_dict(r) for r in d["results"]),
            level_scores={FactLevel(k): v for k, v in d["level_scores"].items()},
            overall_score=d["overall_score"],
            decision=Decision(d["decision"]),
            feedback=d.get("feedback"),
            gated=d.get("gated", False),
        )


def normalize_statement(text: str) -> str:
    """Case- and whitespace-folded form used for rubric deduplication."""
    return " ".join(text.lower().split())


def validate_rubric(rubric: FactualRubric) -> list[str]:
    """Check all rubric invariants; returns a list of violation strings (empty iff valid)."""
    violations: list[str] = []
    seen_ids: set[str] = set()
    for f in rubric.facts:
        if f.fact_id in seen_ids:
            violations.append(f"duplicate-fact-id: {f.fact_id}")
        seen_ids.add(f.fact_id)
    if not any(f.level is FactLevel.L1 for f in rubric.facts):
        violations.append("missing-l1: rubric has no Level 1 fact")
    seen_statements: set[str] = set()
    for f in rubric.facts:
        norm = normalize_statement(f.statement)
        if norm in seen_statements:
            violations.append(f"duplicate-statement: {f.fact_id}")
        seen_statements.add(norm)
    fact_ids = {f.fact_id for f in rubric.facts}
    for entry in rubric.ledger:
        if entry.action is LedgerAction.DROPPED:
            if entry.fact_id in fact_ids:
                violations.append(f"dropped-fact-present: {entry.fact_id}")
        else:
            if entry.fact_id not in fact_ids:
                violations.append(f"ledger-dangling-ref: {entry.fact_id}")
    return violations


def dumps_canonical(value: Any) -> str:
    """Canonical compact JSON used for hashing and fingerprints."""
    return json.dumps(value, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def dumps_artifact(value: Any) -> str:
    """Deterministic pretty JSON used for persisted stage artifacts."""
    return json.dumps(value, sort_keys=True, ensure_ascii=False, indent=2) + "\n"
