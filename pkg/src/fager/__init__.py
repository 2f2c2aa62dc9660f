"""FAGER: factually grounded evaluation and refinement for text-to-image generation."""

from .model import (
    Answer,
    Decision,
    EvaluationOutcome,
    Fact,
    FactCategory,
    FactLevel,
    FactSource,
    FactualRubric,
    LedgerAction,
    LedgerEntry,
    PromptSpec,
    QAPair,
    QASet,
    QuestionResult,
    answer_value,
    validate_rubric,
)

__all__ = [
    "Answer",
    "Decision",
    "EvaluationOutcome",
    "Fact",
    "FactCategory",
    "FactLevel",
    "FactSource",
    "FactualRubric",
    "LedgerAction",
    "LedgerEntry",
    "PromptSpec",
    "QAPair",
    "QASet",
    "QuestionResult",
    "answer_value",
    "validate_rubric",
]

__version__ = "0.1.0"
