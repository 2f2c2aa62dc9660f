"""Factual A/B test: pairwise comparison of metric scores on factual reference
vs generated images, with tie-as-correct semantics and direction awareness."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Any, Sequence

from .backend import ModelBackend
from .errors import FagerError, StageError
from .evaluate import EvalConfig, evaluate
from .model import PromptSpec
from .qa import generate_qa
from .rubric import build_rubric
from .store import RunStore


class MetricDirection(Enum):
    HIGHER_BETTER = "higher_better"
    LOWER_BETTER = "lower_better"


@dataclass(frozen=True)
class ABPair:
    prompt_id: str
    s_factual: float
    s_generated: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.s_factual) and math.isfinite(self.s_generated)):
            raise ValueError(f"non-finite score in pair {self.prompt_id}")


@dataclass(frozen=True)
class ABReport:
    dataset: str
    n_pairs: int
    n_correct: int
    accuracy: float
    per_pair: tuple[tuple[str, bool], ...]

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "dataset": self.dataset,
            "n_pairs": self.n_pairs,
            "n_correct": self.n_correct,
            "accuracy": self.accuracy,
            "per_pair": [{"prompt_id": pid, "correct": ok} for pid, ok in self.per_pair],
        }

    def render_table(self) -> str:
        """Aligned-text summary (dataset column layout)."""
        header = f"{'dataset':<30} {'pairs':>6} {'correct':>8} {'accuracy':>9}"
        row = f"{self.dataset or '-':<30} {self.n_pairs:>6} {self.n_correct:>8} {self.accuracy:>9.2f}"
        return header + "\n" + row


def pairwise_correct(pair: ABPair, direction: MetricDirection) -> int:
    """1 iff the factual image is ranked at least as favorably; ties count as
    correct; comparison is exact, reversed for lower-is-better metrics."""
    if direction is MetricDirection.HIGHER_BETTER:
        return 1 if pair.s_factual >= pair.s_generated else 0
    return 1 if pair.s_factual <= pair.s_generated else 0


def run_abtest(
    pairs: Sequence[ABPair], direction: MetricDirection, dataset: str = ""
) -> ABReport:
    """Pairwise accuracy over the pair list, preserving input order."""
    if not pairs:
        raise FagerError("A/B test requires at least one pair")
    per_pair = tuple((p.prompt_id, bool(pairwise_correct(p, direction))) for p in pairs)
    n_correct = sum(ok for _, ok in per_pair)
    return ABReport(
        dataset=dataset,
        n_pairs=len(pairs),
        n_correct=n_correct,
        accuracy=n_correct / len(pairs),
        per_pair=per_pair,
    )


def load_score_file(path: str | Path) -> list[ABPair]:
    """Read a delimited score file with columns (prompt_id, image_role, score).

    Comma- and tab-delimited files are accepted; a header row is optional.
    Every prompt_id must appear with both the factual and generated roles.
    """
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    delimiter = "\t" if "\t" in text.splitlines()[0] else ","
    scores: dict[str, dict[str, float]] = {}
    order: list[str] = []
    for lineno, row in enumerate(csv.reader(text.splitlines(), delimiter=delimiter), start=1):
        if not row or not any(cell.strip() for cell in row):
            continue
        if lineno == 1 and row[0].strip().lower() == "prompt_id":
            continue
        if len(row) != 3:
            raise FagerError(f"{path}:{lineno}: expected 3 columns, got {len(row)}")
        prompt_id, role, raw_score = (cell.strip() for cell in row)
        if role not in ("factual", "generated"):
            raise FagerError(f"{path}:{lineno}: image_role must be 'factual' or 'generated'")
        try:
            value = float(raw_score)
        except ValueError:
            raise FagerError(f"{path}:{lineno}: invalid score {raw_score!r}") from None
        if prompt_id not in scores:
            scores[prompt_id] = {}
            order.append(prompt_id)
        scores[prompt_id][role] = value
    pairs = []
    for prompt_id in order:
        entry = scores[prompt_id]
        if "factual" not in entry or "generated" not in entry:
            raise FagerError(f"{path}: prompt {prompt_id} is missing a factual or generated score")
        pairs.append(ABPair(prompt_id, entry["factual"], entry["generated"]))
    return pairs


def score_with_fager(
    prompt: PromptSpec,
    factual_image: str,
    generated_image: str,
    backend: ModelBackend,
    cfg: EvalConfig,
    reference_images: list[str] | None = None,
    store: RunStore | None = None,
) -> ABPair:
    """Score both images of a pair against the same QA set with gating off."""
    cfg = replace(cfg, gated=False)
    rubric = build_rubric(prompt, reference_images or [], backend, store)
    qaset = generate_qa(rubric, backend, store)
    if store is not None:
        store.save_artifact(prompt.prompt_id, "qaset.json", qaset.to_json_dict())
    outcomes = {}
    for tag, image in (("factual", factual_image), ("generated", generated_image)):
        try:
            outcome = evaluate(image, qaset, cfg, backend, rubric=rubric, prompt=prompt)
        except Exception as exc:
            raise StageError(f"eval.{tag}", exc) from exc
        outcomes[tag] = outcome
        if store is not None:
            store.save_artifact(prompt.prompt_id, f"eval.{tag}.json", outcome.to_json_dict())
    return ABPair(
        prompt_id=prompt.prompt_id,
        s_factual=outcomes["factual"].overall_score,
        s_generated=outcomes["generated"].overall_score,
    )
