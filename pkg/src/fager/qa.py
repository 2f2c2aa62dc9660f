"""QA generation: one atomic yes-expected question per verified rubric fact."""

from __future__ import annotations

import logging

from . import templates
from .backend import ModelBackend, ModelRequest, RoleTag
from .errors import CardinalityError, FagerError
from .model import FactLevel, FactualRubric, QAPair, QASet, dumps_canonical
from .store import RunStore, stage_fingerprint

log = logging.getLogger(__name__)

#: Soft cap from the QA template; longer questions are kept but flagged.
QUESTION_LENGTH_CAP = 200


def _question_map(parsed: dict, valid_ids: set[str]) -> dict[str, str]:
    mapping: dict[str, str] = {}
    for item in parsed["pairs"]:
        fid = item["fact_id"]
        if fid in valid_ids and fid not in mapping:
            mapping[fid] = item["question"]
    return mapping


def generate_qa(rubric: FactualRubric, backend: ModelBackend, store: RunStore | None = None) -> QASet:
    """Convert each rubric fact into exactly one question (bijective by fact_id)."""
    if not rubric.facts:
        raise FagerError(f"cannot generate QA for empty rubric {rubric.prompt_id}")

    fp = stage_fingerprint(
        "qa",
        {"llm": backend.llm_model, "vlm": backend.vlm_model},
        templates.TEMPLATE_VERSION,
        rubric.to_json_dict(),
    )
    if store is not None:
        cached = store.cache_lookup("qa", fp)
        if cached is not None:
            return QASet.from_json_dict(cached)

    facts_payload = [
        {"fact_id": f.fact_id, "level": f.level.value, "category": f.category.value,
         "statement": f.statement}
        for f in rubric.facts
    ]
    req = ModelRequest(
        role_tag=RoleTag.QA_GENERATION,
        system_text=templates.system_text("qa_generation"),
        user_text=f"Facts:\n{dumps_canonical(facts_payload)}",
        response_schema_id="qa_list",
    )
    valid_ids = {f.fact_id for f in rubric.facts}
    parsed = backend.complete_structured(req)
    mapping = _question_map(parsed, valid_ids)

    missing = [f for f in rubric.facts if f.fact_id not in mapping]
    if missing:
        repair = ModelRequest(
            role_tag=req.role_tag,
            system_text=req.system_text,
            user_text=(
                req.user_text
                + "\n\nYour previous response did not convert every fact. "
                + "Missing fact_ids: "
                + dumps_canonical([f.fact_id for f in missing])
                + "\nRespond again with exactly one question per fact."
            ),
            response_schema_id="qa_list",
        )
        parsed = backend.complete_structured(repair)
        mapping = _question_map(parsed, valid_ids)
        missing = [f for f in rubric.facts if f.fact_id not in mapping]
        if missing:
            raise CardinalityError(
                f"QA generation left {len(missing)} fact(s) unconverted for {rubric.prompt_id}"
            )

    pairs = []
    for i, fact in enumerate(rubric.facts):
        question = mapping[fact.fact_id]
        if len(question) > QUESTION_LENGTH_CAP:
            log.warning("question for %s exceeds %d chars", fact.fact_id, QUESTION_LENGTH_CAP)
        pairs.append(
            QAPair(
                qa_id=f"{rubric.prompt_id}.qa.{i}",
                fact_id=fact.fact_id,
                level=fact.level,
                category=fact.category,
                question=question,
            )
        )
    qaset = QASet(prompt_id=rubric.prompt_id, pairs=tuple(pairs))
    if store is not None:
        store.cache_store("qa", fp, qaset.to_json_dict())
    return qaset


def split_by_level(qaset: QASet) -> dict[FactLevel, list[QAPair]]:
    """Partition pairs by level, preserving order within each level."""
    out: dict[FactLevel, list[QAPair]] = {lvl: [] for lvl in FactLevel}
    for pair in qaset.pairs:
        out[pair.level].append(pair)
    return out
