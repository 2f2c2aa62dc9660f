"""Fact proposal, reference-guided extraction, and verification stages.

Produces the verified FactualRubric with a complete add/drop/keep ledger.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Any

from . import templates
from .backend import ModelBackend, ModelRequest, RoleTag
from .errors import FagerError, StageError
from .model import (
    Fact,
    FactCategory,
    FactLevel,
    FactSource,
    FactualRubric,
    LedgerAction,
    LedgerEntry,
    PromptSpec,
    dumps_canonical,
    normalize_statement,
)
from .store import RunStore, stage_fingerprint

log = logging.getLogger(__name__)

#: Per-level fact caps; overflow is dropped in listed order.
LEVEL_CAPS: dict[FactLevel, int] = {FactLevel.L1: 5, FactLevel.L2: 10, FactLevel.L3: 15}

DEFAULT_L1_STATEMENT = "the main subject of the prompt is depicted"


@dataclass(frozen=True)
class FactProposal:
    prompt_id: str
    facts: tuple[Fact, ...]

    def to_json_dict(self) -> dict[str, Any]:
        return {"prompt_id": self.prompt_id, "facts": [f.to_json_dict() for f in self.facts]}

    @classmethod
    def from_json_dict(cls, d: dict[str, Any]) -> "FactProposal":
        return cls(prompt_id=d["prompt_id"], facts=tuple(Fact.from_json_dict(f) for f in d["facts"]))


@dataclass(frozen=True)
class ReferenceElements:
    prompt_id: str
    reference_image_ref: str
    elements: tuple[Fact, ...]

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "prompt_id": self.prompt_id,
            "reference_image_ref": self.reference_image_ref,
            "elements": [f.to_json_dict() for f in self.elements],
        }

    @classmethod
    def from_json_dict(cls, d: dict[str, Any]) -> "ReferenceElements":
        return cls(
            prompt_id=d["prompt_id"],
            reference_image_ref=d["reference_image_ref"],
            elements=tuple(Fact.from_json_dict(f) for f in d["elements"]),
        )


def _coerce_level(raw: str) -> FactLevel:
    try:
        return FactLevel(raw.strip().lower())
    except ValueError:
        log.warning("unrecognized fact level %r coerced to l3", raw)
        return FactLevel.L3


def _parse_fact_items(
    items: list[dict[str, Any]], prompt_id: str, stage: str, source: FactSource
) -> list[Fact]:
    facts: list[Fact] = []
    for i, item in enumerate(items):
        category = FactCategory.coerce(item.get("category", ""))
        if category is FactCategory.OTHERS and item.get("category", "").strip().lower() != "others":
            log.warning("category %r coerced to 'others'", item.get("category"))
        facts.append(
            Fact(
                fact_id=f"{prompt_id}.{stage}.{i}",
                level=_coerce_level(item["level"]),
                category=category,
                statement=item["statement"],
                source=source,
            )
        )
    return facts


def _model_ids(backend: ModelBackend) -> dict[str, str]:
    return {"llm": backend.llm_model, "vlm": backend.vlm_model}


def propose_facts(
    prompt: PromptSpec, backend: ModelBackend, store: RunStore | None = None
) -> FactProposal:
    """Run the fact proposal agent on the prompt text."""
    fp = stage_fingerprint(
        "proposal", _model_ids(backend), templates.TEMPLATE_VERSION, prompt.to_json_dict()
    )
    if store is not None:
        cached = store.cache_lookup("proposal", fp)
        if cached is not None:
            return FactProposal.from_json_dict(cached)
    req = ModelRequest(
        role_tag=RoleTag.FACT_PROPOSAL,
        system_text=templates.system_text("fact_proposal"),
        user_text=f"Prompt: {prompt.text}",
        response_schema_id="fact_list",
    )
    parsed = backend.complete_structured(req)
    facts = _parse_fact_items(parsed["facts"], prompt.prompt_id, "proposal", FactSource.PROPOSAL)
    if not any(f.level is FactLevel.L1 for f in facts):
        log.warning("proposal for %s has no l1 fact; injecting default", prompt.prompt_id)
        facts.append(
            Fact(
                fact_id=f"{prompt.prompt_id}.proposal.{len(facts)}",
                level=FactLevel.L1,
                category=FactCategory.EXISTENCE,
                statement=DEFAULT_L1_STATEMENT,
                source=FactSource.PROPOSAL,
            )
        )
    proposal = FactProposal(prompt_id=prompt.prompt_id, facts=tuple(facts))
    if store is not None:
        store.cache_store("proposal", fp, proposal.to_json_dict())
    return proposal


def extract_reference_facts(
    prompt: PromptSpec,
    reference_image: str,
    backend: ModelBackend,
    index: int = 0,
    store: RunStore | None = None,
) -> ReferenceElements:
    """Run the reference-guided extraction agent on one reference image."""
    req = ModelRequest(
        role_tag=RoleTag.REF_EXTRACTION,
        system_text=templates.system_text("ref_extraction"),
        user_text=f"Prompt: {prompt.text}\nDescribe only what is directly visible in the image.",
        images=(reference_image,),
        response_schema_id="fact_list",
    )
    # fingerprinting reads the image, so an unreadable path fails here
    request_fp = backend.fingerprint(req)
    fp = stage_fingerprint(
        "refelems",
        _model_ids(backend),
        templates.TEMPLATE_VERSION,
        {"prompt": prompt.to_json_dict(), "image": request_fp, "index": index},
    )
    if store is not None:
        cached = store.cache_lookup("refelems", fp)
        if cached is not None:
            return ReferenceElements.from_json_dict(cached)
    parsed = backend.complete_structured(req)
    elements = _parse_fact_items(
        parsed["facts"], prompt.prompt_id, f"ref{index}", FactSource.REFERENCE
    )
    result = ReferenceElements(
        prompt_id=prompt.prompt_id, reference_image_ref=reference_image, elements=tuple(elements)
    )
    if store is not None:
        store.cache_store("refelems", fp, result.to_json_dict())
    return result


def _facts_payload(facts: list[Fact]) -> list[dict[str, Any]]:
    return [
        {"fact_id": f.fact_id, "level": f.level.value, "category": f.category.value,
         "statement": f.statement, "source": f.source.value}
        for f in facts
    ]


def verify(
    proposal: FactProposal,
    refs: list[ReferenceElements],
    prompt: PromptSpec,
    backend: ModelBackend,
    store: RunStore | None = None,
) -> FactualRubric:
    """Consolidate proposal and reference elements into the verified rubric.

    Every input fact lands in exactly one ledger entry; verification-added
    facts are ledgered as added; drops carry the agent's reason.
    """
    if not proposal.facts:
        raise FagerError(f"cannot verify an empty proposal for {prompt.prompt_id}")

    inputs: list[Fact] = list(proposal.facts)
    for ref in refs:
        inputs.extend(ref.elements)

    fp = stage_fingerprint(
        "verify",
        _model_ids(backend),
        templates.TEMPLATE_VERSION,
        {"prompt": prompt.to_json_dict(), "facts": _facts_payload(inputs)},
    )
    if store is not None:
        cached = store.cache_lookup("verify", fp)
        if cached is not None:
            return FactualRubric.from_json_dict(cached)

    user_text = (
        f"Prompt: {prompt.text}\n\n"
        f"Proposed facts:\n{dumps_canonical(_facts_payload(list(proposal.facts)))}\n\n"
        f"Reference-derived elements:\n"
        f"{dumps_canonical([_facts_payload(list(r.elements)) for r in refs])}"
    )
    req = ModelRequest(
        role_tag=RoleTag.VERIFICATION,
        system_text=templates.system_text(
            "verification",
            max_l1=str(LEVEL_CAPS[FactLevel.L1]),
            max_l2=str(LEVEL_CAPS[FactLevel.L2]),
            max_l3=str(LEVEL_CAPS[FactLevel.L3]),
        ),
        user_text=user_text,
        response_schema_id="verification",
    )
    parsed = backend.complete_structured(req)

    decisions: dict[str, tuple[str, str]] = {}
    known_ids = {f.fact_id for f in inputs}
    for d in parsed["decisions"]:
        if d["fact_id"] in known_ids and d["fact_id"] not in decisions:
            decisions[d["fact_id"]] = (d["action"], d["reason"])

    added_facts: list[tuple[Fact, str]] = []
    for i, item in enumerate(parsed["added"]):
        added_facts.append(
            (
                Fact(
                    fact_id=f"{prompt.prompt_id}.verify.{i}",
                    level=_coerce_level(item["level"]),
                    category=FactCategory.coerce(item["category"]),
                    statement=item["statement"],
                    source=FactSource.VERIFICATION_ADDED,
                ),
                item["reason"],
            )
        )

    ledger: list[LedgerEntry] = []
    kept: list[tuple[Fact, LedgerAction, str]] = []  # survivors with their pending entry
    seen_statements: set[str] = set()

    for fact in inputs:
        action, reason = decisions.get(fact.fact_id, ("kept", "kept (no explicit decision)"))
        if action == "dropped":
            ledger.append(LedgerEntry(LedgerAction.DROPPED, fact.fact_id, reason))
            continue
        norm = normalize_statement(fact.statement)
        if norm in seen_statements:
            ledger.append(LedgerEntry(LedgerAction.DROPPED, fact.fact_id, "duplicate statement"))
            continue
        seen_statements.add(norm)
        kept.append((fact, LedgerAction.KEPT, reason))

    for fact, reason in added_facts:
        norm = normalize_statement(fact.statement)
        if norm in seen_statements:
            ledger.append(LedgerEntry(LedgerAction.DROPPED, fact.fact_id, "duplicate statement"))
            continue
        seen_statements.add(norm)
        kept.append((fact, LedgerAction.ADDED, reason))

    # enforce per-level caps in listed order
    level_counts: dict[FactLevel, int] = {lvl: 0 for lvl in FactLevel}
    final: list[Fact] = []
    for fact, action, reason in kept:
        if level_counts[fact.level] >= LEVEL_CAPS[fact.level]:
            ledger.append(
                LedgerEntry(LedgerAction.DROPPED, fact.fact_id, f"{fact.level.value} cap exceeded")
            )
            continue
        level_counts[fact.level] += 1
        final.append(fact)
        ledger.append(LedgerEntry(action, fact.fact_id, reason))

    if not final:
        raise FagerError(f"verification produced an empty rubric for {prompt.prompt_id}")

    if not any(f.level is FactLevel.L1 for f in final):
        log.warning("no l1 fact survived verification for %s; injecting default", prompt.prompt_id)
        injected = Fact(
            fact_id=f"{prompt.prompt_id}.verify.{len(added_facts)}",
            level=FactLevel.L1,
            category=FactCategory.EXISTENCE,
            statement=DEFAULT_L1_STATEMENT,
            source=FactSource.VERIFICATION_ADDED,
        )
        final.append(injected)
        ledger.append(
            LedgerEntry(LedgerAction.ADDED, injected.fact_id, "no l1 fact survived verification")
        )

    rubric = FactualRubric(prompt_id=prompt.prompt_id, facts=tuple(final), ledger=tuple(ledger))
    if store is not None:
        store.cache_store("verify", fp, rubric.to_json_dict())
    return rubric


def build_rubric(
    prompt: PromptSpec,
    reference_images: list[str],
    backend: ModelBackend,
    store: RunStore | None = None,
) -> FactualRubric:
    """Full left-half pipeline: propose, extract per reference, verify; persists intermediates."""
    try:
        proposal = propose_facts(prompt, backend, store)
    except Exception as exc:
        raise StageError("proposal", exc) from exc
    if store is not None:
        store.save_artifact(prompt.prompt_id, "proposal.json", proposal.to_json_dict())

    refs: list[ReferenceElements] = []
    for i, image in enumerate(reference_images):
        try:
            ref = extract_reference_facts(prompt, image, backend, index=i, store=store)
        except Exception as exc:
            raise StageError(f"refelems.{i}", exc) from exc
        refs.append(ref)
        if store is not None:
            store.save_artifact(prompt.prompt_id, f"refelems.{i}.json", ref.to_json_dict())

    try:
        rubric = verify(proposal, refs, prompt, backend, store)
    except Exception as exc:
        raise StageError("verify", exc) from exc
    if store is not None:
        store.save_artifact(prompt.prompt_id, "rubric.json", rubric.to_json_dict())
    return rubric
