#!/usr/bin/env python3
"""Generate the shipped toy fixtures: manifest, images, and replay responses.

Runs the full pipeline in record mode against a scripted transport, so the
fixture store is keyed by the exact request fingerprints the pipeline
produces. Re-run after changing any prompt template, then commit the output.
"""

from __future__ import annotations

import json
import re
import shutil
import sys
import zlib
import struct
from dataclasses import replace
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(ROOT / "src"))

from fager.backend import BackendMode, ModelBackend, ModelRequest, RoleTag  # noqa: E402
from fager.evaluate import EvalConfig, evaluate  # noqa: E402
from fager.qa import generate_qa  # noqa: E402
from fager.rubric import build_rubric  # noqa: E402
from fager.store import ManifestEntry, load_manifest, save_manifest  # noqa: E402

FIXTURES = ROOT / "fixtures"
IMAGES = FIXTURES / "images"
RESPONSES = FIXTURES / "responses"


def write_png(path: Path, rgb: tuple[int, int, int], size: int = 8) -> None:
    """Minimal solid-color RGB PNG, written without any imaging library."""
    raw = b"".join(b"\x00" + bytes(rgb) * size for _ in range(size))

    def chunk(tag: bytes, data: bytes) -> bytes:
        return (
            struct.pack(">I", len(data))
            + tag
            + data
            + struct.pack(">I", zlib.crc32(tag + data) & 0xFFFFFFFF)
        )

    ihdr = struct.pack(">IIBBBBB", size, size, 8, 2, 0, 0, 0)
    png = (
        b"\x89PNG\r\n\x1a\n"
        + chunk(b"IHDR", ihdr)
        + chunk(b"IDAT", zlib.compress(raw))
        + chunk(b"IEND", b"")
    )
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(png)


# ---------------------------------------------------------------------------
# canned agent outputs

PROPOSALS = {
    "Ethanol": [
        {"level": "l1", "category": "existence", "statement": "a molecular model of ethanol is depicted"},
        {"level": "l2", "category": "counting", "statement": "the molecule contains two carbon atoms"},
        {"level": "l2", "category": "counting", "statement": "the molecule contains one oxygen atom"},
        {"level": "l2", "category": "counting", "statement": "the molecule contains six hydrogen atoms"},
        {"level": "l3", "category": "color", "statement": "the oxygen atom is red"},
        {"level": "l3", "category": "relation", "statement": "the hydroxyl group is attached to an end carbon"},
    ],
    "Statue of Liberty": [
        {"level": "l1", "category": "existence", "statement": "the statue of liberty is depicted"},
        {"level": "l1", "category": "scene", "statement": "the statue stands in an outdoor setting"},
        {"level": "l2", "category": "color", "statement": "the statue has a copper-colored appearance"},
        {"level": "l2", "category": "posture", "statement": "the right arm is raised holding a torch"},
        {"level": "l3", "category": "counting", "statement": "the crown has seven spikes"},
    ],
    "apple": [
        {"level": "l1", "category": "existence", "statement": "an apple is present"},
        {"level": "l1", "category": "scene", "statement": "a wooden table is visible"},
        {"level": "l2", "category": "relation", "statement": "the apple is on the table"},
        {"level": "l2", "category": "color", "statement": "the apple is red"},
    ],
}

REF_ELEMENTS = {
    "Ethanol": [
        {"level": "l2", "category": "counting", "statement": "nine atom spheres are visible in the model"},
        {"level": "l2", "category": "shape", "statement": "the model uses a ball-and-stick structure"},
    ],
    "apple": [
        {"level": "l2", "category": "color", "statement": "the apple is red"},
        {"level": "l3", "category": "shape", "statement": "the table top has visible wood grain"},
    ],
}

ADDED = {
    "Statue of Liberty": [
        {
            "level": "l3",
            "category": "others",
            "statement": "the tablet bears the inscription JULY IV MDCCLXXVI",
            "reason": "identity-defining detail implied by the prompt",
        }
    ],
}

# per generated image: substrings of facts whose questions should answer "no"
NO_ANSWERS = {
    "ethanol_gen.png": ["six hydrogen"],
    "statue_gen.png": ["statue of liberty is depicted", "outdoor setting", "copper-colored"],
}
UNKNOWN_ANSWERS = {
    "ethanol_gen.png": ["wood grain"],  # unused; kept for shape of the table
}

FEEDBACK = {
    "EDIT": "change the molecule so that exactly six hydrogen atoms are shown",
    "REGENERATE": "the Statue of Liberty in an outdoor harbor setting",
}


def _facts_in(text: str) -> list[dict]:
    return [json.loads(m) for m in re.findall(r'\{[^{}]*"fact_id"[^{}]*\}', text)]


def _questions_in(text: str) -> list[dict]:
    return [json.loads(m) for m in re.findall(r'\{[^{}]*"qa_id"[^{}]*\}', text)]


def scripted_transport(req: ModelRequest, model: str) -> str:
    if req.role_tag is RoleTag.FACT_PROPOSAL:
        for key, facts in PROPOSALS.items():
            if key in req.user_text:
                return json.dumps({"facts": facts})
        raise AssertionError(f"no canned proposal for: {req.user_text[:80]}")

    if req.role_tag is RoleTag.REF_EXTRACTION:
        for key, facts in REF_ELEMENTS.items():
            if key in req.user_text:
                return json.dumps({"facts": facts})
        raise AssertionError(f"no canned reference elements for: {req.user_text[:80]}")

    if req.role_tag is RoleTag.VERIFICATION:
        facts = _facts_in(req.user_text)
        decisions = []
        for f in facts:
            if "oxygen atom is red" in f["statement"]:
                decisions.append(
                    {"fact_id": f["fact_id"], "action": "dropped",
                     "reason": "depiction convention, not a fact"}
                )
            else:
                decisions.append(
                    {"fact_id": f["fact_id"], "action": "kept",
                     "reason": "necessary and visually verifiable"}
                )
        added = []
        for key, items in ADDED.items():
            if key in req.user_text:
                added = items
        return json.dumps({"decisions": decisions, "added": added})

    if req.role_tag is RoleTag.QA_GENERATION:
        facts = _facts_in(req.user_text)
        pairs = []
        for f in facts:
            statement = f["statement"]
            if statement == "an apple is present":
                question = "Is there an apple?"
            elif statement == "the apple is on the table":
                question = "Is the main object on the table?"
            else:
                question = f"Does the image show that {statement}?"
            pairs.append({"fact_id": f["fact_id"], "question": question})
        return json.dumps({"pairs": pairs})

    if req.role_tag is RoleTag.EVALUATION:
        if req.response_schema_id == "feedback":
            mode = "REGENERATE" if "REGENERATE" in req.system_text else "EDIT"
            return json.dumps({"feedback": FEEDBACK[mode]})
        image_name = Path(req.images[0]).name if req.images else ""
        answers = []
        for q in _questions_in(req.user_text):
            answer = "yes"
            for marker in NO_ANSWERS.get(image_name, []):
                if marker in q["question"]:
                    answer = "no"
            answers.append(
                {"qa_id": q["qa_id"], "answer": answer,
                 "rationale": f"the image {'does not show' if answer == 'no' else 'shows'} this"}
            )
        return json.dumps({"answers": answers})

    raise AssertionError(f"unexpected role: {req.role_tag}")


def main() -> None:
    if RESPONSES.exists():
        shutil.rmtree(RESPONSES)

    write_png(IMAGES / "ethanol_ref.png", (200, 200, 200))
    write_png(IMAGES / "ethanol_real.png", (210, 210, 210))
    write_png(IMAGES / "ethanol_gen.png", (90, 120, 200))
    write_png(IMAGES / "statue_real.png", (120, 180, 140))
    write_png(IMAGES / "statue_gen.png", (30, 40, 50))
    write_png(IMAGES / "apple_ref.png", (190, 40, 40))
    write_png(IMAGES / "apple_real.png", (200, 50, 40))
    write_png(IMAGES / "apple_gen.png", (180, 60, 50))

    entries = [
        ManifestEntry(
            prompt_id="ethanol",
            prompt="A molecule of Ethanol",
            dataset="toy-science",
            reference_images=("images/ethanol_ref.png",),
            factual_image="images/ethanol_real.png",
            generated_image="images/ethanol_gen.png",
        ),
        ManifestEntry(
            prompt_id="liberty1890",
            prompt="the Statue of Liberty in 1890",
            dataset="toy-history",
            factual_image="images/statue_real.png",
            generated_image="images/statue_gen.png",
        ),
        ManifestEntry(
            prompt_id="apple",
            prompt="an apple on a wooden table",
            dataset="toy-objects",
            reference_images=("images/apple_ref.png",),
            factual_image="images/apple_real.png",
            generated_image="images/apple_gen.png",
        ),
    ]
    save_manifest(entries, FIXTURES / "manifest.jsonl")

    backend = ModelBackend(
        BackendMode.RECORD,
        llm_model="gpt-5.4-mini",
        vlm_model="qwen3-vl-8b-instruct",
        fixture_dir=RESPONSES,
        transport=scripted_transport,
    )

    for entry in load_manifest(FIXTURES / "manifest.jsonl", mode="ab"):
        prompt = entry.to_prompt_spec()
        rubric = build_rubric(prompt, list(entry.reference_images), backend)
        qaset = generate_qa(rubric, backend)
        gated = EvalConfig(gated=True)
        ungated = EvalConfig(gated=False)
        evaluate(entry.generated_image, qaset, gated, backend, rubric=rubric, prompt=prompt)
        evaluate(entry.generated_image, qaset, ungated, backend, rubric=rubric, prompt=prompt)
        evaluate(entry.factual_image, qaset, ungated, backend, rubric=rubric, prompt=prompt)
        print(f"{entry.prompt_id}: {len(rubric.facts)} facts, {len(qaset.pairs)} questions")

    n = len(list(RESPONSES.glob("*.json")))
    print(f"recorded {n} response fixtures in {RESPONSES}")


if __name__ == "__main__":
    main()
