"""JSON schemas for structured agent outputs, keyed by response_schema_id."""

from __future__ import annotations

from typing import Any

_FACT_ITEM = {
    "type": "object",
    "required": ["level", "category", "statement"],
    "properties": {
        "level": {"type": "string"},
        "category": {"type": "string"},
        "statement": {"type": "string", "minLength": 1},
    },
}

SCHEMAS: dict[str, dict[str, Any]] = {
    "fact_list": {
        "type": "object",
        "required": ["facts"],
        "properties": {"facts": {"type": "array", "items": _FACT_ITEM}},
    },
    "verification": {
        "type": "object",
        "required": ["decisions", "added"],
        "properties": {
            "decisions": {
                "type": "array",
                "items": {
                    "type": "object",
                    "required": ["fact_id", "action", "reason"],
                    "properties": {
                        "fact_id": {"type": "string"},
                        "action": {"type": "string", "enum": ["kept", "dropped"]},
                        "reason": {"type": "string"},
                    },
                },
            },
            "added": {
                "type": "array",
                "items": {
                    "type": "object",
                    "required": ["level", "category", "statement", "reason"],
                    "properties": {
                        "level": {"type": "string"},
                        "category": {"type": "string"},
                        "statement": {"type": "string", "minLength": 1},
                        "reason": {"type": "string"},
                    },
                },
            },
        },
    },
    "qa_list": {
        "type": "object",
        "required": ["pairs"],
        "properties": {
            "pairs": {
                "type": "array",
                "items": {
                    "type": "object",
                    "required": ["fact_id", "question"],
                    "properties": {
                        "fact_id": {"type": "string"},
                        "question": {"type": "string", "minLength": 1},
                    },
                },
            }
        },
    },
    "answer_list": {
        "type": "object",
        "required": ["answers"],
        "properties": {
            "answers": {
                "type": "array",
                "items": {
                    "type": "object",
                    "required": ["qa_id", "answer", "rationale"],
                    "properties": {
                        "qa_id": {"type": "string"},
                        "answer": {"type": "string"},
                        "rationale": {"type": "string"},
                    },
                },
            }
        },
    },
    "feedback": {
        "type": "object",
        "required": ["feedback"],
        "properties": {"feedback": {"type": "string", "minLength": 1}},
    },
}
