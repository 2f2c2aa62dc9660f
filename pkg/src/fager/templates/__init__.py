"""Loader for the versioned agent prompt templates.

The templates are the de facto algorithm of the agent stages; TEMPLATE_VERSION
is part of every cache fingerprint so template changes invalidate cleanly.
"""

from __future__ import annotations

from functools import lru_cache
from importlib import resources

#: Bump whenever any template file changes.
TEMPLATE_VERSION = "1"

REGENERATE_INSTRUCTION = (
    "The decision is REGENERATE: the image failed to capture the prompt's core "
    "object or scene. Produce a short constraint clause suitable for appending "
    "to the original prompt (no leading punctuation), restating the essential "
    "requirements the new image must satisfy."
)

EDIT_INSTRUCTION = (
    "The decision is EDIT: the image is broadly correct but has factual errors. "
    "Produce a concise edit instruction specifying ONLY the factual changes "
    "needed, leaving everything else unchanged."
)


@lru_cache(maxsize=None)
def _raw(name: str) -> str:
    return resources.files("fager.templates").joinpath(f"{name}.txt").read_text(encoding="utf-8")


@lru_cache(maxsize=None)
def definitions() -> str:
    return _raw("definitions").strip()


def system_text(name: str, **kwargs: str) -> str:
    """Render a template's system prompt with the shared definitions block."""
    return _raw(name).format(definitions=definitions(), **kwargs).strip()
