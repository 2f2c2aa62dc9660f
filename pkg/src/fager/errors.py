"""Exception hierarchy shared across the pipeline."""

from __future__ import annotations


class FagerError(Exception):
    """Base class for all pipeline errors."""


class ConfigError(FagerError):
    """Invalid or missing configuration."""


class TransportError(FagerError):
    """Retryable transport-level failure (network, 5xx)."""


class RateLimitError(TransportError):
    """Retryable rate-limit response."""


class AuthError(FagerError):
    """Fatal authentication failure."""


class ReplayMissError(FagerError):
    """Replay mode had no fixture for the request fingerprint."""

    def __init__(self, fingerprint: str):
        super().__init__(f"no replay fixture for fingerprint {fingerprint}")
        self.fingerprint = fingerprint


class StructuredOutputError(FagerError):
    """Model output failed schema validation after all repair attempts."""

    def __init__(self, schema_id: str, attempts: list[str]):
        super().__init__(
            f"structured output for schema '{schema_id}' failed after {len(attempts)} attempt(s)"
        )
        self.schema_id = schema_id
        self.attempts = attempts


class ImageReadError(FagerError):
    """An image path could not be read."""

    def __init__(self, path: str):
        super().__init__(f"cannot read image: {path}")
        self.path = path


class CardinalityError(FagerError):
    """Agent returned the wrong number of items after repair."""


class StageError(FagerError):
    """Pipeline stage failure, tagged with the failing stage."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


class ImageBackendError(FagerError):
    """Image generation/editing backend failure."""
