"""Exception hierarchy shared by every module."""

from __future__ import annotations

from typing import Any, Optional


class KnowledgeTuningError(Exception):
    """Root of all package errors."""


class UsageError(KnowledgeTuningError):
    """Invalid command-line usage."""


class DataError(KnowledgeTuningError, ValueError):
    """Malformed input data or violated data precondition."""


class PromptError(DataError):
    """A template could not be rendered from the given inputs."""


class QAParseError(DataError):
    """Generated text lacks a question/answer boundary."""

    def __init__(self, message: str, raw: str = "") -> None:
        super().__init__(message)
        self.raw = raw


class BackendError(KnowledgeTuningError, RuntimeError):
    """Generation backend failure, tagged with the pipeline stage that issued it."""

    def __init__(self, message: str, stage: Optional[str] = None, trace: Any = None) -> None:
        super().__init__(message)
        self.stage = stage
        self.trace = trace

    def __str__(self) -> str:
        base = super().__str__()
        return f"[{self.stage}] {base}" if self.stage else base


class CacheMissError(BackendError):
    """Strict replay found no cached response for a request."""


class ScriptMissError(BackendError):
    """Scripted backend has no entry for a prompt."""
