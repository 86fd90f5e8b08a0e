"""Exception hierarchy shared by every semcache module."""

from typing import Optional


class SemcacheError(Exception):
    """Base class for all semcache failures."""


class DatasetError(SemcacheError):
    """A JSONL artifact is malformed or violates a dataset invariant."""

    def __init__(self, message: str, path: Optional[str] = None, line_number: Optional[int] = None):
        self.path = path
        self.line_number = line_number
        location = ""
        if path is not None:
            location = f"{path}:{line_number}: " if line_number is not None else f"{path}: "
        super().__init__(f"{location}{message}")


class EmbeddingError(SemcacheError):
    """Bad embedding input or an unusable vector."""


class StoreError(SemcacheError):
    """Vector store misuse: duplicate ids or mismatched dimensions."""


class ProviderError(SemcacheError):
    """A single call to a remote service failed."""

    def __init__(
        self,
        message: str,
        status_code: Optional[int] = None,
        transient: bool = False,
        attempts: int = 1,
    ):
        self.status_code = status_code
        self.transient = transient
        self.attempts = attempts
        super().__init__(message)


class RetriesExhaustedError(ProviderError):
    """Every permitted attempt failed with a transient error."""


class ContractViolationError(ProviderError):
    """A remote service answered with a payload that breaks its wire contract."""


class LlmParseError(SemcacheError):
    """No JSON array of strings could be recovered from a completion."""

    def __init__(self, message: str, raw: str):
        self.raw = raw
        super().__init__(message)


class ScriptMissError(SemcacheError):
    """The scripted provider has no response for a request."""


class TemplateError(SemcacheError):
    """A prompt template is unusable."""


class DocumentTooLongError(SemcacheError):
    """A document exceeds the prompt character budget."""

    def __init__(self, doc_id: str, size: int, budget: int):
        self.doc_id = doc_id
        self.size = size
        self.budget = budget
        super().__init__(
            f"document {doc_id!r} has {size} characters, over the budget of {budget}"
        )


class ReplayAbortedError(SemcacheError):
    """A replay stopped on an operational failure; partial records are not counted."""

    def __init__(self, message: str, records: list):
        self.records = records
        super().__init__(message)


class ConfigError(SemcacheError):
    """The resolved run configuration is invalid."""
