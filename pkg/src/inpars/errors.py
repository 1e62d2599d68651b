"""Exception types raised across the toolkit.

Every error the CLI can surface derives from InparsError so the entry
point can emit one machine-readable JSON object and a stable exit code.
"""
from __future__ import annotations


class InparsError(Exception):
    """Base class for all toolkit errors."""

    def payload(self) -> dict:
        return {"error": type(self).__name__, "detail": str(self)}


# corpus

class MalformedRecord(InparsError):
    def __init__(self, line_number: int, detail: str = ""):
        self.line_number = line_number
        msg = f"malformed record at line {line_number}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class DuplicateDocId(InparsError):
    def __init__(self, doc_id: str):
        self.doc_id = doc_id
        super().__init__(f"duplicate doc_id: {doc_id!r}")


class IoFailure(InparsError):
    pass


class InsufficientEligibleDocuments(InparsError):
    def __init__(self, eligible_count: int, requested_n: int):
        self.eligible_count = eligible_count
        self.requested_n = requested_n
        super().__init__(
            f"only {eligible_count} eligible documents, {requested_n} requested"
        )


# lexindex

class EmptyCorpus(InparsError):
    pass


class UnknownDocId(InparsError):
    def __init__(self, doc_id: str):
        self.doc_id = doc_id
        super().__init__(f"unknown doc_id: {doc_id!r}")


# promptkit

class MissingField(InparsError):
    def __init__(self, name: str, line_number: int):
        self.name = name
        self.line_number = line_number
        super().__init__(f"missing field {name!r} at line {line_number}")


# generator

class BackendUnavailable(InparsError):
    pass


class BackendProtocolError(InparsError):
    pass


class RateLimited(InparsError):
    def __init__(self, retry_after: float | None = None):
        self.retry_after = retry_after
        suffix = f" (retry after {retry_after}s)" if retry_after is not None else ""
        super().__init__(f"rate limited{suffix}")


class EmptyGeneration(InparsError):
    pass


class GbqParseFailure(InparsError):
    pass


class FailureRateExceeded(InparsError):
    def __init__(self, n_failed: int, n_requested: int, ceiling: float):
        self.n_failed = n_failed
        self.n_requested = n_requested
        self.ceiling = ceiling
        super().__init__(
            f"{n_failed}/{n_requested} generations failed, exceeds ceiling {ceiling:.0%}"
        )


# curation

class EmptyTokenList(InparsError):
    pass


class CorpusTooSmall(InparsError):
    pass


# rerankeval

class EmptyDocument(InparsError):
    def __init__(self, doc_id: str):
        self.doc_id = doc_id
        super().__init__(f"document {doc_id!r} has no text to score")


class UnknownMetric(InparsError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"unknown metric: {name!r}")


# pipeline

class MissingUpstreamArtifact(InparsError):
    def __init__(self, stage: str, path: str = ""):
        self.stage = stage
        self.path = path
        msg = f"stage {stage!r} has not produced its artifact yet"
        if path:
            msg += f" (expected {path})"
        super().__init__(msg)


class ConfigInvalid(InparsError):
    def __init__(self, field: str, detail: str = ""):
        self.field = field
        msg = f"invalid config field {field!r}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class OutputDirLocked(InparsError):
    pass
