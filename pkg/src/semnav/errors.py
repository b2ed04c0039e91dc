"""Exception hierarchy shared across the package."""

from __future__ import annotations


class SemnavError(Exception):
    """Base class for every error raised by semnav."""


class InvalidWorld(SemnavError, ValueError):
    pass


class PlanningError(SemnavError):
    pass


class NoPathError(PlanningError):
    """A* found no route. ``reason`` is one of ``goal_occupied``,
    ``start_occupied``, ``out_of_bounds`` or ``unreachable``."""

    def __init__(self, reason: str, detail: str = "") -> None:
        self.reason = reason
        super().__init__(f"{reason}: {detail}" if detail else reason)


class NoCandidatesError(PlanningError):
    pass


class NoPathAfterBuffer(PlanningError):
    pass


class ParseError(SemnavError):
    """Provider output could not be turned into a decision or plan."""


class MalformedJson(ParseError):
    pass


class MultipleObjects(ParseError):
    pass


class UnknownMode(ParseError):
    pass


class IndexOutOfRange(ParseError):
    pass


class BufferNotAllowed(ParseError):
    pass


class OutOfArena(ParseError):
    pass


class NoRuleMatched(SemnavError):
    pass


class ProviderFailure(SemnavError):
    pass


class ProviderTimeout(ProviderFailure):
    pass


class HttpError(ProviderFailure):
    def __init__(self, message: str, status: int | None = None) -> None:
        self.status = status
        super().__init__(message if status is None else f"HTTP {status}: {message}")


class AuthError(ProviderFailure):
    pass


class RateLimited(ProviderFailure):
    pass


class ReplayError(SemnavError):
    pass


class HashMismatch(ReplayError):
    pass


class ExhaustedTranscript(ReplayError):
    pass


class ScenarioError(SemnavError, ValueError):
    pass
