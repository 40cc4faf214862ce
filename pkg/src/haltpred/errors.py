"""Exception hierarchy shared across the package."""

from __future__ import annotations


class HaltpredError(Exception):
    """Base class for all package errors."""


class ParseError(HaltpredError):
    def __init__(self, message: str, line: int, column: int, expected: frozenset[str] = frozenset()):
        self.line = line
        self.column = column
        self.expected = frozenset(expected)
        detail = f" (expected one of: {', '.join(sorted(self.expected))})" if self.expected else ""
        super().__init__(f"{line}:{column}: {message}{detail}")


class RuntimeFault(HaltpredError):
    pass


class UnknownTemplate(HaltpredError, KeyError):
    def __str__(self) -> str:
        return Exception.__str__(self)


class GenerationMismatch(HaltpredError):
    pass


class TooFewMinority(HaltpredError, ValueError):
    pass


class SequenceTooLong(HaltpredError, ValueError):
    pass


class NonFiniteGradient(HaltpredError, FloatingPointError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"non-finite gradient in parameter {name!r}")


class BetaOutOfRange(HaltpredError, ValueError):
    pass


class EmptyMinority(HaltpredError, ValueError):
    pass


class ValidationMissingClass(HaltpredError, ValueError):
    pass


class NonFiniteLoss(HaltpredError, FloatingPointError):
    def __init__(self, message: str, batch: list[int] | None = None, history: list | None = None):
        self.batch = list(batch or [])
        self.history = list(history or [])
        super().__init__(message)


class SingleClassInput(HaltpredError, ValueError):
    pass


class NoPositives(HaltpredError, ValueError):
    pass


class EmptyEnsemble(HaltpredError, ValueError):
    pass


class MembershipError(HaltpredError, ValueError):
    """An ensemble member violates the E1/E2/E3 composition rule."""


class TooManyTokens(HaltpredError, ValueError):
    pass


class SpanMismatch(HaltpredError, ValueError):
    pass


class NodeSetMismatch(HaltpredError, ValueError):
    pass
