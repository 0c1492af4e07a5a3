"""Exception hierarchy shared by the store, policies and harness."""

from __future__ import annotations


class MarsError(Exception):
    """Base class for every error raised by marsmem."""


class UnknownParent(MarsError):
    pass


class UnknownId(MarsError):
    pass


class InvalidSensitivity(MarsError):
    pass


class NonPositiveWeight(MarsError):
    pass


class InvalidPayload(MarsError):
    pass


class InvalidFilter(MarsError):
    pass


class UnknownAnchor(MarsError):
    pass


class MalformedDocument(MarsError):
    pass


class UnknownPredicate(MalformedDocument):
    pass


class DanglingReference(MalformedDocument):
    pass


class BudgetUnsatisfiable(MarsError):
    """Raised when no feasible eviction remains but the store is still over budget.

    ``outcome`` carries the partial :class:`~marsmem.policies.PolicyOutcome`;
    evictions performed before exhaustion stay applied (each was feasible).
    """

    def __init__(self, message: str, outcome=None):
        super().__init__(message)
        self.outcome = outcome


class EmptyCandidates(MarsError):
    pass


class PrivacyBudgetExhausted(MarsError):
    pass


class NotAdjacent(MarsError):
    pass


class UnknownUser(MarsError):
    pass


class MemberNotLive(MarsError):
    pass


class TooLarge(MarsError):
    pass


class NeverSeen(MarsError):
    pass


class ScriptFailure(MarsError):
    pass


class ComponentOutOfRange(MarsError):
    pass


class UnpairedCells(MarsError):
    pass
