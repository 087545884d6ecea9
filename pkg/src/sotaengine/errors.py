"""Exception hierarchy for the engine."""

from __future__ import annotations


class EngineError(Exception):
    """Base class for all engine errors."""


class ConfigError(EngineError):
    """Invalid configuration or usage; the CLI maps this to exit status 2."""


class UnknownTaskError(EngineError, KeyError):
    def __init__(self, seq):
        super().__init__(f"unknown task seq {seq!r}")
        self.seq = seq

    def __str__(self) -> str:
        return self.args[0]


class InvalidTransitionError(EngineError):
    pass


class RubricError(EngineError):
    pass


class SnapshotError(EngineError):
    pass


class LedgerError(EngineError):
    pass


class NotImprovingError(LedgerError):
    """advance_best called with a value that is not strictly better."""


class ReideationRequired(EngineError):
    """No cleared, unexecuted hypothesis is available for selection."""


class LeapAborted(EngineError):
    """All leap candidates were rejected; fall back to normal selection."""


class PatchConflict(EngineError):
    pass


class PlanHalted(EngineError):
    pass


class CorruptStateError(EngineError):
    """Persisted scheduler state cannot be parsed; refuse to guess."""


class SchedulerHalt(EngineError):
    """State could not be persisted; the scheduler must not continue."""


class FetchError(EngineError):
    pass


class FetchTimeout(FetchError):
    pass
