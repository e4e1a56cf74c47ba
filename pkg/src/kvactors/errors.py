"""Exception hierarchy shared by every layer of the runtime."""


class KVActorError(Exception):
    pass


class InvalidValue(KVActorError, ValueError):
    pass


# -- state access ---------------------------------------------------------

class KeyNotAcquired(KVActorError):
    pass


class ReadOnlyAccess(KVActorError):
    pass


class KeyAbsent(KVActorError):
    pass


class StaleApply(KVActorError):
    pass


# -- dependencies ---------------------------------------------------------

class DependencyError(KVActorError):
    pass


class DuplicateFunctionId(DependencyError):
    pass


class UnknownFunction(DependencyError):
    pass


class FollowerIneligible(DependencyError):
    pass


class LeaderKeyMissing(DependencyError):
    pass


class LeaderIneligible(DependencyError):
    pass


class DuplicateDependency(DependencyError):
    pass


class HopLimitExceeded(DependencyError):
    pass


class ForwardingDepthExceeded(KVActorError, RuntimeError):
    """Forwarding recursion went past the hard cap; indicates a runtime bug."""


# -- transactions ---------------------------------------------------------

class TxnError(KVActorError):
    pass


class EmptySpec(TxnError):
    pass


class UndeclaredAccess(TxnError):
    pass


class UnknownBatch(TxnError):
    pass


class TxnAborted(TxnError):
    """The transaction was aborted; ``cause`` names why."""

    def __init__(self, message: str = "", *, cause: str = "Die", tid: int | None = None):
        super().__init__(message or cause)
        self.cause = cause
        self.tid = tid


class ParticipantTimeout(TxnError):
    pass


class ModeConflict(KVActorError):
    pass


# -- persistence ----------------------------------------------------------

class LogError(KVActorError):
    pass


class IoFailure(LogError):
    pass


class LogWriteFailure(LogError):
    pass


class CorruptRecord(LogError):
    def __init__(self, message: str, state=None):
        super().__init__(message)
        # whatever was successfully replayed before the corrupt record
        self.state = state


class OrderViolation(LogError):
    pass


# -- workloads / bench ----------------------------------------------------

class InsufficientActors(KVActorError, ValueError):
    pass


class ConfigError(KVActorError, ValueError):
    pass


class InvariantViolation(KVActorError, AssertionError):
    pass
