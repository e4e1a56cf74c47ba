"""Transactional key-value state for virtual actors."""

from .dependency import CyclePolicy, DependencyRecord, DepType, FunctionRegistry
from .logstore import LogMode
from .runtime import Runtime, RuntimeConfig, TransactionalActor
from .scheduler import AccessSpec, Granularity, TxnContext
from .state import R, RW, AccessMode, ActorState, DictionaryState
from .values import ActorId, Key, Record, dec

__all__ = [
    "AccessMode", "AccessSpec", "ActorId", "ActorState", "CyclePolicy", "DepType", "DependencyRecord",
    "DictionaryState", "FunctionRegistry", "Granularity", "Key", "LogMode", "R", "RW", "Record", "Runtime",
    "RuntimeConfig", "TransactionalActor", "TxnContext", "dec",
]
