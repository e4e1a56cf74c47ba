"""Actor state model: master state, operation logs and per-transaction views."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterable, Iterator, Optional

from .errors import KeyAbsent, KeyNotAcquired, ReadOnlyAccess, StaleApply
from .values import ActorId, Key, Value, normalize

if TYPE_CHECKING:
    from .dependency import DependencyRecord


class OpKind(enum.IntEnum):
    PUT = 1
    DELETE = 2
    REGISTER_DEP = 3
    DEREGISTER_DEP = 4


class AccessMode(enum.Enum):
    READ = "R"
    READ_WRITE = "RW"

    @classmethod
    def parse(cls, s) -> AccessMode:
        if isinstance(s, AccessMode):
            return s
        return cls(str(s).upper())


R = AccessMode.READ
RW = AccessMode.READ_WRITE


@dataclass(frozen=True, slots=True)
class OperationLog:
    seq: int
    op: OpKind
    key: Key
    before: Optional[Value] = None
    after: Optional[Value] = None
    dep: Optional["DependencyRecord"] = None

    def __post_init__(self):
        if self.op is OpKind.PUT and self.after is None:
            raise ValueError("Put requires an after-image")
        if self.op is OpKind.DELETE and self.after is not None:
            raise ValueError("Delete must not carry an after-image")
        if self.op in (OpKind.REGISTER_DEP, OpKind.DEREGISTER_DEP):
            if self.dep is None or self.before is not None or self.after is not None:
                raise ValueError("dependency ops carry a record and no values")


def _add_dep(records: list, record) -> bool:
    ident = record.identity
    if any(r.identity == ident for r in records):
        return False
    records.append(record)
    return True


def _remove_dep(records: list, record) -> bool:
    ident = record.identity
    for i, r in enumerate(records):
        if r.identity == ident:
            del records[i]
            return True
    return False


class ActorState:
    """The committed (master) state of one actor."""

    def __init__(self, actor_id: ActorId | None = None):
        self.actor_id = actor_id
        self.kv: dict[Key, Value] = {}
        self.deps: dict[Key, list[DependencyRecord]] = {}
        self.last_applied_tid = 0
        # tids already applied; commit order is not tid order for ACTs
        self.applied: set[int] = set()

    def get(self, key: Key) -> Optional[Value]:
        return self.kv.get(key)

    def deps_of(self, key: Key) -> list[DependencyRecord]:
        return self.deps.get(key, [])

    def keys(self) -> Iterable[Key]:
        return self.kv.keys()

    def all_records(self) -> Iterator[tuple[Key, DependencyRecord]]:
        for key, records in self.deps.items():
            for r in records:
                yield key, r

    def copy(self) -> ActorState:
        other = ActorState(self.actor_id)
        other.kv = dict(self.kv)
        other.deps = {k: list(v) for k, v in self.deps.items()}
        other.last_applied_tid = self.last_applied_tid
        other.applied = set(self.applied)
        return other

    def canonical(self):
        """Order-insensitive structural form used for equality."""
        return (
            dict(self.kv),
            {k: frozenset(v) for k, v in self.deps.items() if v},
            self.last_applied_tid,
        )

    def __eq__(self, other):
        if not isinstance(other, ActorState):
            return NotImplemented
        return self.canonical() == other.canonical()

    def __repr__(self):
        return f"ActorState({self.actor_id}, keys={len(self.kv)}, deps={sum(map(len, self.deps.values()))})"


def apply_ops(kv: dict, deps: dict, log: Iterable[OperationLog], tombstone=None) -> None:
    """Apply ``log`` onto raw kv/deps maps.

    With ``tombstone`` set, deletes write the sentinel instead of popping, so
    the maps can act as an overlay over another state.
    """
    for entry in log:
        op = entry.op
        if op is OpKind.PUT:
            kv[entry.key] = entry.after
        elif op is OpKind.DELETE:
            if tombstone is None:
                kv.pop(entry.key, None)
            else:
                kv[entry.key] = tombstone
        elif op is OpKind.REGISTER_DEP:
            _add_dep(deps.setdefault(entry.key, []), entry.dep)
        else:
            records = deps.get(entry.key)
            if records is not None:
                _remove_dep(records, entry.dep)
                if not records and tombstone is None:
                    del deps[entry.key]


def apply_committed(master: ActorState, log: Iterable[OperationLog], tid: int) -> None:
    """Fold one committed transaction's log into the master state."""
    if tid in master.applied:
        raise StaleApply(f"tid {tid} already applied to {master.actor_id}")
    apply_ops(master.kv, master.deps, log)
    master.applied.add(tid)
    if tid > master.last_applied_tid:
        master.last_applied_tid = tid


_TOMB = object()


class Overlay:
    """Uncommitted effects of finished PACT turns layered over the master.

    Later PACTs of the same batch read through it; it is folded into the
    master only when the batch commits.
    """

    def __init__(self, master: ActorState):
        self.master = master
        self.kv: dict = {}
        self.deps: dict = {}

    def get(self, key: Key) -> Optional[Value]:
        v = self.kv.get(key, None)
        if v is None:
            return self.master.kv.get(key)
        return None if v is _TOMB else v

    def deps_of(self, key: Key) -> list:
        records = self.deps.get(key)
        if records is None:
            return self.master.deps_of(key)
        return records

    def keys(self) -> Iterable[Key]:
        seen = [k for k in self.master.kv if self.kv.get(k) is not _TOMB]
        extra = [k for k, v in self.kv.items() if v is not _TOMB and k not in self.master.kv]
        return seen + extra

    def apply(self, log: Iterable[OperationLog]) -> None:
        log = list(log)
        for entry in log:
            if entry.op in (OpKind.REGISTER_DEP, OpKind.DEREGISTER_DEP) and entry.key not in self.deps:
                self.deps[entry.key] = list(self.master.deps_of(entry.key))
        apply_ops(self.kv, self.deps, log, tombstone=_TOMB)

    def clear(self) -> None:
        self.kv.clear()
        self.deps.clear()

    def __bool__(self) -> bool:
        return bool(self.kv or self.deps)


class _Entry:
    __slots__ = ("value", "mode")

    def __init__(self, value, mode: AccessMode):
        self.value = value
        self.mode = mode


class DictionaryState:
    """One transaction's isolated view of the keys it acquired on one actor.

    ``base`` is whatever the transaction reads through (master or batch
    overlay); it is never written. With ``whole`` set, every key of the actor
    is implicitly acquired (actor-level access) and copied on first touch.
    """

    def __init__(self, txn, actor_id: ActorId | None = None, *, base=None, whole: AccessMode | None = None):
        self.txn = txn
        self.actor_id = actor_id
        self.entries: dict[Key, _Entry] = {}
        self.dep_view: dict[Key, list] = {}
        self.log: list[OperationLog] = []
        self._base = base
        self._whole = whole
        # index into ``log`` up to which forwards have been resolved
        self.forward_cursor = 0

    # -- acquisition (runtime only) --------------------------------------

    def acquire(self, key: Key, mode: AccessMode = RW) -> None:
        entry = self.entries.get(key)
        if entry is not None:
            if mode is RW and entry.mode is R:
                entry.mode = RW
            return
        if self._base is not None:
            value = self._base.get(key)
            deps = list(self._base.deps_of(key))
        else:
            value, deps = None, []
        self.entries[key] = _Entry(value, mode)
        self.dep_view[key] = deps

    def grant_whole(self, mode: AccessMode = RW) -> None:
        if self._whole is None or (mode is RW and self._whole is R):
            self._whole = mode

    @property
    def whole(self) -> Optional[AccessMode]:
        return self._whole

    def has(self, key: Key) -> bool:
        return key in self.entries or self._whole is not None

    def _entry(self, key: Key) -> _Entry:
        entry = self.entries.get(key)
        if entry is None:
            if self._whole is None:
                raise KeyNotAcquired(f"{key} not acquired by txn {getattr(self.txn, 'tid', self.txn)}")
            self.acquire(key, self._whole)
            entry = self.entries[key]
        return entry

    def _writable(self, key: Key) -> _Entry:
        entry = self._entry(key)
        if entry.mode is not RW:
            raise ReadOnlyAccess(f"{key} acquired read-only")
        return entry

    def _emit(self, op: OpKind, key: Key, before=None, after=None, dep=None) -> OperationLog:
        entry = OperationLog(len(self.log), op, key, before, after, dep)
        self.log.append(entry)
        return entry

    # -- external API ----------------------------------------------------

    def get(self, key: Key) -> Optional[Value]:
        return self._entry(key).value

    def __contains__(self, key: Key) -> bool:
        return self.get(key) is not None

    def put(self, key: Key, value: Value) -> None:
        entry = self._writable(key)
        value = normalize(value)
        self._emit(OpKind.PUT, key, before=entry.value, after=value)
        entry.value = value

    def delete(self, key: Key) -> None:
        entry = self._writable(key)
        if entry.value is None:
            raise KeyAbsent(f"{key} is not present")
        self._emit(OpKind.DELETE, key, before=entry.value)
        entry.value = None
        for record in self.dep_view.get(key, []):
            self._emit(OpKind.DEREGISTER_DEP, key, dep=record)
        self.dep_view[key] = []

    def keys(self) -> list[Key]:
        """Present keys visible to this transaction."""
        if self._whole is None:
            return [k for k, e in self.entries.items() if e.value is not None]
        out = [k for k in self._base.keys() if k not in self.entries] if self._base is not None else []
        out.extend(k for k, e in self.entries.items() if e.value is not None)
        return out

    def items(self) -> list[tuple[Key, Value]]:
        return [(k, self.get(k)) for k in self.keys()]

    # -- internal API (dependency engine) --------------------------------

    def deps_of(self, key: Key) -> list:
        self._entry(key)
        return list(self.dep_view.get(key, []))

    def register_dep(self, key: Key, record) -> bool:
        self._writable(key)
        records = self.dep_view.setdefault(key, [])
        if not _add_dep(records, record):
            return False
        self._emit(OpKind.REGISTER_DEP, key, dep=record)
        return True

    def deregister_dep(self, key: Key, record) -> bool:
        self._writable(key)
        records = self.dep_view.setdefault(key, [])
        if not _remove_dep(records, record):
            return False
        self._emit(OpKind.DEREGISTER_DEP, key, dep=record)
        return True

    def accessed_keys(self) -> list[Key]:
        return list(self.entries)

    def __repr__(self):
        return f"DictionaryState(txn={getattr(self.txn, 'tid', self.txn)}, actor={self.actor_id}, keys={len(self.entries)}, ops={len(self.log)})"


def ds_get(state: DictionaryState, key: Key) -> Optional[Value]:
    return state.get(key)


def ds_put(state: DictionaryState, key: Key, value: Value) -> None:
    state.put(key, value)


def ds_delete(state: DictionaryState, key: Key) -> None:
    state.delete(key)
