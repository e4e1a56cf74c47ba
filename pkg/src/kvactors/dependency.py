"""Cross-actor dependency records and their enforcement.

A dependency ties a leader key on one actor to a follower key on another
(or the same) actor. Delete dependencies cascade deletions; update
dependencies run a registered pure function on the follower whenever the
leader is written. Records live on the leader actor, with a backward copy on
the follower so that deleting either side can find the other.
"""

from __future__ import annotations

import enum
from decimal import Decimal
from dataclasses import dataclass
from typing import Callable, Iterable, Optional

from .errors import (
    DuplicateDependency,
    DuplicateFunctionId,
    FollowerIneligible,
    HopLimitExceeded,
    LeaderIneligible,
    LeaderKeyMissing,
    UnknownFunction,
)
from .state import DictionaryState, OperationLog, OpKind, RW
from .values import ActorId, Key, Value, normalize


class DepType(enum.IntEnum):
    DELETE = 1
    UPDATE = 2


class CyclePolicy(enum.Enum):
    # registration-time cycle search over update edges
    S1 = "S1"
    # a key may be a leader or a follower, never both
    S3 = "S3"


@dataclass(frozen=True, slots=True)
class DependencyRecord:
    dep_type: DepType
    leader_actor: ActorId
    leader_key: Key
    follower_actor: ActorId
    follower_key: Key
    function_id: Optional[str] = None

    def __post_init__(self):
        if self.dep_type is DepType.UPDATE and not self.function_id:
            raise ValueError("update dependency needs a function id")
        if self.dep_type is DepType.DELETE and self.function_id is not None:
            raise ValueError("delete dependency takes no function")
        if (self.leader_actor, self.leader_key) == (self.follower_actor, self.follower_key):
            raise ValueError("a key cannot depend on itself")

    @property
    def identity(self) -> tuple:
        return (self.leader_actor, self.leader_key, self.follower_actor, self.follower_key, self.dep_type)

    def is_leader_side(self, actor: ActorId, key: Key) -> bool:
        return self.leader_actor == actor and self.leader_key == key

    def is_follower_side(self, actor: ActorId, key: Key) -> bool:
        return self.follower_actor == actor and self.follower_key == key


def update_dep(leader_actor, leader_key, follower_actor, follower_key, function_id="replicate") -> DependencyRecord:
    return DependencyRecord(DepType.UPDATE, leader_actor, leader_key, follower_actor, follower_key, function_id)


def delete_dep(leader_actor, leader_key, follower_actor, follower_key) -> DependencyRecord:
    return DependencyRecord(DepType.DELETE, leader_actor, leader_key, follower_actor, follower_key)


# -- update functions -----------------------------------------------------

ApplyFn = Callable[[Key, Optional[Value], Optional[Value], Key, Optional[Value]], Value]


@dataclass(frozen=True)
class UpdateFunction:
    function_id: str
    apply: ApplyFn


def _replicate(leader_key, old_v, new_v, follower_key, v_f):
    return new_v


def _sum_delta(leader_key, old_v, new_v, follower_key, v_f):
    for v in (old_v, new_v, v_f):
        if isinstance(v, bool) or not isinstance(v, (int, Decimal)):
            raise TypeError("sum_delta works on integer or decimal values only")
    return v_f + (new_v - old_v)


BUILTIN_FUNCTIONS = (
    UpdateFunction("replicate", _replicate),
    UpdateFunction("sum_delta", _sum_delta),
)


class FunctionRegistry:
    def __init__(self, builtins: bool = True):
        self._fns: dict[str, UpdateFunction] = {}
        if builtins:
            for fn in BUILTIN_FUNCTIONS:
                self.register(fn)

    def register(self, fn: UpdateFunction) -> None:
        if fn.function_id in self._fns:
            raise DuplicateFunctionId(fn.function_id)
        self._fns[fn.function_id] = fn

    def __getitem__(self, function_id: str) -> UpdateFunction:
        try:
            return self._fns[function_id]
        except KeyError:
            raise UnknownFunction(function_id) from None

    def __contains__(self, function_id: str) -> bool:
        return function_id in self._fns

    def apply(self, record: DependencyRecord, old_v, new_v, v_f) -> Value:
        fn = self[record.function_id]
        return normalize(fn.apply(record.leader_key, old_v, new_v, record.follower_key, v_f))


def register_function(registry: FunctionRegistry, fn: UpdateFunction) -> None:
    registry.register(fn)


# -- eligibility ----------------------------------------------------------

# (actor, key) -> records attached to that key on that actor
DepGraph = Callable[[ActorId, Key], Iterable[DependencyRecord]]


def _is_leader(records: Iterable[DependencyRecord], actor: ActorId, key: Key) -> bool:
    return any(r.is_leader_side(actor, key) for r in records)


def _is_follower(records: Iterable[DependencyRecord], actor: ActorId, key: Key) -> bool:
    return any(r.is_follower_side(actor, key) for r in records)


def creates_update_cycle(record: DependencyRecord, graph: DepGraph, hop_limit: int = 64) -> bool:
    """DFS along update edges from the new follower, looking for the new leader."""
    if record.dep_type is not DepType.UPDATE:
        return False
    target = (record.leader_actor, record.leader_key)
    stack = [(record.follower_actor, record.follower_key, 0)]
    seen = set()
    while stack:
        actor, key, hops = stack.pop()
        if (actor, key) == target:
            return True
        if (actor, key) in seen:
            continue
        seen.add((actor, key))
        if hops >= hop_limit:
            raise HopLimitExceeded(f"cycle search exceeded {hop_limit} hops")
        for r in graph(actor, key):
            if r.dep_type is DepType.UPDATE and r.is_leader_side(actor, key):
                stack.append((r.follower_actor, r.follower_key, hops + 1))
    return False


def check_follower_eligibility(state, k_f: Key, policy: CyclePolicy = CyclePolicy.S3, *,
                               record: DependencyRecord | None = None,
                               graph: DepGraph | None = None, hop_limit: int = 64) -> bool:
    """Can ``k_f`` on this actor take on a new follower role?

    ``state`` is anything exposing ``actor_id`` and ``deps_of(key)``.
    """
    if policy is CyclePolicy.S3:
        return not _is_leader(state.deps_of(k_f), state.actor_id, k_f)
    if record is None or graph is None:
        return True
    try:
        return not creates_update_cycle(record, graph, hop_limit)
    except HopLimitExceeded:
        return False


@dataclass(frozen=True)
class RegistrationResult:
    seeded: bool
    initial_value: Value


def follower_precheck(ds: DictionaryState, record: DependencyRecord, policy: CyclePolicy,
                      graph: DepGraph | None = None, hop_limit: int = 64) -> None:
    k_f = record.follower_key
    if any(r.identity == record.identity for r in ds.deps_of(k_f)):
        raise DuplicateDependency(f"{record} already registered on follower")
    if not check_follower_eligibility(ds, k_f, policy, record=record, graph=graph, hop_limit=hop_limit):
        raise FollowerIneligible(f"{k_f} on {record.follower_actor} cannot become a follower")


def leader_accept(ds: DictionaryState, record: DependencyRecord, policy: CyclePolicy) -> Value:
    """Leader half of registration: validate, attach, return the leader value."""
    k_l = record.leader_key
    v_l = ds.get(k_l)
    if v_l is None:
        raise LeaderKeyMissing(f"{k_l} does not exist on {record.leader_actor}")
    records = ds.deps_of(k_l)
    if policy is CyclePolicy.S3 and _is_follower(records, record.leader_actor, k_l):
        raise LeaderIneligible(f"{k_l} on {record.leader_actor} is already a follower")
    if any(r.identity == record.identity for r in records):
        raise DuplicateDependency(f"{record} already registered on leader")
    ds.register_dep(k_l, record)
    return v_l


def follower_complete(ds: DictionaryState, record: DependencyRecord, v_l: Value,
                      registry: FunctionRegistry) -> RegistrationResult:
    """Follower half: seed or refresh the follower value, attach the backward copy."""
    k_f = record.follower_key
    v_f = ds.get(k_f)
    if v_f is None:
        ds.put(k_f, v_l)
        seeded = True
    else:
        if record.dep_type is DepType.UPDATE:
            ds.put(k_f, registry.apply(record, v_l, v_l, v_f))
        seeded = False
    ds.register_dep(k_f, record)
    return RegistrationResult(seeded, ds.get(k_f))


# -- forwarding -----------------------------------------------------------

class ForwardKind(enum.IntEnum):
    APPLY_UPDATE = 1
    CASCADE_DELETE = 2
    DEREGISTER_AT_LEADER = 3
    DEREGISTER_AT_FOLLOWER = 4


@dataclass(frozen=True, slots=True)
class ForwardedOp:
    kind: ForwardKind
    record: DependencyRecord
    old_v_l: Optional[Value] = None
    new_v_l: Optional[Value] = None

    @property
    def target(self) -> ActorId:
        if self.kind is ForwardKind.DEREGISTER_AT_LEADER:
            return self.record.leader_actor
        return self.record.follower_actor

    @property
    def target_key(self) -> Key:
        if self.kind is ForwardKind.DEREGISTER_AT_LEADER:
            return self.record.leader_key
        return self.record.follower_key


ForwardSet = dict  # ActorId -> list[ForwardedOp]


def resolve_forwards(actor: ActorId, deps, log: Iterable[OperationLog]) -> ForwardSet:
    """Work out which operations must be sent to which actors.

    ``deps`` is a mapping or an object with ``deps_of``. For deletes, the
    records come from the DeregisterDep entries the delete emitted, since the
    local view no longer holds them.
    """
    deps_of = deps.deps_of if hasattr(deps, "deps_of") else (lambda k, _d=deps: _d.get(k, ()))
    out: ForwardSet = {}
    entries = list(log)
    i, n = 0, len(entries)
    while i < n:
        entry = entries[i]
        i += 1
        if entry.op is OpKind.PUT:
            for r in deps_of(entry.key):
                if r.dep_type is DepType.UPDATE and r.is_leader_side(actor, entry.key):
                    out.setdefault(r.follower_actor, []).append(
                        ForwardedOp(ForwardKind.APPLY_UPDATE, r, entry.before, entry.after))
        elif entry.op is OpKind.DELETE:
            while i < n and entries[i].op is OpKind.DEREGISTER_DEP and entries[i].key == entry.key:
                r = entries[i].dep
                i += 1
                if r.is_leader_side(actor, entry.key):
                    ops = out.setdefault(r.follower_actor, [])
                    if r.dep_type is DepType.DELETE:
                        ops.append(ForwardedOp(ForwardKind.CASCADE_DELETE, r))
                    ops.append(ForwardedOp(ForwardKind.DEREGISTER_AT_FOLLOWER, r))
                else:
                    out.setdefault(r.leader_actor, []).append(ForwardedOp(ForwardKind.DEREGISTER_AT_LEADER, r))
    return out


def keys_for(ops: Iterable[ForwardedOp]) -> dict[Key, object]:
    """Keys (all read-write) an ApplyLogs invocation needs on its actor."""
    return {op.target_key: RW for op in ops}


def _registered(ds: DictionaryState, key: Key, record: DependencyRecord) -> bool:
    ident = record.identity
    return any(r.identity == ident for r in ds.deps_of(key))


def apply_logs(ds: DictionaryState, forwarded: Iterable[ForwardedOp], registry: FunctionRegistry) -> list[OperationLog]:
    """Apply forwarded operations on the follower side; returns the new log segment."""
    start = len(ds.log)
    for f in forwarded:
        r = f.record
        if f.kind is ForwardKind.APPLY_UPDATE:
            k = r.follower_key
            v_f = ds.get(k)
            if v_f is None or not _registered(ds, k, r):
                continue
            ds.put(k, registry.apply(r, f.old_v_l, f.new_v_l, v_f))
        elif f.kind is ForwardKind.CASCADE_DELETE:
            k = r.follower_key
            # drop the incoming record first so the delete doesn't bounce it back
            ds.deregister_dep(k, r)
            if ds.get(k) is not None:
                ds.delete(k)
        elif f.kind is ForwardKind.DEREGISTER_AT_FOLLOWER:
            ds.deregister_dep(r.follower_key, r)
        else:
            ds.deregister_dep(r.leader_key, r)
    return ds.log[start:]
