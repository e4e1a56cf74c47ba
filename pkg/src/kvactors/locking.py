"""Strict two-phase locking with wait-die, plus an in-process two-phase commit.

The lock table is a plain data structure: it answers Granted / MustWait / Die
and reports which waiters became runnable (or must die) after a release. The
runtime owns the suspended continuations that those answers refer to.
"""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Hashable, Iterable, Optional

from .state import AccessMode, R, RW
from .values import ActorId, Key


class Outcome(enum.Enum):
    GRANTED = "Granted"
    MUST_WAIT = "MustWait"
    DIE = "Die"


class _ActorTarget:
    __slots__ = ()

    def __repr__(self):
        return "ACTOR"


# lock target meaning "the whole actor state"
ACTOR = _ActorTarget()

LockTarget = Hashable  # ACTOR or a Key


def compatible(a: AccessMode, b: AccessMode) -> bool:
    return a is R and b is R


class LockEntry:
    __slots__ = ("holders", "waiters", "doomed")

    def __init__(self):
        self.holders: dict[int, AccessMode] = {}
        self.waiters: deque[tuple[int, AccessMode]] = deque()
        # set once a Delete of the key has been requested under a write lock
        self.doomed = False

    def conflicting(self, tid: int, mode: AccessMode) -> list[int]:
        return [h for h, m in self.holders.items() if h != tid and not compatible(m, mode)]

    def __bool__(self):
        return bool(self.holders or self.waiters)


@dataclass
class Wakeups:
    granted: list = field(default_factory=list)  # (tid, target)
    died: list = field(default_factory=list)     # (tid, target)

    def extend(self, other: Wakeups) -> None:
        self.granted.extend(other.granted)
        self.died.extend(other.died)


class LockTable:
    def __init__(self, fenced: set | None = None, age: Callable[[int], int] | None = None):
        self.locks: dict[LockTarget, LockEntry] = {}
        self.held: dict[int, set] = {}
        self.waiting: dict[int, set] = {}
        # holders currently suspended on a batch fence; a conflict with them is
        # fatal. May be shared by every table in a runtime.
        self.fenced: set[int] = fenced if fenced is not None else set()
        # wait-die compares ages; a restarted transaction keeps its first tid as
        # its age so it cannot starve. Defaults to the tid itself.
        self.age: Callable[[int], int] = age or (lambda tid: tid)
        # waiters killed by a grant that jumped them; drained by the caller
        self.evicted: list = []

    def _older_than_all(self, tid: int, blockers: list[int]) -> bool:
        mine = self.age(tid)
        return all(mine < self.age(b) for b in blockers)

    # -- queries -----------------------------------------------------------

    def entry(self, target) -> Optional[LockEntry]:
        return self.locks.get(target)

    def holds(self, tid: int, target, mode: AccessMode = R) -> bool:
        e = self.locks.get(target)
        if e is None or tid not in e.holders:
            return False
        return mode is R or e.holders[tid] is RW

    def has_holders(self) -> bool:
        return any(self.held.values())

    def has_waiters_on(self, tid: int) -> bool:
        """Is anybody queued behind a lock that ``tid`` holds?"""
        for target in self.held.get(tid, ()):
            if self.locks[target].waiters:
                return True
        return False

    # -- acquisition ------------------------------------------------------

    def acquire(self, tid: int, target, mode: AccessMode) -> Outcome:
        e = self.locks.get(target)
        if e is None:
            e = self.locks[target] = LockEntry()
        current = e.holders.get(tid)
        if current is RW or current is mode:
            return Outcome.GRANTED
        blockers = e.conflicting(tid, mode)
        if not blockers:
            e.holders[tid] = mode
            self.held.setdefault(tid, set()).add(target)
            if e.waiters:
                # a reader sharing with current holders can jump a queued writer
                wake = Wakeups()
                self._cull(target, e, e.waiters, wake)
                self.evicted.extend(wake.died)
            return Outcome.GRANTED
        # wait-die: only an older requester may wait, never behind a fenced holder
        if self._older_than_all(tid, blockers) and not self.fenced.intersection(blockers):
            e.waiters.append((tid, mode))
            self.waiting.setdefault(tid, set()).add(target)
            return Outcome.MUST_WAIT
        return Outcome.DIE

    def add_or_delete_key(self, tid: int, key: Key, op: str) -> Outcome:
        """Add creates the lock on demand; Delete additionally dooms the entry
        so it is dropped once nobody holds or waits for it."""
        outcome = self.acquire(tid, key, RW)
        if op == "Delete" and outcome is Outcome.GRANTED:
            self.locks[key].doomed = True
        elif op not in ("Add", "Delete"):
            raise ValueError(f"unknown key operation {op!r}")
        return outcome

    # -- release ----------------------------------------------------------

    def release_all(self, tid: int, is_absent: Callable[[Key], bool] | None = None) -> Wakeups:
        """Drop every hold and wait of ``tid``; return who runs or dies next."""
        self.fenced.discard(tid)
        touched = set(self.held.pop(tid, ())) | set(self.waiting.pop(tid, ()))
        for target in touched:
            e = self.locks[target]
            e.holders.pop(tid, None)
            if e.waiters:
                e.waiters = deque(w for w in e.waiters if w[0] != tid)
        wake = Wakeups()
        for target in touched:
            wake.extend(self._regrant(target))
        for target in touched:
            self._maybe_gc(target, is_absent)
        return wake

    def discard_waiter(self, tid: int, target) -> None:
        e = self.locks.get(target)
        if e is None:
            return
        e.waiters = deque(w for w in e.waiters if w[0] != tid)
        waits = self.waiting.get(tid)
        if waits:
            waits.discard(target)

    def _regrant(self, target) -> Wakeups:
        e = self.locks[target]
        wake = Wakeups()
        remaining = deque()
        for tid, mode in e.waiters:
            if not e.conflicting(tid, mode):
                e.holders[tid] = mode if e.holders.get(tid) is not RW else RW
                self.held.setdefault(tid, set()).add(target)
                self.waiting[tid].discard(target)
                wake.granted.append((tid, target))
            else:
                remaining.append((tid, mode))
        self._cull(target, e, remaining, wake)
        return wake

    def _cull(self, target, e: LockEntry, waiters, wake: Wakeups) -> None:
        # a waiter now blocked by an older holder would break the wait-die order
        survivors = deque()
        for tid, mode in waiters:
            blockers = e.conflicting(tid, mode)
            if not self._older_than_all(tid, blockers) or self.fenced.intersection(blockers):
                self.waiting[tid].discard(target)
                wake.died.append((tid, target))
            else:
                survivors.append((tid, mode))
        e.waiters = survivors

    def take_evicted(self) -> list:
        out, self.evicted = self.evicted, []
        return out

    def _maybe_gc(self, target, is_absent) -> None:
        e = self.locks.get(target)
        if e is None or e:
            return
        if target is ACTOR:
            return
        if e.doomed or (is_absent is not None and is_absent(target)):
            del self.locks[target]


def acquire(table: LockTable, tid: int, target, mode) -> Outcome:
    return table.acquire(tid, target, AccessMode.parse(mode))


def release_all(table: LockTable, tid: int, is_absent=None) -> Wakeups:
    return table.release_all(tid, is_absent)


def add_or_delete_key(table: LockTable, tid: int, key: Key, op: str) -> Outcome:
    return table.add_or_delete_key(tid, key, op)


# -- two-phase commit -----------------------------------------------------

class Phase(enum.Enum):
    EXECUTING = "Executing"
    PREPARED = "Prepared"
    COMMITTED = "Committed"
    ABORTED = "Aborted"


@dataclass
class TwoPhaseState:
    tid: int
    participants: list[ActorId]
    phase: Phase = Phase.EXECUTING
    votes: dict = field(default_factory=dict)
    # set when the transaction already failed before prepare
    doomed: bool = False


def run_2pc(state: TwoPhaseState,
            prepare: Callable[[ActorId], bool],
            commit: Callable[[ActorId], None],
            abort: Callable[[ActorId], None],
            on_prepare_failure: Callable[[Iterable[ActorId]], None] | None = None) -> Phase:
    """Drive prepare/commit across participants (root actor coordinates).

    ``prepare`` persists the participant's log segment and votes; an exception
    counts as a no vote. Participants that voted yes before a no vote arrived
    are handed to ``on_prepare_failure`` so their log writes can be undone.
    """
    if not state.doomed:
        for actor in state.participants:
            try:
                vote = bool(prepare(actor))
            except Exception:
                vote = False
            state.votes[actor] = vote
            if not vote:
                break
    if not state.doomed and len(state.votes) == len(state.participants) and all(state.votes.values()):
        state.phase = Phase.PREPARED
        for actor in state.participants:
            commit(actor)
        state.phase = Phase.COMMITTED
        return state.phase
    if on_prepare_failure is not None:
        on_prepare_failure([a for a, v in state.votes.items() if v])
    for actor in state.participants:
        abort(actor)
    state.phase = Phase.ABORTED
    return state.phase
