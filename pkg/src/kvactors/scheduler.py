"""Deterministic batch scheduling for transactions with declared access sets.

The coordinator hands out tids from one counter shared with lock-based
transactions, groups pending declared transactions into batches, and turns
each batch into per-actor (and per-key) execution orders. Actors chain
batches through ``prev_bid`` so every actor sees batches in the same order.
"""

from __future__ import annotations

import asyncio
import enum
import json
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional

from .errors import EmptySpec, UnknownBatch
from .state import AccessMode
from .values import ActorId, Key


class Granularity(enum.Enum):
    ACTOR = "ActorLevel"
    KEY = "KeyLevel"

    @classmethod
    def parse(cls, s) -> Granularity:
        if isinstance(s, Granularity):
            return s
        for g in cls:
            if g.value.lower() == str(s).lower() or g.name.lower() == str(s).lower():
                return g
        raise ValueError(f"unknown granularity {s!r}")


@dataclass(frozen=True, slots=True)
class TxnContext:
    tid: int
    bid: int = 0
    is_pact: bool = False
    granularity: Granularity = Granularity.ACTOR


@dataclass
class ActorAccess:
    count: int = 1
    keys: Optional[dict[Key, AccessMode]] = None


class AccessSpec:
    """Declared accesses: actor -> (times called, optional key modes)."""

    def __init__(self, entries: Mapping | None = None):
        self.entries: dict[ActorId, ActorAccess] = {}
        for actor, acc in (entries or {}).items():
            if isinstance(acc, ActorAccess):
                self.entries[actor] = ActorAccess(acc.count, dict(acc.keys) if acc.keys is not None else None)
            elif isinstance(acc, int):
                self.entries[actor] = ActorAccess(acc)
            else:
                count, keys = acc
                self.entries[actor] = ActorAccess(count, {k: AccessMode.parse(m) for k, m in keys.items()} if keys is not None else None)

    def add(self, actor: ActorId, keys: Mapping | None = None, count: int = 1) -> AccessSpec:
        """Merge ``count`` more accesses of ``actor`` touching ``keys``."""
        acc = self.entries.get(actor)
        if acc is None:
            acc = self.entries[actor] = ActorAccess(0, {} if keys is not None else None)
        acc.count += count
        if keys is not None:
            if acc.keys is None:
                acc.keys = {}
            for k, m in keys.items():
                m = AccessMode.parse(m)
                if acc.keys.get(k) is not AccessMode.READ_WRITE:
                    acc.keys[k] = m
        return self

    def actors(self) -> list[ActorId]:
        return sorted(self.entries)

    def __contains__(self, actor) -> bool:
        return actor in self.entries

    def __getitem__(self, actor) -> ActorAccess:
        return self.entries[actor]

    def __len__(self):
        return len(self.entries)

    def validate(self, granularity: Granularity) -> None:
        if not self.entries:
            raise EmptySpec("access spec declares no actors")
        for actor, acc in self.entries.items():
            if acc.count < 1:
                raise EmptySpec(f"{actor} declared with count {acc.count}")
            if granularity is Granularity.KEY and not acc.keys:
                raise EmptySpec(f"key-level transaction must declare keys for {actor}")


@dataclass
class ActorPlan:
    txn_order: list[tuple[int, int]]          # (tid, access count), ascending tid
    per_key: dict[Key, list[int]] | None      # key-level only
    prev_bid: int


@dataclass
class BatchSchedule:
    bid: int
    per_actor: dict[ActorId, ActorPlan]
    tids: list[int]

    @property
    def overlap_rate(self) -> float:
        return len(self.tids) / len(self.per_actor) if self.per_actor else 0.0

    def to_json(self) -> str:
        """Canonical serialization, used to compare schedules across runs."""
        doc = {
            "bid": self.bid,
            "tids": self.tids,
            "actors": [
                {
                    "actor": str(a),
                    "prev": p.prev_bid,
                    "order": p.txn_order,
                    "keys": None if p.per_key is None else [[str(k), v] for k, v in p.per_key.items()],
                }
                for a, p in sorted(self.per_actor.items())
            ],
        }
        return json.dumps(doc, separators=(",", ":"))


@dataclass
class BatchStatus:
    bid: int
    pending_actors: set[ActorId]
    committed: bool = False
    failed: Optional[BaseException] = None


def form_batch(bid: int, pending: list[tuple[int, AccessSpec]], last_bid: dict[ActorId, int],
               granularity: Granularity = Granularity.ACTOR) -> BatchSchedule:
    """Build the schedule for ``pending`` (pure apart from updating ``last_bid``)."""
    pending = sorted(pending, key=lambda p: p[0])
    per_actor: dict[ActorId, ActorPlan] = {}
    for tid, spec in pending:
        for actor in spec.actors():
            acc = spec[actor]
            plan = per_actor.get(actor)
            if plan is None:
                plan = per_actor[actor] = ActorPlan([], {} if granularity is Granularity.KEY else None,
                                                    last_bid.get(actor, 0))
            plan.txn_order.append((tid, acc.count))
            if plan.per_key is not None:
                for k in sorted(acc.keys or ()):
                    plan.per_key.setdefault(k, []).append(tid)
    for actor in per_actor:
        last_bid[actor] = bid
    return BatchSchedule(bid, per_actor, [t for t, _ in pending])


class TxnHandle:
    """Client-side view of a submitted transaction."""

    def __init__(self, tid: int = 0, loop=None):
        self.tid = tid
        self.future: asyncio.Future = (loop or asyncio.get_event_loop()).create_future()
        self.stamps: list[Optional[int]] = [None] * 8
        self.stamps[0] = time.perf_counter_ns()
        self.bid = 0

    def stamp(self, i: int) -> None:
        if self.stamps[i] is None:
            self.stamps[i] = time.perf_counter_ns()

    def intervals(self) -> list[int]:
        """I1..I7, forced monotone so they telescope to the end-to-end latency."""
        out, prev = [], self.stamps[0]
        for s in self.stamps[1:]:
            s = prev if s is None or s < prev else s
            out.append(s - prev)
            prev = s
        return out

    def done(self) -> bool:
        return self.future.done()

    def __await__(self):
        return self.future.__await__()


@dataclass
class CoordinatorStats:
    batches: int = 0
    pacts: int = 0
    overlap_rates: list = field(default_factory=list)

    def summary(self) -> dict:
        n = self.batches
        return {
            "batches": n,
            "mean_batch_size": self.pacts / n if n else 0.0,
            "mean_overlap_rate": sum(self.overlap_rates) / n if n else 0.0,
        }


class Coordinator:
    """Single logical coordinator.

    ``on_batch(schedule, requests)`` is called synchronously when a batch
    forms; the runtime registers the schedule with each actor from there.
    """

    def __init__(self, on_batch: Callable, granularity: Granularity = Granularity.ACTOR,
                 batch_size: int = 64, batch_timeout: float = 0.005, keep_schedules: bool = False):
        self.on_batch = on_batch
        self.granularity = granularity
        self.batch_size = batch_size
        self.batch_timeout = batch_timeout
        self.next_tid = 1
        self.next_bid = 1
        self.last_bid_formed = 0
        self.last_bid: dict[ActorId, int] = {}
        self.pending: list = []  # (tid, spec, request)
        self.status: dict[int, BatchStatus] = {}
        self.stats = CoordinatorStats()
        self.schedules: list[BatchSchedule] | None = [] if keep_schedules else None
        self._timer = None

    def assign_tid(self) -> int:
        tid = self.next_tid
        self.next_tid += 1
        return tid

    def submit_pact(self, spec: AccessSpec, request) -> int:
        spec.validate(self.granularity)
        tid = self.assign_tid()
        self.enqueue(tid, spec, request)
        return tid

    def enqueue(self, tid: int, spec: AccessSpec, request) -> None:
        """Queue an already numbered transaction; may form a batch immediately."""
        self.pending.append((tid, spec, request))
        if len(self.pending) >= self.batch_size:
            self.flush()
        elif self._timer is None:
            loop = asyncio.get_event_loop()
            if self.batch_timeout <= 0:
                self._timer = loop.call_soon(self._on_timer)
            else:
                self._timer = loop.call_later(self.batch_timeout, self._on_timer)

    def begin_act(self) -> tuple[int, int]:
        """tid for a lock-based transaction plus its batch fence."""
        self.flush()
        return self.assign_tid(), self.last_bid_formed

    def _on_timer(self):
        self._timer = None
        self.flush()

    def flush(self) -> Optional[BatchSchedule]:
        if self._timer is not None:
            self._timer.cancel()
            self._timer = None
        if not self.pending:
            return None
        pending, self.pending = self.pending, []
        bid = self.next_bid
        self.next_bid += 1
        schedule = form_batch(bid, [(t, s) for t, s, _ in pending], self.last_bid, self.granularity)
        self.last_bid_formed = bid
        self.status[bid] = BatchStatus(bid, set(schedule.per_actor))
        self.stats.batches += 1
        self.stats.pacts += len(pending)
        self.stats.overlap_rates.append(schedule.overlap_rate)
        if self.schedules is not None:
            self.schedules.append(schedule)
        self.on_batch(schedule, {t: r for t, _, r in pending})
        return schedule

    def report_actor_batch_complete(self, bid: int, actor: ActorId) -> bool:
        """Returns True when this report completes the batch."""
        st = self.status.get(bid)
        if st is None:
            raise UnknownBatch(f"batch {bid} unknown")
        if st.committed or actor not in st.pending_actors:
            return False
        st.pending_actors.discard(actor)
        return not st.pending_actors

    def mark_committed(self, bid: int) -> None:
        st = self.status[bid]
        st.committed = True

    def forget(self, bid: int) -> None:
        self.status.pop(bid, None)
