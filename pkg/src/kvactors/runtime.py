"""In-process virtual-actor runtime with transactional state access.

Everything runs on one asyncio event loop. Each actor has a mailbox; every
delivered message becomes its own activation (a task), so an activation
parked on a schedule turn or a lock never blocks the actor from serving
other messages. ``hop_latency`` adds a sleep to every cross-actor hop in
each direction to stand in for the network.

Transactions come in three kinds:

* PACT: declared access sets, executed in coordinator batches in tid order
  per actor (actor level) or per key (key level); committed and logged per
  batch.
* ACT: strict 2PL with wait-die at actor or key granularity, committed by
  2PC from the root actor.
* NonTxn: no scheduling, locking or logging; effects applied at the end.
"""

from __future__ import annotations

import asyncio
import hashlib
import itertools
import time
import zlib
from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Any, Optional

from . import codec
from .dependency import (
    CyclePolicy,
    DependencyRecord,
    FunctionRegistry,
    RegistrationResult,
    apply_logs,
    follower_complete,
    follower_precheck,
    keys_for,
    leader_accept,
    resolve_forwards,
)
from .errors import (
    ForwardingDepthExceeded,
    KVActorError,
    LogWriteFailure,
    ModeConflict,
    TxnAborted,
    UndeclaredAccess,
)
from .locking import ACTOR, LockTable, Outcome, Phase, TwoPhaseState, run_2pc
from .logstore import LogMode, LogRecord, LogStore
from .scheduler import AccessSpec, BatchSchedule, Coordinator, Granularity, TxnContext, TxnHandle
from .state import ActorState, DictionaryState, Overlay, R, RW, AccessMode, apply_committed, apply_ops
from .values import ActorId, Key, normalize

APPLY_LOGS = "_apply_logs"
REGISTER_AT_LEADER = "_register_at_leader"
DEREGISTER_AT_LEADER = "_deregister_at_leader"
INTERNAL_METHODS = frozenset({APPLY_LOGS, REGISTER_AT_LEADER, DEREGISTER_AT_LEADER})


@dataclass
class RuntimeConfig:
    granularity: Granularity = Granularity.ACTOR
    nontxn: bool = False
    cycle_policy: CyclePolicy = CyclePolicy.S3
    hop_limit: int = 64
    hop_latency: float = 0.0
    batch_size: int = 64
    batch_timeout: float = 0.005
    log_mode: LogMode = LogMode.INCREMENTAL
    log_enabled: bool = True
    log_dir: Optional[str] = None
    flush: str = "batched"
    workers: int = 4
    keep_schedules: bool = False
    max_forward_depth: int = 16

    def __post_init__(self):
        self.granularity = Granularity.parse(self.granularity)
        self.log_mode = LogMode.parse(self.log_mode)
        if isinstance(self.cycle_policy, str):
            self.cycle_policy = CyclePolicy(self.cycle_policy)


@dataclass
class Metrics:
    committed: Counter = field(default_factory=Counter)   # by kind
    aborts: Counter = field(default_factory=Counter)      # by cause
    activations_per_shard: Counter = field(default_factory=Counter)
    forwards: int = 0
    batches_committed: int = 0
    batches_aborted: int = 0


class Participant:
    """One transaction's footprint on one actor."""

    __slots__ = ("ds", "remaining", "active", "turn_done", "held", "admitted", "stash", "mark")

    def __init__(self, remaining: int = 0):
        self.ds: Optional[DictionaryState] = None
        self.remaining = remaining
        self.active = 0
        self.turn_done = False
        self.held: set = set()
        self.admitted = False
        self.stash = None
        self.mark = None


class Txn:
    def __init__(self, ctx: TxnContext, root: ActorId, method: str, args, spec: AccessSpec | None = None,
                 handle: TxnHandle | None = None, nontxn: bool = False):
        self.ctx = ctx
        self.root = root
        self.method = method
        self.args = args
        self.spec = spec
        self.handle = handle
        self.nontxn = nontxn
        self.parts: dict[ActorId, Participant] = {}
        self.fence_bid = 0
        # wait-die age; differs from the tid only for restarted ACTs
        self.age = ctx.tid
        self.aborted: Optional[BaseException] = None
        # batch-fatal error (PACT): aborts the whole batch
        self.fatal: Optional[BaseException] = None
        self.error: Optional[BaseException] = None
        self.result = None
        self.finished = False
        # future of the root call; a batch may commit before the client task resumes
        self.root_future: Optional[asyncio.Future] = None

    @property
    def tid(self) -> int:
        return self.ctx.tid


class ActorBatch:
    """An actor's share of one batch schedule."""

    def __init__(self, schedule: BatchSchedule, actor: ActorId):
        plan = schedule.per_actor[actor]
        self.bid = schedule.bid
        self.prev_bid = plan.prev_bid
        self.order = [t for t, _ in plan.txn_order]
        self.counts = dict(plan.txn_order)
        self.per_key = None if plan.per_key is None else {k: deque(v) for k, v in plan.per_key.items()}
        self.pos = 0
        self.finished: set[int] = set()
        self.reported = False

    def head(self) -> Optional[int]:
        return self.order[self.pos] if self.pos < len(self.order) else None

    @property
    def complete(self) -> bool:
        return len(self.finished) == len(self.order)


class Mailbox:
    """FIFO message queue; each message is dispatched as its own activation."""

    def __init__(self, actor: TransactionalActor):
        self.actor = actor
        self.queue: deque = deque()
        self._scheduled = False
        self.delivered = 0

    def post(self, msg) -> None:
        self.queue.append(msg)
        if not self._scheduled:
            self._scheduled = True
            asyncio.get_event_loop().call_soon(self._drain)

    def _drain(self) -> None:
        self._scheduled = False
        while self.queue:
            ctx, method, args, fut, depth = self.queue.popleft()
            self.delivered += 1
            asyncio.ensure_future(self.actor._activation(ctx, method, args, fut, depth))


class TransactionalActor:
    """Base class for actors; subclasses add ``async def method(self, ctx, args)``."""

    def __init__(self, runtime: Runtime, actor_id: ActorId):
        self.runtime = runtime
        self.id = actor_id
        self.state = ActorState(actor_id)
        self.overlay = Overlay(self.state)
        self.locks = LockTable(fenced=runtime._fenced, age=runtime._age)
        self.mailbox = Mailbox(self)
        self.granularity = runtime.config.granularity
        self.shard = zlib.crc32(str(actor_id).encode()) % max(1, runtime.config.workers)
        self.parts: dict[int, Participant] = {}
        self.batches: dict[int, ActorBatch] = {}
        self.batch_queue: deque[int] = deque()
        self.current: Optional[ActorBatch] = None
        self.watermark = 0
        self._waiters: list = []
        self._lock_waits: dict = {}

    # -- seeding (outside transactions) ----------------------------------

    def seed(self, items) -> None:
        """Load values outside any transaction. They are kept as the actor's
        base image, which log replay starts from."""
        base = self.runtime.base_states.setdefault(self.id, ActorState(self.id))
        for k, v in dict(items).items():
            v = normalize(v)
            self.state.kv[k] = v
            base.kv[k] = v

    # -- public transactional API ----------------------------------------

    async def get_state(self, ctx: TxnContext, keys=None) -> DictionaryState:
        """The transaction's DictionaryState on this actor, after acquiring ``keys``."""
        txn = self.runtime.txn(ctx)
        part = self._participant(txn)
        keys = {k: AccessMode.parse(m) for k, m in (keys or {}).items()}
        if txn.nontxn:
            if part.ds is None:
                part.ds = DictionaryState(ctx, self.id, base=self.state, whole=RW)
            return part.ds
        if ctx.is_pact:
            await self._pact_acquire(txn, part, keys)
        else:
            await self._act_acquire(txn, part, keys)
        return part.ds

    async def call_actor(self, ctx: TxnContext, target: ActorId, method: str, args=None):
        if target == self.id:
            return await self._invoke(ctx, method, args, count=False)
        return await self.runtime._send(ctx, target, method, args)

    async def call_many(self, ctx: TxnContext, calls) -> list:
        """Issue several calls concurrently; waits for all before raising."""
        results = await asyncio.gather(*(self.call_actor(ctx, t, m, a) for t, m, a in calls),
                                       return_exceptions=True)
        for r in results:
            if isinstance(r, BaseException):
                raise r
        return results

    async def register_dependency(self, ctx: TxnContext, record: DependencyRecord) -> RegistrationResult:
        """Run on the follower actor: check eligibility, attach at the leader, seed k_f."""
        if record.follower_actor != self.id:
            raise ValueError("register_dependency must be invoked on the follower actor")
        rt = self.runtime
        ds = await self.get_state(ctx, {record.follower_key: RW})
        follower_precheck(ds, record, rt.config.cycle_policy, rt.dep_graph, rt.config.hop_limit)
        v_l = await self.call_actor(ctx, record.leader_actor, REGISTER_AT_LEADER, record)
        return follower_complete(ds, record, v_l, rt.registry)

    async def deregister_dependency(self, ctx: TxnContext, record: DependencyRecord) -> bool:
        if record.follower_actor != self.id:
            raise ValueError("deregister_dependency must be invoked on the follower actor")
        ds = await self.get_state(ctx, {record.follower_key: RW})
        removed = ds.deregister_dep(record.follower_key, record)
        await self.call_actor(ctx, record.leader_actor, DEREGISTER_AT_LEADER, record)
        return removed

    # -- internal methods -------------------------------------------------

    async def _apply_logs(self, ctx, ops):
        ds = await self.get_state(ctx, keys_for(ops))
        return len(apply_logs(ds, ops, self.runtime.registry))

    async def _register_at_leader(self, ctx, record):
        ds = await self.get_state(ctx, {record.leader_key: RW})
        return leader_accept(ds, record, self.runtime.config.cycle_policy)

    async def _deregister_at_leader(self, ctx, record):
        ds = await self.get_state(ctx, {record.leader_key: RW})
        return ds.deregister_dep(record.leader_key, record)

    # -- dispatch ---------------------------------------------------------

    def _resolve(self, method: str):
        if method.startswith("_") and method not in INTERNAL_METHODS:
            raise AttributeError(f"{method} is not a transactional method")
        fn = getattr(self, method, None)
        if fn is None or not asyncio.iscoroutinefunction(fn):
            raise AttributeError(f"{type(self).__name__} has no method {method!r}")
        return fn

    async def _activation(self, ctx, method, args, fut, depth):
        try:
            result = await self._invoke(ctx, method, args, count=True, depth=depth)
        except BaseException as exc:  # delivered to the caller
            if not fut.done():
                fut.set_exception(exc)
        else:
            if not fut.done():
                fut.set_result(result)

    async def _invoke(self, ctx: TxnContext, method: str, args, count: bool, depth: int = 0):
        rt = self.runtime
        txn = rt.txn(ctx)
        rt.metrics.activations_per_shard[self.shard] += 1
        if ctx.is_pact and count:
            acc = txn.spec.entries.get(self.id)
            part = self.parts.get(ctx.tid)
            if acc is None or (part is not None and part.remaining <= 0):
                raise rt._fatal(txn, UndeclaredAccess(
                    f"txn {ctx.tid} called {self.id} more often than its access spec allows"))
            part = self._participant(txn)
            part.remaining -= 1
        else:
            part = self._participant(txn)
        part.active += 1
        try:
            fn = self._resolve(method)
            result = await fn(ctx, args)
            await self._forward(ctx, txn, part, depth)
            return result
        finally:
            part.active -= 1
            if ctx.is_pact and part.remaining <= 0 and part.active == 0 and not part.turn_done:
                self._end_turn(txn, part)

    async def _forward(self, ctx, txn, part, depth: int) -> None:
        """Forward this actor's new log entries until nothing is left to send."""
        ds = part.ds
        if ds is None:
            return
        rt = self.runtime
        rounds = depth
        while ds.forward_cursor < len(ds.log):
            rounds += 1
            if rounds > rt.config.max_forward_depth:
                raise ForwardingDepthExceeded(f"forwarding for txn {ctx.tid} exceeded {rt.config.max_forward_depth} rounds")
            segment = ds.log[ds.forward_cursor:]
            ds.forward_cursor = len(ds.log)
            fs = resolve_forwards(self.id, ds, segment)
            if not fs:
                continue
            local = fs.pop(self.id, None)
            if local:
                await self.get_state(ctx, keys_for(local))
                apply_logs(ds, local, rt.registry)
            if fs:
                rt.metrics.forwards += sum(map(len, fs.values()))
                results = await asyncio.gather(
                    *(rt._send(ctx, target, APPLY_LOGS, fs[target], rounds) for target in sorted(fs)),
                    return_exceptions=True)
                for r in results:
                    if isinstance(r, BaseException):
                        raise r

    def _participant(self, txn: Txn) -> Participant:
        part = self.parts.get(txn.tid)
        if part is None:
            remaining = 0
            if txn.ctx.is_pact:
                acc = txn.spec.entries.get(self.id)
                remaining = acc.count if acc is not None else 0
            part = self.parts[txn.tid] = Participant(remaining)
            txn.parts[self.id] = part
        return part

    def _new_ds(self, txn: Txn, whole=None) -> DictionaryState:
        base = self.overlay if txn.ctx.is_pact else self.state
        return DictionaryState(txn.ctx, self.id, base=base, whole=whole)

    # -- waiting ----------------------------------------------------------

    async def _wait_until(self, pred) -> None:
        if pred():
            return
        fut = asyncio.get_event_loop().create_future()
        self._waiters.append((pred, fut))
        await fut

    def _notify(self) -> None:
        if not self._waiters:
            return
        keep = []
        for pred, fut in self._waiters:
            if fut.done():
                continue
            if pred():
                fut.set_result(None)
            else:
                keep.append((pred, fut))
        self._waiters = keep

    # -- PACT execution ---------------------------------------------------

    def register_batch(self, schedule: BatchSchedule) -> None:
        ab = ActorBatch(schedule, self.id)
        self.batches[ab.bid] = ab
        self.batch_queue.append(ab.bid)
        self._try_start_batch()

    def _try_start_batch(self) -> None:
        if self.current is not None or not self.batch_queue:
            return
        if self.locks.has_holders():
            return
        if self.runtime._gated(self.batch_queue[0]):
            return
        ab = self.batches[self.batch_queue.popleft()]
        self.current = ab
        self.watermark = max(self.watermark, max(ab.order))
        self._advance(ab)
        self._notify()

    async def _pact_acquire(self, txn: Txn, part: Participant, keys: dict) -> None:
        tid, bid = txn.tid, txn.ctx.bid
        acc = txn.spec.entries[self.id]
        if self.granularity is Granularity.KEY:
            declared = acc.keys or {}
            for k, m in keys.items():
                d = declared.get(k)
                if d is None or (m is RW and d is R):
                    raise self.runtime._fatal(txn, UndeclaredAccess(
                        f"txn {tid} accessed undeclared {k} ({m.value}) on {self.id}"))
        await self._wait_until(lambda: self.current is not None and self.current.bid == bid)
        ab = self.current
        first = part.ds is None
        if self.granularity is Granularity.ACTOR:
            if not part.held:
                await self._wait_until(lambda: ab.head() == tid)
                part.held.add(ACTOR)
                self.runtime._stamp_root(txn, self.id, 3)
            if part.ds is None:
                part.ds = self._new_ds(txn, whole=RW)
        else:
            if part.ds is None:
                part.ds = self._new_ds(txn)
            want = [k for k in sorted(keys) if k not in part.held]
            if want:
                pk = ab.per_key
                await self._wait_until(lambda: all(pk[k][0] == tid for k in want))
                part.held.update(want)
            self.runtime._stamp_root(txn, self.id, 3)
            for k, m in keys.items():
                part.ds.acquire(k, m)
        if first:
            self.runtime._stamp_root(txn, self.id, 4)

    def _end_turn(self, txn: Txn, part: Participant) -> None:
        part.turn_done = True
        ab = self.batches.get(txn.ctx.bid)
        if ab is None:
            return
        if part.ds is not None and part.ds.log:
            self.overlay.apply(part.ds.log)
        ab.finished.add(txn.tid)
        if ab.per_key is not None:
            for q in ab.per_key.values():
                try:
                    q.remove(txn.tid)
                except ValueError:
                    pass
        self._advance(ab)
        self._notify()

    def _advance(self, ab: ActorBatch) -> None:
        while ab.pos < len(ab.order) and ab.order[ab.pos] in ab.finished:
            ab.pos += 1
        if ab is self.current and ab.complete and not ab.reported:
            ab.reported = True
            self.runtime._actor_batch_complete(ab.bid, self.id)

    def _on_txn_finished(self, txn: Txn) -> None:
        part = self._participant(txn)
        if not part.turn_done:
            self._end_turn(txn, part)

    def _batch_record(self, bid: int, mode: LogMode) -> LogRecord:
        ab = self.batches[bid]
        logs = []
        for tid in ab.order:
            part = self.parts.get(tid)
            logs.append(part.ds.log if part is not None and part.ds is not None else [])
        rec = LogRecord(self.id, bid, list(ab.order), mode)
        if mode is LogMode.SNAPSHOT:
            st = self.state.copy()
            for tid, log in zip(ab.order, logs):
                apply_committed(st, log, tid)
            rec.state = st
        else:
            rec.ops = logs
        return rec

    def _commit_batch(self, bid: int, rec: LogRecord | None) -> None:
        ab = self.batches.pop(bid)
        if rec is not None and rec.state is not None:
            self.state = rec.state
            self.overlay = Overlay(self.state)
        else:
            for tid in ab.order:
                part = self.parts.get(tid)
                apply_committed(self.state, part.ds.log if part is not None and part.ds is not None else [], tid)
            self.overlay.clear()
        self._close_batch(ab)

    def _abort_batch(self, bid: int) -> None:
        ab = self.batches.pop(bid)
        self.overlay.clear()
        self._close_batch(ab)

    def _close_batch(self, ab: ActorBatch) -> None:
        for tid in ab.order:
            self.parts.pop(tid, None)
        if self.current is ab:
            self.current = None
        self._try_start_batch()
        self._notify()

    # -- ACT execution ----------------------------------------------------

    async def _act_admit(self, txn: Txn) -> None:
        """Order the ACT against batches: die behind a later batch, wait for earlier ones."""
        rt = self.runtime
        tid = txn.tid
        if tid < self.watermark:
            raise rt._abort(txn, TxnAborted(f"txn {tid} arrived after a later batch on {self.id}", cause="Die", tid=tid))

        def earlier_pending():
            cur = self.current
            if cur is not None and cur.bid <= txn.fence_bid:
                return True
            return any(b <= txn.fence_bid for b in self.batch_queue)

        if earlier_pending():
            if rt._has_waiters_on(txn):
                raise rt._abort(txn, TxnAborted(f"txn {tid} cannot wait on a batch fence while others wait on it",
                                                cause="Die", tid=tid))
            rt._fenced.add(tid)
            try:
                await self._wait_until(lambda: not earlier_pending())
            finally:
                rt._fenced.discard(tid)
            if txn.aborted is not None:
                raise txn.aborted
            if tid < self.watermark:
                raise rt._abort(txn, TxnAborted(f"txn {tid} overtaken by a batch on {self.id}", cause="Die", tid=tid))

    async def _act_acquire(self, txn: Txn, part: Participant, keys: dict) -> None:
        rt = self.runtime
        if txn.aborted is not None:
            raise txn.aborted
        await self._act_admit(txn)
        if self.granularity is Granularity.ACTOR:
            mode = RW if (not keys or any(m is RW for m in keys.values())) else R
            wanted = [(ACTOR, mode)]
        else:
            wanted = [(k, keys[k]) for k in sorted(keys)]
        for target, mode in wanted:
            outcome = self.locks.acquire(txn.tid, target, mode)
            self._kill_waiters(self.locks.take_evicted())
            if outcome is Outcome.DIE:
                raise rt._abort(txn, TxnAborted(f"txn {txn.tid} died on {target} at {self.id}", cause="Die", tid=txn.tid))
            if outcome is Outcome.MUST_WAIT:
                fut = asyncio.get_event_loop().create_future()
                self._lock_waits[(txn.tid, target)] = fut
                await fut
            part.held.add(target)
        if part.ds is None:
            part.ds = self._new_ds(txn, whole=wanted[0][1] if self.granularity is Granularity.ACTOR else None)
        elif self.granularity is Granularity.ACTOR:
            part.ds.grant_whole(wanted[0][1])
        if self.granularity is Granularity.KEY:
            for k, m in keys.items():
                part.ds.acquire(k, m)

    def _release_locks(self, tid: int) -> None:
        wake = self.locks.release_all(tid, is_absent=lambda k: k not in self.state.kv)
        for t, target in wake.granted:
            fut = self._lock_waits.pop((t, target), None)
            if fut is not None and not fut.done():
                fut.set_result(None)
        self._kill_waiters(wake.died)
        self._try_start_batch()
        self._notify()

    def _kill_waiters(self, died: list) -> None:
        for t, target in died:
            fut = self._lock_waits.pop((t, target), None)
            txn = self.runtime.txns.get(t)
            exc = TxnAborted(f"txn {t} died waiting on {target} at {self.id}", cause="Die", tid=t)
            if txn is not None:
                self.runtime._abort(txn, exc)
            if fut is not None and not fut.done():
                fut.set_exception(exc)

    def _act_prepare(self, txn: Txn, mode: LogMode, store: LogStore) -> bool:
        part = self.parts[txn.tid]
        if not store.enabled:
            return True
        log = part.ds.log
        rec = LogRecord(self.id, 0, [txn.tid], mode)
        if mode is LogMode.SNAPSHOT:
            st = self.state.copy()
            apply_committed(st, log, txn.tid)
            rec.state = part.stash = st
        else:
            rec.ops = [log]
        part.mark = store.stream(self.id).mark()
        store.append(rec)
        return True

    def _act_commit(self, txn: Txn) -> None:
        part = self.parts.pop(txn.tid)
        if part.stash is not None:
            self.state = part.stash
            self.overlay = Overlay(self.state)
        else:
            apply_committed(self.state, part.ds.log, txn.tid)
        self._release_locks(txn.tid)

    def _act_abort(self, txn: Txn) -> None:
        self.parts.pop(txn.tid, None)
        for key in [k for k in self._lock_waits if k[0] == txn.tid]:
            self.locks.discard_waiter(*key)
            fut = self._lock_waits.pop(key)
            if not fut.done():
                fut.cancel()
        self._release_locks(txn.tid)


class Runtime:
    def __init__(self, config: RuntimeConfig | None = None, registry: FunctionRegistry | None = None):
        self.config = config or RuntimeConfig()
        self.registry = registry or FunctionRegistry()
        self.groups: dict[str, type] = {}
        self.actors: dict[ActorId, TransactionalActor] = {}
        self.txns: dict[int, Txn] = {}
        self.metrics = Metrics()
        self.log = LogStore(self.config.log_mode, self.config.log_enabled, self.config.log_dir, self.config.flush)
        self._fenced: set[int] = set()
        self.coordinator = Coordinator(self._on_batch, self.config.granularity, self.config.batch_size,
                                       self.config.batch_timeout, self.config.keep_schedules)
        self._nontxn_ids = itertools.count(1)
        self._inflight: set = set()
        self.commit_order: list[int] = []
        # priority ACT tid -> its batch fence
        self._priority: dict[int, int] = {}
        # seeded values per actor; not logged
        self.base_states: dict[ActorId, ActorState] = {}

    # -- actor registry ---------------------------------------------------

    def register_group(self, group: str, cls: type = TransactionalActor) -> None:
        self.groups[group] = cls

    def actor(self, actor_id: ActorId) -> TransactionalActor:
        a = self.actors.get(actor_id)
        if a is None:
            cls = self.groups.get(actor_id.group, TransactionalActor)
            a = self.actors[actor_id] = cls(self, actor_id)
        return a

    def set_actor_mode(self, actor_id: ActorId, granularity) -> None:
        """Fix an actor's concurrency-control granularity at creation time."""
        granularity = Granularity.parse(granularity)
        if granularity is not self.config.granularity:
            raise ModeConflict("mixing granularities inside one runtime is not supported")
        self.actor(actor_id).granularity = granularity

    def dep_graph(self, actor: ActorId, key: Key):
        return self.actor(actor).state.deps_of(key)

    def txn(self, ctx: TxnContext) -> Txn:
        return self.txns[ctx.tid]

    # -- client entry points ---------------------------------------------

    def submit_pact(self, root: ActorId, method: str, args, spec: AccessSpec | dict) -> TxnHandle:
        if not isinstance(spec, AccessSpec):
            spec = AccessSpec(spec)
        if self.config.nontxn:
            return self.submit_nontxn(root, method, args)
        spec.validate(self.config.granularity)
        handle = TxnHandle()
        tid = self.coordinator.assign_tid()
        txn = Txn(TxnContext(tid, 0, True, self.config.granularity), root, method, args, spec, handle)
        handle.tid = tid
        handle.stamp(1)
        self.txns[tid] = txn
        self.coordinator.enqueue(tid, spec, txn)
        return handle

    def submit_act(self, root: ActorId, method: str, args=None, priority: bool = False,
                   age: int | None = None) -> TxnHandle:
        """Start a lock-based transaction. With ``priority`` (meant for retries),
        batches formed after it are held back until it finishes, so it cannot
        be overtaken by a later batch. A retry should pass the first attempt's
        tid as ``age`` so wait-die treats it as the old transaction it is."""
        if self.config.nontxn:
            return self.submit_nontxn(root, method, args)
        handle = TxnHandle()
        tid, fence = self.coordinator.begin_act()
        txn = Txn(TxnContext(tid, 0, False, self.config.granularity), root, method, args, None, handle)
        txn.fence_bid = fence
        if age is not None:
            txn.age = min(age, tid)
        if priority:
            self._priority[tid] = fence
        handle.tid = tid
        handle.stamp(1)
        self.txns[tid] = txn
        self._spawn(self._run_act(txn))
        return handle

    async def run_act(self, root: ActorId, method: str, args=None):
        return await self.submit_act(root, method, args)

    async def run_pact(self, root: ActorId, method: str, args, spec):
        return await self.submit_pact(root, method, args, spec)

    def submit_nontxn(self, root: ActorId, method: str, args=None) -> TxnHandle:
        handle = TxnHandle()
        nid = -next(self._nontxn_ids)
        txn = Txn(TxnContext(nid, 0, False, self.config.granularity), root, method, args, None, handle, nontxn=True)
        handle.tid = nid
        self.txns[nid] = txn
        self._spawn(self._run_nontxn(txn))
        return handle

    def _spawn(self, coro) -> None:
        task = asyncio.ensure_future(coro)
        self._inflight.add(task)
        task.add_done_callback(self._inflight.discard)

    async def quiesce(self) -> None:
        """Wait until every submitted transaction has resolved."""
        while True:
            self.coordinator.flush()
            pending = [t.handle.future for t in self.txns.values() if t.handle is not None and not t.handle.done()]
            if not pending and not self._inflight:
                return
            await asyncio.wait(pending + list(self._inflight), return_when=asyncio.FIRST_COMPLETED)

    def close(self) -> None:
        self.log.close()

    # -- messaging --------------------------------------------------------

    async def _send(self, ctx: TxnContext, target: ActorId, method: str, args, depth: int = 0,
                    txn: Txn | None = None):
        hop = self.config.hop_latency
        if hop:
            await asyncio.sleep(hop)
        fut = asyncio.get_event_loop().create_future()
        if txn is not None:
            txn.root_future = fut
        self.actor(target).mailbox.post((ctx, method, args, fut, depth))
        try:
            return await fut
        finally:
            if hop:
                await asyncio.sleep(hop)

    # -- failure bookkeeping ---------------------------------------------

    def _fatal(self, txn: Txn, exc: BaseException) -> BaseException:
        if txn.fatal is None:
            txn.fatal = exc
        return exc

    def _abort(self, txn: Txn, exc: BaseException) -> BaseException:
        if txn.aborted is None:
            txn.aborted = exc
        return exc

    def _has_waiters_on(self, txn: Txn) -> bool:
        return any(self.actors[a].locks.has_waiters_on(txn.tid) for a in txn.parts)

    def _age(self, tid: int) -> int:
        t = self.txns.get(tid)
        return t.age if t is not None else tid

    def _gated(self, bid: int) -> bool:
        return any(bid > fence for fence in self._priority.values())

    def _release_priority(self, tid: int) -> None:
        if self._priority.pop(tid, None) is not None:
            for act in list(self.actors.values()):
                if act.batch_queue:
                    act._try_start_batch()

    def _stamp_root(self, txn: Txn, actor: ActorId, i: int) -> None:
        if txn.handle is not None and actor == txn.root:
            txn.handle.stamp(i)

    # -- PACT orchestration ----------------------------------------------

    def _on_batch(self, schedule: BatchSchedule, requests: dict) -> None:
        for tid, txn in requests.items():
            txn.ctx = TxnContext(tid, schedule.bid, True, self.config.granularity)
            txn.handle.bid = schedule.bid
            txn.handle.stamp(2)
        for actor in sorted(schedule.per_actor):
            self.actor(actor).register_batch(schedule)
        for tid in schedule.tids:
            self._spawn(self._run_pact(requests[tid]))

    async def _run_pact(self, txn: Txn) -> None:
        try:
            txn.result = await self._send(txn.ctx, txn.root, txn.method, txn.args, txn=txn)
        except BaseException as exc:
            txn.error = exc
            self._fatal(txn, exc)
        txn.handle.stamp(5)
        txn.finished = True
        for actor in txn.spec.actors():
            self.actor(actor)._on_txn_finished(txn)

    def _actor_batch_complete(self, bid: int, actor: ActorId) -> None:
        if self.coordinator.report_actor_batch_complete(bid, actor):
            # defer so the reporting actor's bookkeeping finishes first
            asyncio.get_event_loop().call_soon(self._finish_batch, bid)

    def _finish_batch(self, bid: int) -> None:
        status = self.coordinator.status[bid]
        txns = [t for t in self.txns.values() if t.ctx is not None and t.ctx.is_pact and t.ctx.bid == bid]
        txns.sort(key=lambda t: t.tid)
        actors = sorted({a for t in txns for a in t.spec.actors()})
        failure = next((t.fatal for t in txns if t.fatal is not None), None)
        records = {}
        if failure is None:
            mode = self.log.mode
            marks = {}
            try:
                for a in actors:
                    act = self.actors[a]
                    rec = act._batch_record(bid, mode) if self.log.enabled else None
                    if rec is not None and self.log.enabled:
                        stream = self.log.stream(a)
                        marks[a] = stream.mark()
                        self.log.append(rec)
                    records[a] = rec
            except KVActorError as exc:
                for a, m in marks.items():
                    self.log.stream(a).rollback(m)
                failure = LogWriteFailure(f"batch {bid}: {exc}")
        stamp = time.perf_counter_ns()
        if failure is None:
            for a in actors:
                rec = records.get(a)
                self.actors[a]._commit_batch(bid, rec if rec is not None and rec.state is not None else None)
            self.coordinator.mark_committed(bid)
            self.metrics.batches_committed += 1
        else:
            status.failed = failure
            for a in actors:
                self.actors[a]._abort_batch(bid)
            self.metrics.batches_aborted += 1
        for t in txns:
            h = t.handle
            if h.stamps[6] is None:
                h.stamps[6] = stamp
            h.stamp(7)
            del self.txns[t.tid]
            if failure is None:
                self.commit_order.append(t.tid)
                self.metrics.committed["pact"] += 1
                rf = t.root_future
                h.future.set_result(rf.result() if rf is not None and rf.done() else t.result)
            else:
                cause = "BatchAborted" if t.fatal is None else type(t.fatal).__name__
                self.metrics.aborts[cause] += 1
                exc = t.fatal if t.fatal is not None else TxnAborted(
                    f"batch {bid} aborted: {failure}", cause="BatchAborted", tid=t.tid)
                h.future.set_exception(exc)
        self.coordinator.forget(bid)

    # -- ACT orchestration ------------------------------------------------

    async def _run_act(self, txn: Txn) -> None:
        h = txn.handle
        error = None
        try:
            txn.result = await self._send(txn.ctx, txn.root, txn.method, txn.args)
        except BaseException as exc:
            error = exc
        txn.finished = True
        h.stamp(5)
        participants = sorted(a for a, p in txn.parts.items() if p.ds is not None)
        state = TwoPhaseState(txn.tid, participants)
        state.doomed = error is not None or txn.aborted is not None
        mode = self.log.mode

        def prepare(a):
            return self.actors[a]._act_prepare(txn, mode, self.log)

        def undo(voted):
            for a in voted:
                m = txn.parts[a].mark
                if m is not None:
                    self.log.stream(a).rollback(m)

        every = sorted(txn.parts)
        phase = run_2pc(state, prepare, lambda a: None, lambda a: None, undo)
        if phase is Phase.COMMITTED:
            for a in every:
                act = self.actors[a]
                if txn.parts[a].ds is not None:
                    act._act_commit(txn)
                else:
                    act.parts.pop(txn.tid, None)
                    act._release_locks(txn.tid)
        else:
            for a in every:
                self.actors[a]._act_abort(txn)
        h.stamp(6)
        del self.txns[txn.tid]
        self._release_priority(txn.tid)
        h.stamp(7)
        if phase is Phase.COMMITTED:
            self.commit_order.append(txn.tid)
            self.metrics.committed["act"] += 1
            h.future.set_result(txn.result)
            return
        if error is None and txn.aborted is None:
            error = LogWriteFailure(f"txn {txn.tid} failed to persist")
        if isinstance(error, TxnAborted):
            cause = error.cause
        elif txn.aborted is not None:
            cause, error = txn.aborted.cause, txn.aborted
        elif isinstance(error, LogWriteFailure):
            cause = "VoteNo"
        else:
            cause = "UserError"
        self.metrics.aborts[cause] += 1
        h.future.set_exception(error)

    # -- NonTxn -----------------------------------------------------------

    async def _run_nontxn(self, txn: Txn) -> None:
        h = txn.handle
        try:
            txn.result = await self._send(txn.ctx, txn.root, txn.method, txn.args)
        except BaseException as exc:
            del self.txns[txn.tid]
            self._drop_parts(txn)
            h.future.set_exception(exc)
            return
        for a, part in txn.parts.items():
            act = self.actors[a]
            act.parts.pop(txn.tid, None)
            if part.ds is not None:
                apply_ops(act.state.kv, act.state.deps, part.ds.log)
        del self.txns[txn.tid]
        self.metrics.committed["nontxn"] += 1
        h.stamp(7)
        h.future.set_result(txn.result)

    def _drop_parts(self, txn: Txn) -> None:
        for a in txn.parts:
            self.actors[a].parts.pop(txn.tid, None)

    # -- inspection -------------------------------------------------------

    def states(self) -> dict[ActorId, ActorState]:
        return {a: act.state for a, act in self.actors.items()}

    def state_hash(self) -> str:
        """Stable digest of every actor's master state."""
        h = hashlib.sha256()
        for a in sorted(self.actors):
            st = self.actors[a].state
            buf = bytearray()
            codec.encode_actor(buf, a)
            for k in sorted(st.kv):
                codec.encode_key(buf, k)
                codec.encode_value(buf, st.kv[k])
            for k in sorted(st.deps):
                for r in sorted(st.deps[k], key=lambda r: repr(r.identity)):
                    codec.encode_dep(buf, r)
            h.update(bytes(buf))
        return h.hexdigest()
