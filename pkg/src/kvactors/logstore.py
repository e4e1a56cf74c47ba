"""Append-only per-actor log streams with incremental or snapshot records."""

from __future__ import annotations

import enum
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

from . import codec
from .errors import CorruptRecord, IoFailure, OrderViolation, StaleApply
from .state import ActorState, OperationLog, apply_committed
from .values import ActorId


class LogMode(enum.Enum):
    INCREMENTAL = "incremental"
    SNAPSHOT = "snapshot"

    @classmethod
    def parse(cls, s) -> LogMode:
        return s if isinstance(s, LogMode) else cls(str(s).lower())


class FlushPolicy(enum.Enum):
    FSYNC = "fsync"      # flush + fsync every record
    BATCHED = "batched"  # flush every record, fsync on close
    NONE = "none"        # leave it to the OS

    @classmethod
    def parse(cls, s) -> FlushPolicy:
        return s if isinstance(s, FlushPolicy) else cls(str(s).lower())


@dataclass
class LogRecord:
    actor: ActorId
    bid: int
    tids: list[int]
    mode: LogMode = LogMode.INCREMENTAL
    # incremental: per-tid op lists in commit order
    ops: list[list[OperationLog]] = field(default_factory=list)
    # snapshot: the actor state after this record
    state: Optional[ActorState] = None
    lsn: int = 0

    def encode(self) -> bytes:
        if self.mode is LogMode.SNAPSHOT:
            return codec.encode_snapshot(self.lsn, self.bid, self.tids, self.state)
        sections = [(t, self.bid, ops) for t, ops in zip(self.tids, self.ops)]
        return codec.encode_incremental(self.lsn, self.bid, sections)


def stream_filename(actor: ActorId) -> str:
    return f"{actor.group}_{actor.partition}.log"


class LogStream:
    """One actor's stream; a file under ``directory`` or an in-memory buffer."""

    def __init__(self, actor: ActorId, directory: Path | None = None,
                 flush: FlushPolicy = FlushPolicy.BATCHED):
        self.actor = actor
        self.flush = flush
        self.records = 0
        self.bytes = 0
        self.last_bid = 0
        self.next_lsn = 1
        self.path = None if directory is None else Path(directory) / stream_filename(actor)
        self._buf = bytearray() if self.path is None else None
        self._fh = None
        # test hook: make the next appends fail
        self.fail_next = 0

    def _handle(self):
        if self._fh is None:
            self._fh = open(self.path, "ab")
        return self._fh

    def append(self, record: LogRecord) -> int:
        record.lsn = self.next_lsn
        data = record.encode()
        if self.fail_next:
            self.fail_next -= 1
            raise IoFailure(f"injected write failure on {self.actor}")
        if self._buf is not None:
            self._buf += data
        else:
            try:
                fh = self._handle()
                fh.write(data)
                if self.flush is not FlushPolicy.NONE:
                    fh.flush()
                if self.flush is FlushPolicy.FSYNC:
                    os.fsync(fh.fileno())
            except OSError as exc:
                raise IoFailure(str(exc)) from exc
        self.next_lsn += 1
        self.records += 1
        self.bytes += len(data)
        if record.bid:
            self.last_bid = record.bid
        return len(data)

    def mark(self) -> tuple:
        return (self.bytes, self.records, self.next_lsn, self.last_bid)

    def rollback(self, mark: tuple) -> None:
        """Undo appends made after ``mark`` (used when a commit vote fails)."""
        size, self.records, self.next_lsn, self.last_bid = mark
        self.bytes = size
        if self._buf is not None:
            del self._buf[size:]
        else:
            fh = self._handle()
            fh.flush()
            fh.truncate(size)
            fh.seek(size)

    def read(self) -> bytes:
        if self._buf is not None:
            return bytes(self._buf)
        if self._fh is not None:
            self._fh.flush()
        if not self.path.exists():
            return b""
        return self.path.read_bytes()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.flush()
            if self.flush is not FlushPolicy.NONE:
                os.fsync(self._fh.fileno())
            self._fh.close()
            self._fh = None


class LogStore:
    def __init__(self, mode: LogMode | str = LogMode.INCREMENTAL, enabled: bool = True,
                 directory: str | Path | None = None, flush: FlushPolicy | str = FlushPolicy.BATCHED):
        self.mode = LogMode.parse(mode)
        self.enabled = enabled
        self.flush = FlushPolicy.parse(flush)
        self.directory = None if directory is None else Path(directory)
        if self.directory is not None:
            self.directory.mkdir(parents=True, exist_ok=True)
        self.streams: dict[ActorId, LogStream] = {}

    def stream(self, actor: ActorId) -> LogStream:
        s = self.streams.get(actor)
        if s is None:
            s = self.streams[actor] = LogStream(actor, self.directory, self.flush)
        return s

    def append(self, record: LogRecord) -> int:
        if not self.enabled:
            return 0
        return self.stream(record.actor).append(record)

    @property
    def total_bytes(self) -> int:
        return sum(s.bytes for s in self.streams.values())

    @property
    def total_records(self) -> int:
        return sum(s.records for s in self.streams.values())

    def manifest(self) -> dict:
        return {
            "mode": self.mode.value,
            "enabled": self.enabled,
            "actors": [
                {"actor": str(a), "file": stream_filename(a), "records": s.records,
                 "bytes": s.bytes, "final_bid": s.last_bid}
                for a, s in sorted(self.streams.items())
            ],
        }

    def write_manifest(self) -> Optional[Path]:
        if self.directory is None:
            return None
        path = self.directory / "manifest.json"
        path.write_text(json.dumps(self.manifest(), indent=2))
        return path

    def close(self) -> None:
        for s in self.streams.values():
            s.close()
        self.write_manifest()


def append(store: LogStore, record: LogRecord) -> int:
    return store.append(record)


def replay(data: bytes | LogStream, up_to_bid: int | None = None, actor: ActorId | None = None,
           base: ActorState | None = None) -> ActorState:
    """Rebuild an actor's master state from its stream, starting at ``base``
    (the seeded image) or an empty state.

    Stops before the first batch record with a bid beyond ``up_to_bid``.
    A corrupt record raises CorruptRecord carrying the state replayed so far.
    """
    if isinstance(data, LogStream):
        actor = actor or data.actor
        data = data.read()
    state = base.copy() if base is not None else ActorState(actor)
    if actor is not None:
        state.actor_id = actor
    last_lsn = 0
    last_bid = 0
    try:
        for rec in codec.iter_records(data):
            if up_to_bid is not None and rec.bid and rec.bid > up_to_bid:
                break
            if rec.lsn <= last_lsn:
                raise OrderViolation(f"lsn {rec.lsn} after {last_lsn}")
            if rec.bid:
                if rec.bid <= last_bid:
                    raise OrderViolation(f"bid {rec.bid} after {last_bid}")
                last_bid = rec.bid
            last_lsn = rec.lsn
            if rec.mode == codec.MODE_SNAPSHOT:
                applied = state.applied | set(rec.tids)
                state = rec.state
                if actor is not None:
                    state.actor_id = actor
                state.applied = applied
            else:
                for tid, _bid, ops in rec.sections:
                    try:
                        apply_committed(state, ops, tid)
                    except StaleApply as exc:
                        raise OrderViolation(str(exc)) from exc
    except CorruptRecord as exc:
        exc.state = state
        raise
    return state


def replay_all(store: LogStore, actors: Iterable[ActorId] | None = None,
               bases: dict[ActorId, ActorState] | None = None) -> dict[ActorId, ActorState]:
    bases = bases or {}
    actors = list(actors) if actors is not None else sorted(set(store.streams) | set(bases))
    return {a: replay(store.stream(a), base=bases.get(a)) for a in actors}
