"""Binary encoding of values, operation logs, actor state and log records.

Record framing::

    u32 length                  (bytes after this field, crc included)
    u8  mode                    (1 = incremental, 2 = snapshot)
    u64 lsn                     (per-stream record sequence number)
    u64 bid                     (0 for ACT)
    u16 section count
    sections...                 incremental: u64 tid, u64 bid, u16 op-count, ops...
                                snapshot:    u64 tid per section, then the state
    u32 crc32 of everything between length and crc

Values are tagged unions: one tag byte followed by the payload.
"""

from __future__ import annotations

import struct
import zlib
from decimal import Decimal

from .errors import CorruptRecord
from .state import ActorState, OperationLog, OpKind
from .values import ActorId, Key, Record, QUANTUM

TAG_ABSENT = 0
TAG_INT = 1
TAG_DECIMAL = 2
TAG_TEXT = 3
TAG_RECORD = 4

MODE_INCREMENTAL = 1
MODE_SNAPSHOT = 2

_u8 = struct.Struct("<B")
_u16 = struct.Struct("<H")
_u32 = struct.Struct("<I")
_u64 = struct.Struct("<Q")
_i64 = struct.Struct("<q")
_tag_i64 = struct.Struct("<Bq")
_header = struct.Struct("<BQQH")
_SCALE = 10_000


def _text(out: bytearray, s: str) -> None:
    b = s.encode()
    out += _u16.pack(len(b))
    out += b


def encode_value(out: bytearray, v) -> None:
    if v is None:
        out.append(TAG_ABSENT)
    elif type(v) is int:
        out += _tag_i64.pack(TAG_INT, v)
    elif isinstance(v, Decimal):
        out += _tag_i64.pack(TAG_DECIMAL, int(v.scaleb(4)))
    elif isinstance(v, str):
        b = v.encode()
        out.append(TAG_TEXT)
        out += _u32.pack(len(b))
        out += b
    elif isinstance(v, Record):
        out.append(TAG_RECORD)
        out += _u16.pack(len(v))
        for name, field in v.items():
            _text(out, name)
            encode_value(out, field)
    else:
        raise TypeError(f"cannot encode {type(v).__name__}")


def encode_key(out: bytearray, k: Key) -> None:
    _text(out, k.namespace)
    _text(out, k.id)


def encode_actor(out: bytearray, a: ActorId) -> None:
    _text(out, a.group)
    out += _u32.pack(a.partition)


def encode_dep(out: bytearray, r) -> None:
    out.append(int(r.dep_type))
    encode_actor(out, r.leader_actor)
    encode_key(out, r.leader_key)
    encode_actor(out, r.follower_actor)
    encode_key(out, r.follower_key)
    if r.function_id is None:
        out.append(0)
    else:
        out.append(1)
        _text(out, r.function_id)


def encode_op(out: bytearray, op: OperationLog) -> None:
    out.append(int(op.op))
    out += _u32.pack(op.seq)
    encode_key(out, op.key)
    if op.op is OpKind.PUT or op.op is OpKind.DELETE:
        encode_value(out, op.before)
        encode_value(out, op.after)
    else:
        encode_dep(out, op.dep)


def encode_state(out: bytearray, state: ActorState) -> None:
    encode_actor(out, state.actor_id or ActorId("", 0))
    out += _u64.pack(state.last_applied_tid)
    out += _u32.pack(len(state.kv))
    for k, v in state.kv.items():
        encode_key(out, k)
        encode_value(out, v)
    deps = [(k, rs) for k, rs in state.deps.items() if rs]
    out += _u32.pack(len(deps))
    for k, rs in deps:
        encode_key(out, k)
        out += _u16.pack(len(rs))
        for r in rs:
            encode_dep(out, r)


class Reader:
    __slots__ = ("buf", "pos")

    def __init__(self, buf: bytes, pos: int = 0):
        self.buf = buf
        self.pos = pos

    def _take(self, s: struct.Struct):
        v = s.unpack_from(self.buf, self.pos)
        self.pos += s.size
        return v[0]

    def u8(self):
        return self._take(_u8)

    def u16(self):
        return self._take(_u16)

    def u32(self):
        return self._take(_u32)

    def u64(self):
        return self._take(_u64)

    def i64(self):
        return self._take(_i64)

    def text(self, wide: bool = False) -> str:
        n = self.u32() if wide else self.u16()
        b = self.buf[self.pos:self.pos + n]
        if len(b) != n:
            raise struct.error("short read")
        self.pos += n
        return bytes(b).decode()

    def value(self):
        tag = self.u8()
        if tag == TAG_ABSENT:
            return None
        if tag == TAG_INT:
            return self.i64()
        if tag == TAG_DECIMAL:
            return Decimal(self.i64()).scaleb(-4).quantize(QUANTUM)
        if tag == TAG_TEXT:
            return self.text(wide=True)
        if tag == TAG_RECORD:
            n = self.u16()
            fields = {}
            for _ in range(n):
                name = self.text()
                fields[name] = self.value()
            return Record(fields)
        raise ValueError(f"bad value tag {tag}")

    def key(self) -> Key:
        return Key(self.text(), self.text())

    def actor(self) -> ActorId:
        return ActorId(self.text(), self.u32())

    def dep(self):
        from .dependency import DependencyRecord, DepType

        dep_type = DepType(self.u8())
        la, lk, fa, fk = self.actor(), self.key(), self.actor(), self.key()
        fid = self.text() if self.u8() else None
        return DependencyRecord(dep_type, la, lk, fa, fk, fid)

    def op(self) -> OperationLog:
        kind = OpKind(self.u8())
        seq = self.u32()
        key = self.key()
        if kind is OpKind.PUT or kind is OpKind.DELETE:
            before = self.value()
            after = self.value()
            return OperationLog(seq, kind, key, before, after)
        return OperationLog(seq, kind, key, dep=self.dep())

    def state(self) -> ActorState:
        actor = self.actor()
        st = ActorState(actor if actor.group else None)
        st.last_applied_tid = self.u64()
        for _ in range(self.u32()):
            k = self.key()
            st.kv[k] = self.value()
        for _ in range(self.u32()):
            k = self.key()
            st.deps[k] = [self.dep() for _ in range(self.u16())]
        return st


def encode_value_bytes(v) -> bytes:
    out = bytearray()
    encode_value(out, v)
    return bytes(out)


def decode_value_bytes(b: bytes):
    return Reader(b).value()


def encode_incremental(lsn: int, bid: int, sections: list[tuple[int, int, list[OperationLog]]]) -> bytes:
    """``sections`` is a list of (tid, bid, ops) in commit order."""
    body = bytearray(_header.pack(MODE_INCREMENTAL, lsn, bid, len(sections)))
    for tid, sbid, ops in sections:
        body += _u64.pack(tid)
        body += _u64.pack(sbid)
        body += _u16.pack(len(ops))
        for op in ops:
            encode_op(body, op)
    return _frame(body)


def encode_snapshot(lsn: int, bid: int, tids: list[int], state: ActorState) -> bytes:
    body = bytearray(_header.pack(MODE_SNAPSHOT, lsn, bid, len(tids)))
    for tid in tids:
        body += _u64.pack(tid)
    encode_state(body, state)
    return _frame(body)


def _frame(body: bytearray) -> bytes:
    crc = zlib.crc32(body)
    return _u32.pack(len(body) + 4) + bytes(body) + _u32.pack(crc)


class DecodedRecord:
    __slots__ = ("mode", "lsn", "bid", "sections", "state", "size")

    def __init__(self, mode, lsn, bid, sections, state, size):
        self.mode = mode
        self.lsn = lsn
        self.bid = bid
        # incremental: list of (tid, bid, ops); snapshot: list of (tid, bid, [])
        self.sections = sections
        self.state = state
        self.size = size

    @property
    def tids(self) -> list[int]:
        return [s[0] for s in self.sections]


def iter_records(buf: bytes):
    """Yield decoded records; raises CorruptRecord on a torn or bad record."""
    pos, n = 0, len(buf)
    while pos < n:
        if pos + 4 > n:
            raise CorruptRecord(f"truncated length prefix at offset {pos}")
        (length,) = _u32.unpack_from(buf, pos)
        end = pos + 4 + length
        if length < 4 + _header.size or end > n:
            raise CorruptRecord(f"truncated record at offset {pos}")
        body = buf[pos + 4:end - 4]
        (crc,) = _u32.unpack_from(buf, end - 4)
        if zlib.crc32(body) != crc:
            raise CorruptRecord(f"crc mismatch at offset {pos}")
        try:
            yield _decode_body(body, end - pos)
        except (struct.error, ValueError, UnicodeDecodeError) as exc:
            raise CorruptRecord(f"undecodable record at offset {pos}: {exc}") from exc
        pos = end


def _decode_body(body: bytes, size: int) -> DecodedRecord:
    mode, lsn, bid, count = _header.unpack_from(body, 0)
    r = Reader(body, _header.size)
    if mode == MODE_INCREMENTAL:
        sections = []
        for _ in range(count):
            tid, sbid, nops = r.u64(), r.u64(), r.u16()
            sections.append((tid, sbid, [r.op() for _ in range(nops)]))
        return DecodedRecord(mode, lsn, bid, sections, None, size)
    if mode == MODE_SNAPSHOT:
        tids = [r.u64() for _ in range(count)]
        state = r.state()
        return DecodedRecord(mode, lsn, bid, [(t, bid, []) for t in tids], state, size)
    raise ValueError(f"bad record mode {mode}")
