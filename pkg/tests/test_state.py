import copy
from decimal import Decimal

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kvactors.dependency import delete_dep, update_dep
from kvactors.errors import InvalidValue, KeyAbsent, KeyNotAcquired, ReadOnlyAccess, StaleApply
from kvactors.state import (R, RW, ActorState, DictionaryState, OperationLog, OpKind, Overlay, apply_committed,
                            ds_delete, ds_get, ds_put)
from kvactors.values import ActorId, Key, Record, dec, normalize

A1 = ActorId("A", 1)
A2 = ActorId("A", 2)


def k(i):
    return Key("k", str(i))


def master(**vals):
    m = ActorState(A1)
    for name, v in vals.items():
        m.kv[Key("k", name[1:])] = v
    return m


# -- values -----------------------------------------------------------------

def test_decimal_is_exact_at_four_digits():
    assert dec("0.1") + dec("0.2") == dec("0.3")
    assert dec("1.2345") == Decimal("1.2345")
    assert dec(2) == Decimal("2.0000")
    with pytest.raises(InvalidValue):
        dec("1.23456")


def test_normalize_rejects_unsupported_values():
    for bad in (True, 1.5, None, 2**63, [1]):
        with pytest.raises(InvalidValue):
            normalize(bad)
    assert normalize(Decimal("2.5")) == Decimal("2.5000")
    assert normalize({"a": 1}) == Record(a=1)


def test_record_equality_is_structural_and_ordered():
    assert Record(a=1, b="x") == Record({"a": 1, "b": "x"})
    assert Record(a=1, b=2) != Record(b=2, a=1)
    r = Record(price=dec("10"))
    assert copy.deepcopy(r) is r
    assert r.replace(price=dec("12")) == Record(price=dec("12.0000"))


def test_key_and_actor_ordering():
    assert sorted([ActorId("B", 0), ActorId("A", 5), ActorId("A", 2)]) == [ActorId("A", 2), ActorId("A", 5), ActorId("B", 0)]
    assert str(Key("product", "7")) == "product:7"


# -- DictionaryState --------------------------------------------------------

def test_get_put_delete_examples():
    ds = DictionaryState(1, A1, base=master(k1=5))
    ds.acquire(k(1), RW)
    assert ds_get(ds, k(1)) == 5
    ds_put(ds, k(1), 7)
    assert ds_get(ds, k(1)) == 7
    ds_delete(ds, k(1))
    assert ds_get(ds, k(1)) is None


def test_put_captures_before_and_after():
    ds = DictionaryState(1, A1, base=master(k1=5))
    ds.acquire(k(1))
    ds.acquire(k(2))
    ds.put(k(1), 7)
    ds.put(k(2), 1)
    assert [(e.op, e.before, e.after) for e in ds.log] == [(OpKind.PUT, 5, 7), (OpKind.PUT, None, 1)]


def test_put_sequencing():
    ds = DictionaryState(1, A1, base=master(k1=5))
    ds.acquire(k(1))
    ds.put(k(1), 7)
    ds.put(k(1), 9)
    assert [e.seq for e in ds.log] == [0, 1]
    assert ds.get(k(1)) == 9


def test_identical_put_is_still_logged():
    ds = DictionaryState(1, A1, base=master(k1=5))
    ds.acquire(k(1))
    ds.put(k(1), 5)
    assert len(ds.log) == 1


def test_access_errors():
    ds = DictionaryState(1, A1, base=master(k1=5, k2=1))
    with pytest.raises(KeyNotAcquired):
        ds.get(k(1))
    ds.acquire(k(2), R)
    with pytest.raises(ReadOnlyAccess):
        ds.put(k(2), 3)
    ds.acquire(k(3), RW)
    with pytest.raises(KeyAbsent):
        ds.delete(k(3))


def test_read_upgrade_to_read_write():
    ds = DictionaryState(1, A1, base=master(k1=5))
    ds.acquire(k(1), R)
    ds.acquire(k(1), RW)
    ds.put(k(1), 6)
    assert ds.get(k(1)) == 6


def test_whole_state_access_copies_on_touch():
    m = master(k1=5, k2=6)
    ds = DictionaryState(1, A1, base=m, whole=RW)
    ds.put(k(3), 1)
    assert sorted(ds.keys()) == [k(1), k(2), k(3)]
    assert m.kv == {k(1): 5, k(2): 6}


def test_delete_emits_deregister_per_attached_record():
    m = master(k1=5)
    inbound = update_dep(A2, k(9), A1, k(1))
    m.deps[k(1)] = [inbound]
    ds = DictionaryState(1, A1, base=m)
    ds.acquire(k(1))
    ds.delete(k(1))
    assert [(e.op, e.dep) for e in ds.log] == [(OpKind.DELETE, None), (OpKind.DEREGISTER_DEP, inbound)]

    m = master(k1=5)
    ds = DictionaryState(1, A1, base=m)
    ds.acquire(k(1))
    ds.delete(k(1))
    assert [e.op for e in ds.log] == [OpKind.DELETE]


def test_delete_leader_with_two_outbound_records():
    m = master(k1=5)
    attached = [update_dep(A1, k(1), A2, k(1)), delete_dep(A1, k(1), A2, k(2))]
    m.deps[k(1)] = list(attached)
    ds = DictionaryState(1, A1, base=m)
    ds.acquire(k(1))
    ds.delete(k(1))
    assert ds.log[0].op is OpKind.DELETE and ds.log[0].before == 5
    assert {e.dep for e in ds.log[1:]} == set(attached)
    assert all(e.op is OpKind.DEREGISTER_DEP for e in ds.log[1:])
    # the master keeps its records until commit
    assert m.deps[k(1)] == attached


def test_operation_log_shape_is_validated():
    with pytest.raises(ValueError):
        OperationLog(0, OpKind.PUT, k(1))
    with pytest.raises(ValueError):
        OperationLog(0, OpKind.DELETE, k(1), before=1, after=2)
    with pytest.raises(ValueError):
        OperationLog(0, OpKind.REGISTER_DEP, k(1))


# -- applying committed logs -----------------------------------------------

def test_apply_committed_examples():
    m = master(k1=5)
    apply_committed(m, [OperationLog(0, OpKind.PUT, k(1), 5, 7)], tid=1)
    assert m.kv == {k(1): 7}

    d = delete_dep(A1, k(2), A2, k(2))
    m = master(k1=5, k2=2)
    m.deps[k(2)] = [d]
    apply_committed(m, [OperationLog(0, OpKind.DELETE, k(2), 2), OperationLog(1, OpKind.DEREGISTER_DEP, k(2), dep=d)], tid=3)
    assert m.kv == {k(1): 5}
    assert m.deps == {}
    assert m.last_applied_tid == 3


def test_apply_committed_rejects_duplicate_tid():
    m = master(k1=5)
    apply_committed(m, [], tid=4)
    with pytest.raises(StaleApply):
        apply_committed(m, [], tid=4)
    # lock-based transactions may commit out of tid order
    apply_committed(m, [], tid=2)
    assert m.last_applied_tid == 4


def test_overlay_reads_through_and_hides_deletes():
    m = master(k1=5, k2=6)
    ov = Overlay(m)
    ds = DictionaryState(1, A1, base=ov)
    ds.acquire(k(1))
    ds.acquire(k(2))
    ds.put(k(1), 8)
    ds.delete(k(2))
    ov.apply(ds.log)
    assert ov.get(k(1)) == 8 and ov.get(k(2)) is None
    assert list(ov.keys()) == [k(1)]
    assert m.kv == {k(1): 5, k(2): 6}
    ov.clear()
    assert ov.get(k(2)) == 6


# -- properties -------------------------------------------------------------

KEYS = [k(i) for i in range(8)]

op_strategy = st.lists(
    st.tuples(st.sampled_from(["get", "put", "delete"]), st.integers(0, 7), st.integers(-50, 50)),
    max_size=20,
)
base_strategy = st.dictionaries(st.integers(0, 7), st.integers(-100, 100), max_size=8)


def interpret(base: dict, ops) -> dict:
    """Naive sequential interpreter over a plain dict."""
    out = dict(base)
    for op, i, v in ops:
        key = KEYS[i]
        if op == "put":
            out[key] = v
        elif op == "delete" and key in out:
            del out[key]
    return out


def drive(ds, ops):
    for op, i, v in ops:
        key = KEYS[i]
        if op == "get":
            ds.get(key)
        elif op == "put":
            ds.put(key, v)
        elif ds.get(key) is not None:
            ds.delete(key)


@settings(max_examples=200, deadline=None)
@given(base_strategy, op_strategy)
def test_local_view_matches_interpreter_and_log_replays(base, ops):
    m = ActorState(A1)
    m.kv = {KEYS[i]: v for i, v in base.items()}
    snapshot = dict(m.kv)
    ds = DictionaryState(1, A1, base=m)
    for key in KEYS:
        ds.acquire(key, RW)
    drive(ds, ops)
    expected = interpret(snapshot, ops)
    local = {key: ds.get(key) for key in KEYS if ds.get(key) is not None}
    assert local == expected
    # ds_* never touch the master
    assert m.kv == snapshot
    # log completeness: replaying the log onto the entry snapshot gives the local view
    apply_committed(m, ds.log, tid=1)
    assert m.kv == expected
    assert [e.seq for e in ds.log] == list(range(len(ds.log)))


@settings(max_examples=100, deadline=None)
@given(base_strategy, st.lists(op_strategy, min_size=1, max_size=20))
def test_serial_application_of_many_logs(base, txns):
    m = ActorState(A1)
    m.kv = {KEYS[i]: v for i, v in base.items()}
    expected = dict(m.kv)
    for tid, ops in enumerate(txns, start=1):
        ds = DictionaryState(tid, A1, base=m)
        for key in KEYS:
            ds.acquire(key, RW)
        drive(ds, ops)
        apply_committed(m, ds.log, tid)
        expected = interpret(expected, ops)
    assert m.kv == expected
