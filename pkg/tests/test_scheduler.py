import asyncio

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kvactors.errors import EmptySpec, UnknownBatch
from kvactors.scheduler import AccessSpec, Coordinator, Granularity, TxnHandle, form_batch
from kvactors.state import R, RW
from kvactors.values import ActorId, Key

A, B, C, D = (ActorId("X", i) for i in range(4))
K1, K2 = Key("k", "1"), Key("k", "2")


def spec(*actors, keys=None):
    s = AccessSpec()
    for a in actors:
        s.add(a, keys)
    return s


def test_per_key_orders():
    last = {}
    sched = form_batch(1, [(2, spec(A, keys={K1: RW})), (1, spec(A, keys={K1: RW, K2: R}))], last, Granularity.KEY)
    plan = sched.per_actor[A]
    assert plan.txn_order == [(1, 1), (2, 1)]
    assert plan.per_key == {K1: [1, 2], K2: [1]}
    assert plan.prev_bid == 0 and last == {A: 1}


def test_single_txn_over_four_actors_has_overlap_quarter():
    sched = form_batch(1, [(1, spec(A, B, C, D))], {})
    assert sched.overlap_rate == 0.25
    assert all(p.per_key is None for p in sched.per_actor.values())


def test_three_txns_on_one_actor_overlap_three():
    sched = form_batch(1, [(1, spec(A)), (2, spec(A)), (3, spec(A))], {})
    assert sched.overlap_rate == 3.0


def test_prev_bid_chains_per_actor():
    last = {}
    form_batch(1, [(1, spec(A, B))], last)
    s2 = form_batch(2, [(2, spec(B, C))], last)
    s3 = form_batch(3, [(3, spec(A, C))], last)
    assert s2.per_actor[B].prev_bid == 1 and s2.per_actor[C].prev_bid == 0
    assert s3.per_actor[A].prev_bid == 1 and s3.per_actor[C].prev_bid == 2


def test_repeated_access_counts():
    s = AccessSpec().add(A).add(A).add(B, count=3)
    sched = form_batch(1, [(1, s)], {})
    assert sched.per_actor[A].txn_order == [(1, 2)]
    assert sched.per_actor[B].txn_order == [(1, 3)]


def test_spec_validation():
    with pytest.raises(EmptySpec):
        AccessSpec().validate(Granularity.ACTOR)
    with pytest.raises(EmptySpec):
        spec(A).validate(Granularity.KEY)
    spec(A).validate(Granularity.ACTOR)
    # read then write of the same key keeps the strongest mode
    s = AccessSpec().add(A, {K1: R}).add(A, {K1: RW}).add(A, {K1: R})
    assert s[A].keys[K1] is RW


specs = st.lists(st.tuples(st.sets(st.integers(0, 5), min_size=1, max_size=3),
                           st.sets(st.integers(0, 3), min_size=1, max_size=2)), min_size=1, max_size=10)


def build(items):
    out = []
    for tid, (actors, keys) in enumerate(items, start=1):
        s = AccessSpec()
        for a in sorted(actors):
            s.add(ActorId("X", a), {Key("k", str(k)): RW for k in keys})
        out.append((tid, s))
    return out


@settings(max_examples=100, deadline=None)
@given(specs, st.randoms(use_true_random=False))
def test_schedule_is_independent_of_arrival_order(items, rnd):
    pending = build(items)
    shuffled = list(pending)
    rnd.shuffle(shuffled)
    a = form_batch(1, pending, {}, Granularity.KEY)
    b = form_batch(1, shuffled, {}, Granularity.KEY)
    assert a.to_json() == b.to_json()
    # every order is ascending in tid and per-key lists are subsequences of it
    for plan in a.per_actor.values():
        tids = [t for t, _ in plan.txn_order]
        assert tids == sorted(tids)
        for ks in plan.per_key.values():
            assert ks == sorted(ks) and set(ks) <= set(tids)


def run(coro):
    return asyncio.run(coro)


def test_size_trigger_forms_batch_immediately():
    async def go():
        seen = []
        c = Coordinator(lambda s, r: seen.append(s), batch_size=3, batch_timeout=10)
        for _ in range(3):
            c.submit_pact(spec(A), None)
        assert [s.tids for s in seen] == [[1, 2, 3]]
        c.submit_pact(spec(A), None)
        assert len(seen) == 1
        c.flush()
        return seen
    seen = run(go())
    assert [s.bid for s in seen] == [1, 2]


def test_timeout_trigger():
    async def go():
        seen = []
        c = Coordinator(lambda s, r: seen.append(s), batch_size=64, batch_timeout=0.005)
        c.submit_pact(spec(A), "req")
        assert seen == []
        await asyncio.sleep(0.05)
        return seen
    seen = run(go())
    assert len(seen) == 1 and seen[0].tids == [1]


def test_act_tids_share_the_counter_and_flush_pending():
    async def go():
        seen = []
        c = Coordinator(lambda s, r: seen.append(s), batch_size=64, batch_timeout=10)
        t1 = c.submit_pact(spec(A), None)
        t2, fence = c.begin_act()
        t3 = c.submit_pact(spec(B), None)
        c.flush()
        return t1, t2, fence, t3, seen
    t1, t2, fence, t3, seen = run(go())
    assert (t1, t2, t3) == (1, 2, 3)
    # the ACT's fence covers the batch holding the older PACT
    assert fence == 1 and seen[0].tids == [1]


def test_batch_completion_reports():
    async def go():
        c = Coordinator(lambda s, r: None, batch_size=1)
        c.submit_pact(spec(A, B), None)
        return c
    c = run(go())
    assert not c.report_actor_batch_complete(1, A)
    assert not c.report_actor_batch_complete(1, A)  # duplicate report
    assert c.report_actor_batch_complete(1, B)
    c.mark_committed(1)
    assert not c.report_actor_batch_complete(1, B)
    with pytest.raises(UnknownBatch):
        c.report_actor_batch_complete(9, A)
    assert c.stats.summary() == {"batches": 1, "mean_batch_size": 1.0, "mean_overlap_rate": 0.5}


def test_handle_intervals_telescope():
    async def go():
        h = TxnHandle(1)
        for i in (1, 3, 7):
            h.stamp(i)
        return h
    h = run(go())
    iv = h.intervals()
    assert len(iv) == 7 and all(x >= 0 for x in iv)
    assert sum(iv) == h.stamps[7] - h.stamps[0]
