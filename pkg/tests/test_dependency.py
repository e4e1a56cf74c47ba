from collections import deque

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kvactors.dependency import (CyclePolicy, DepType, DependencyRecord, ForwardedOp, ForwardKind, FunctionRegistry,
                                 UpdateFunction, apply_logs, check_follower_eligibility, creates_update_cycle,
                                 delete_dep, follower_complete, follower_precheck, keys_for, leader_accept,
                                 resolve_forwards, update_dep)
from kvactors.errors import (DuplicateDependency, DuplicateFunctionId, FollowerIneligible, HopLimitExceeded,
                             LeaderIneligible, LeaderKeyMissing, UnknownFunction)
from kvactors.state import RW, ActorState, DictionaryState, OperationLog, OpKind, apply_committed
from kvactors.values import ActorId, Key, Record, dec

P = ActorId("Product", 0)
S = ActorId("Stock", 0)
C3 = ActorId("Cart", 3)
A1, A2, A3 = ActorId("A", 1), ActorId("A", 2), ActorId("A", 3)


def key(name):
    return Key("k", name)


def state(actor, **vals):
    s = ActorState(actor)
    for name, v in vals.items():
        s.kv[key(name)] = v
    return s


def attach(states, record):
    """Place a record on its leader and its backward copy on the follower."""
    states[record.leader_actor].deps.setdefault(record.leader_key, []).append(record)
    states[record.follower_actor].deps.setdefault(record.follower_key, []).append(record)


def graph_of(states):
    return lambda actor, k: states[actor].deps_of(k) if actor in states else []


# -- update functions -------------------------------------------------------

def test_builtin_functions():
    reg = FunctionRegistry()
    rep = reg["replicate"].apply
    assert rep(key("p"), 10, 12, key("c"), 10) == 12
    assert rep(key("p"), 7, 7, key("c"), "anything") == 7
    assert reg["sum_delta"].apply(key("o"), 3, 5, key("v"), 100) == 102
    with pytest.raises(TypeError):
        reg["sum_delta"].apply(key("o"), "a", "b", key("v"), 1)


def test_registry_errors():
    reg = FunctionRegistry()
    with pytest.raises(DuplicateFunctionId):
        reg.register(UpdateFunction("replicate", lambda *a: a[2]))
    with pytest.raises(UnknownFunction):
        reg["nope"]
    reg.register(UpdateFunction("double", lambda kl, o, n, kf, vf: n * 2))
    assert reg.apply(update_dep(A1, key("a"), A2, key("b"), "double"), 1, 4, 0) == 8


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 4), st.integers(-1000, 1000)), max_size=40))
def test_sum_delta_matches_recount(writes):
    # five leader keys feeding one view; the oracle recomputes the sum from scratch
    reg = FunctionRegistry()
    leaders = [0] * 5
    view = 0
    for i, new in writes:
        r = update_dep(A1, key(str(i)), A2, key("view"), "sum_delta")
        view = reg.apply(r, leaders[i], new, view)
        leaders[i] = new
        assert view == sum(leaders)


def test_sum_delta_on_decimals():
    reg = FunctionRegistry()
    r = update_dep(A1, key("x"), A2, key("v"), "sum_delta")
    assert reg.apply(r, dec("1.5"), dec("2.25"), dec("10")) == dec("10.75")


# -- records ----------------------------------------------------------------

def test_record_field_invariants():
    with pytest.raises(ValueError):
        DependencyRecord(DepType.UPDATE, A1, key("a"), A2, key("b"))
    with pytest.raises(ValueError):
        DependencyRecord(DepType.DELETE, A1, key("a"), A2, key("b"), "replicate")
    with pytest.raises(ValueError):
        update_dep(A1, key("a"), A1, key("a"))
    # same actor, different keys is allowed
    assert update_dep(A1, key("a"), A1, key("b")).leader_actor == A1


# -- eligibility and cycles -------------------------------------------------

def test_s3_eligibility():
    s = state(A1, f=1)
    assert check_follower_eligibility(s, key("f"), CyclePolicy.S3)
    s.deps[key("f")] = [update_dep(A1, key("f"), A2, key("x"))]
    assert not check_follower_eligibility(s, key("f"), CyclePolicy.S3)
    # being a follower already is fine under S3
    s2 = state(A2, x=1)
    s2.deps[key("x")] = [update_dep(A1, key("f"), A2, key("x"))]
    assert check_follower_eligibility(s2, key("x"), CyclePolicy.S3)


def test_s1_rejects_closing_a_three_key_update_cycle():
    states = {a: state(a, k=1) for a in (A1, A2, A3)}
    attach(states, update_dep(A1, key("k"), A2, key("k")))
    attach(states, update_dep(A2, key("k"), A3, key("k")))
    closing = update_dep(A3, key("k"), A1, key("k"))
    assert creates_update_cycle(closing, graph_of(states))
    assert not check_follower_eligibility(states[A1], key("k"), CyclePolicy.S1, record=closing, graph=graph_of(states))
    # a parallel edge that closes nothing is fine
    ok = update_dep(A3, key("k"), ActorId("A", 4), key("k"))
    assert check_follower_eligibility(ActorState(ActorId("A", 4)), key("k"), CyclePolicy.S1,
                                      record=ok, graph=graph_of(states))


def test_s1_hop_limit_is_rejection():
    n = 10
    actors = [ActorId("C", i) for i in range(n + 1)]
    states = {a: state(a, k=1) for a in actors}
    for i in range(n):
        attach(states, update_dep(actors[i], key("k"), actors[i + 1], key("k")))
    fresh = ActorId("Z", 0)
    rec = update_dep(fresh, key("k"), actors[0], key("k"))
    with pytest.raises(HopLimitExceeded):
        creates_update_cycle(rec, graph_of(states), hop_limit=3)
    assert not check_follower_eligibility(states[actors[0]], key("k"), CyclePolicy.S1, record=rec,
                                          graph=graph_of(states), hop_limit=3)
    assert check_follower_eligibility(states[actors[0]], key("k"), CyclePolicy.S1, record=rec,
                                      graph=graph_of(states), hop_limit=64)


def test_delete_edges_never_form_update_cycles():
    states = {a: state(a, k=1) for a in (A1, A2)}
    attach(states, delete_dep(A1, key("k"), A2, key("k")))
    assert not creates_update_cycle(update_dep(A2, key("k"), A1, key("k")), graph_of(states))


# -- registration halves ----------------------------------------------------

def test_registration_seeds_absent_follower():
    reg = FunctionRegistry()
    leader = state(P, p1=Record(price=dec("10")))
    rec = update_dep(P, key("p1"), C3, key("p1"))
    lds = DictionaryState(1, P, base=leader)
    lds.acquire(key("p1"))
    v_l = leader_accept(lds, rec, CyclePolicy.S3)
    fds = DictionaryState(1, C3, base=ActorState(C3))
    fds.acquire(key("p1"))
    follower_precheck(fds, rec, CyclePolicy.S3)
    res = follower_complete(fds, rec, v_l, reg)
    assert res.seeded and res.initial_value == Record(price=dec("10"))
    assert [e.op for e in lds.log] == [OpKind.REGISTER_DEP]
    assert [e.op for e in fds.log] == [OpKind.PUT, OpKind.REGISTER_DEP]


def test_registration_refreshes_existing_follower():
    reg = FunctionRegistry()
    rec = update_dep(P, key("p1"), C3, key("p1"))
    fds = DictionaryState(1, C3, base=state(C3, p1=7))
    fds.acquire(key("p1"))
    res = follower_complete(fds, rec, 10, reg)
    assert not res.seeded and fds.get(key("p1")) == 10


def test_registration_errors_leave_no_trace():
    rec = update_dep(P, key("p1"), C3, key("p1"))
    lds = DictionaryState(1, P, base=ActorState(P))
    lds.acquire(key("p1"))
    with pytest.raises(LeaderKeyMissing):
        leader_accept(lds, rec, CyclePolicy.S3)
    assert lds.log == []

    # the leader key is itself a follower: rejected under S3
    leader = state(P, p1=1)
    leader.deps[key("p1")] = [update_dep(S, key("x"), P, key("p1"))]
    lds = DictionaryState(1, P, base=leader)
    lds.acquire(key("p1"))
    with pytest.raises(LeaderIneligible):
        leader_accept(lds, rec, CyclePolicy.S3)

    follower = state(C3, p1=1)
    follower.deps[key("p1")] = [update_dep(C3, key("p1"), S, key("y"))]
    fds = DictionaryState(1, C3, base=follower)
    fds.acquire(key("p1"))
    with pytest.raises(FollowerIneligible):
        follower_precheck(fds, rec, CyclePolicy.S3)

    follower = state(C3, p1=1)
    follower.deps[key("p1")] = [rec]
    fds = DictionaryState(1, C3, base=follower)
    fds.acquire(key("p1"))
    with pytest.raises(DuplicateDependency):
        follower_precheck(fds, rec, CyclePolicy.S3)


# -- forwarding -------------------------------------------------------------

def test_put_on_leader_fans_out_one_apply_update():
    rec = update_dep(A1, key("k1"), A2, key("k1'"))
    s = state(A1, k1=5)
    s.deps[key("k1")] = [rec]
    log = [OperationLog(0, OpKind.PUT, key("k1"), 5, 7)]
    assert resolve_forwards(A1, s, log) == {A2: [ForwardedOp(ForwardKind.APPLY_UPDATE, rec, 5, 7)]}


def test_delete_leader_cascades_and_deregisters():
    d2 = delete_dep(P, key("p1"), S, key("p1"))
    d1 = update_dep(P, key("p1"), C3, key("p1"))
    s = state(P, p1=1)
    s.deps[key("p1")] = [d2, d1]
    ds = DictionaryState(1, P, base=s)
    ds.acquire(key("p1"))
    ds.delete(key("p1"))
    fwd = resolve_forwards(P, ds, ds.log)
    assert fwd == {
        S: [ForwardedOp(ForwardKind.CASCADE_DELETE, d2), ForwardedOp(ForwardKind.DEREGISTER_AT_FOLLOWER, d2)],
        C3: [ForwardedOp(ForwardKind.DEREGISTER_AT_FOLLOWER, d1)],
    }


def test_delete_follower_deregisters_at_leader():
    d1 = update_dep(P, key("p1"), C3, key("p1"))
    s = state(C3, p1=1)
    s.deps[key("p1")] = [d1]
    ds = DictionaryState(1, C3, base=s)
    ds.acquire(key("p1"))
    ds.delete(key("p1"))
    assert resolve_forwards(C3, ds, ds.log) == {P: [ForwardedOp(ForwardKind.DEREGISTER_AT_LEADER, d1)]}


def test_no_deps_no_forwards():
    s = state(A1, k1=5)
    assert resolve_forwards(A1, s, [OperationLog(0, OpKind.PUT, key("k1"), 5, 7)]) == {}


def test_updates_do_not_travel_along_delete_records():
    s = state(P, p1=1)
    s.deps[key("p1")] = [delete_dep(P, key("p1"), S, key("p1"))]
    assert resolve_forwards(P, s, [OperationLog(0, OpKind.PUT, key("p1"), 1, 2)]) == {}


def test_apply_logs_examples():
    reg = FunctionRegistry()
    rec = update_dep(P, key("p1"), C3, key("p1"))
    follower = state(C3, p1=10)
    follower.deps[key("p1")] = [rec]
    ds = DictionaryState(1, C3, base=follower)
    ops = [ForwardedOp(ForwardKind.APPLY_UPDATE, rec, 10, 12)]
    for k, m in keys_for(ops).items():
        ds.acquire(k, m)
    seg = apply_logs(ds, ops, reg)
    assert ds.get(key("p1")) == 12 and [e.op for e in seg] == [OpKind.PUT]

    d2 = delete_dep(P, key("p1"), S, key("p1"))
    ds = DictionaryState(2, S, base=ActorState(S))
    ds.acquire(key("p1"), RW)
    assert apply_logs(ds, [ForwardedOp(ForwardKind.CASCADE_DELETE, d2)], reg) == []


def test_apply_update_skips_unregistered_follower():
    reg = FunctionRegistry()
    rec = update_dep(P, key("p1"), C3, key("p1"))
    ds = DictionaryState(1, C3, base=state(C3, p1=10))
    ds.acquire(key("p1"))
    assert apply_logs(ds, [ForwardedOp(ForwardKind.APPLY_UPDATE, rec, 10, 12)], reg) == []
    assert ds.get(key("p1")) == 10


def propagate(states, origin, k, reg):
    """Drive deletion of ``k`` on ``origin`` to a fixed point, like the runtime does.

    Returns per-actor logs and the number of Delete entries emitted."""
    views = {a: DictionaryState(1, a, base=s, whole=RW) for a, s in states.items()}
    views[origin].delete(k)
    queue = deque([(origin, list(views[origin].log))])
    rounds = 0
    while queue:
        actor, seg = queue.popleft()
        rounds += 1
        assert rounds < 100, "forwarding did not terminate"
        for target, ops in sorted(resolve_forwards(actor, views[actor], seg).items()):
            new = apply_logs(views[target], ops, reg)
            if new:
                queue.append((target, new))
    deletes = sum(1 for v in views.values() for e in v.log if e.op is OpKind.DELETE)
    return views, deletes


def reachable_by_delete(states, start):
    """Oracle: fixed point of 'is deleted' over delete edges."""
    seen = {start}
    frontier = [start]
    while frontier:
        a, k = frontier.pop()
        for r in states[a].deps_of(k):
            if r.dep_type is DepType.DELETE and r.is_leader_side(a, k):
                nxt = (r.follower_actor, r.follower_key)
                if nxt not in seen:
                    seen.add(nxt)
                    frontier.append(nxt)
    return seen


def test_three_key_delete_cycle_terminates_with_one_delete_per_key():
    reg = FunctionRegistry()
    states = {a: state(a, k=1) for a in (A1, A2, A3)}
    attach(states, delete_dep(A1, key("k"), A2, key("k")))
    attach(states, delete_dep(A2, key("k"), A3, key("k")))
    attach(states, delete_dep(A3, key("k"), A1, key("k")))
    expected = reachable_by_delete(states, (A1, key("k")))
    views, deletes = propagate(states, A1, key("k"), reg)
    assert deletes == 3 == len(expected)
    for a, v in views.items():
        apply_committed(states[a], v.log, tid=1)
    assert all(not s.kv for s in states.values())
    assert all(not s.deps for s in states.values())


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 5)), max_size=12), st.integers(0, 5))
def test_delete_propagation_matches_fixed_point(edges, start):
    reg = FunctionRegistry()
    nodes = [(ActorId("N", i // 2), key(str(i % 2))) for i in range(6)]
    states = {}
    for a, k in nodes:
        states.setdefault(a, ActorState(a)).kv[k] = 1
    seen = set()
    for i, j in edges:
        if i == j or (i, j) in seen:
            continue
        seen.add((i, j))
        (la, lk), (fa, fk) = nodes[i], nodes[j]
        attach(states, delete_dep(la, lk, fa, fk))
    expected = reachable_by_delete(states, nodes[start])
    views, deletes = propagate(states, nodes[start][0], nodes[start][1], reg)
    assert deletes == len(expected)
    for a, v in views.items():
        apply_committed(states[a], v.log, tid=1)
    live = {(a, k) for a, s in states.items() for k in s.kv}
    assert live == set(nodes) - expected
    # referential integrity: no record points at a missing key
    for a, s in states.items():
        for k, r in s.all_records():
            assert r.leader_key in states[r.leader_actor].kv
            assert r.follower_key in states[r.follower_actor].kv


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["put", "delete"]), st.integers(0, 3), st.integers(0, 9)), max_size=10))
def test_resolve_forwards_is_pure(ops):
    s = state(A1, **{str(i): 0 for i in range(4)})
    for i in range(4):
        s.deps[key(str(i))] = [update_dep(A1, key(str(i)), A2, key(str(i))),
                               delete_dep(A1, key(str(i)), A3, key(str(i)))]
    ds = DictionaryState(1, A1, base=s, whole=RW)
    for op, i, v in ops:
        if op == "put":
            ds.put(key(str(i)), v)
        elif ds.get(key(str(i))) is not None:
            ds.delete(key(str(i)))
    first = resolve_forwards(A1, ds, ds.log)
    assert resolve_forwards(A1, ds, list(ds.log)) == first
    # per-target order follows the log
    for target, fwd in first.items():
        assert all(f.target == target for f in fwd)
