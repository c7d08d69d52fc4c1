import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparse3d.analysis import FiberLambda, LambdaInfo
from sparse3d.ownership import OwnerMap, assign_owners_serial
from sparse3d.plan import (
    BROADCAST,
    REDUCE,
    CommGraph,
    DenseRowStore,
    PlanError,
    build_postcomm_spmm,
    build_precomm_cols,
    build_precomm_rows,
    build_rank_graph,
    coalesce,
    compile_plan,
    dump_plans,
    execute,
)

from .conftest import run_world


def fiber(mask, lo=0):
    mask = np.asarray(mask, dtype=bool)
    return FiberLambda(lo, lo + mask.shape[0], mask)


def owners_of(f, seed=0):
    return assign_owners_serial(f.need_lists(), seed, (f.lo, f.hi))


def fixed_owners(lo, owner):
    owner = np.asarray(owner)
    return OwnerMap(lo, owner, np.ones(len(owner), bool))


# -- graph construction ----------------------------------------------------------


def test_no_sharing_empty_graph():
    # [TRIVIAL]
    f = fiber(np.eye(3))
    lam = LambdaInfo([f], [f])
    assert build_precomm_rows(lam, owners_of(f), 0).messages == {}
    assert build_precomm_cols(lam, owners_of(f), 0).messages == {}


def test_three_way_broadcast():
    # [DERIVED]
    # id 4 used by ranks 0, 1, 2 and owned by 1
    f = fiber([[1, 1, 1]], lo=4)
    g = build_precomm_rows(LambdaInfo([f], []), fixed_owners(4, [1]), 0)
    assert {k: v.tolist() for k, v in g.messages.items()} == {(1, 0): [4], (1, 2): [4]}
    g = build_precomm_cols(LambdaInfo([], [f]), fixed_owners(4, [1]), 0)
    assert set(g.messages) == {(1, 0), (1, 2)}


def test_reduce_to_owner():
    # [DERIVED]
    f = fiber([[1, 1]])
    g = build_postcomm_spmm(LambdaInfo([f], []), fixed_owners(0, [0]), 0)
    assert g.kind == REDUCE
    assert {k: v.tolist() for k, v in g.messages.items()} == {(1, 0): [0]}
    single = fiber(np.ones((5, 1)))
    assert build_postcomm_spmm(LambdaInfo([single], []), owners_of(single), 0).messages == {}


def test_owner_outside_lambda_rejected():
    # [TRIVIAL]
    f = fiber([[1, 0, 1]])
    with pytest.raises(PlanError):
        build_precomm_rows(LambdaInfo([f], []), fixed_owners(0, [1]), 0)


@st.composite
def fibers(draw):
    n = draw(st.integers(1, 5))
    m = draw(st.integers(1, 30))
    bits = draw(st.lists(st.booleans(), min_size=n * m, max_size=n * m))
    return fiber(np.array(bits).reshape(m, n), lo=draw(st.integers(0, 100))), draw(st.integers(0, 2**32))


@settings(max_examples=60)
@given(fibers())
def test_graph_identities(case):
    # [DERIVED]
    f, seed = case
    own = owners_of(f, seed)
    lam = LambdaInfo([f], [f])
    g = build_precomm_rows(lam, own, 0)
    g.validate()
    lam_i = f.lam
    assert g.total_ids() == int(np.sum(np.maximum(lam_i - 1, 0)))
    red = build_postcomm_spmm(lam, own, 0)
    red.validate()
    assert red.triples() == {(d, s, i) for s, d, i in g.triples()}
    # every receiver gets each needed, non-owned id exactly once
    for r in range(f.mask.shape[1]):
        inc = g.incoming(r)
        got = np.sort(np.concatenate(list(inc.values()))) if inc else np.zeros(0, int)
        want = f.lo + np.flatnonzero(f.mask[:, r] & (own.owner != r))
        assert np.array_equal(got, want)


def test_validate_catches_bad_graphs():
    # [TRIVIAL]
    with pytest.raises(PlanError):
        CommGraph(BROADCAST, 2, {(0, 0): np.array([1])}).validate()
    with pytest.raises(PlanError):
        CommGraph(BROADCAST, 2, {(0, 1): np.array([], dtype=int)}).validate()
    with pytest.raises(PlanError):
        CommGraph(BROADCAST, 3, {(0, 2): np.array([1]), (1, 2): np.array([1])}).validate()
    with pytest.raises(PlanError):
        CommGraph(REDUCE, 3, {(0, 1): np.array([5]), (0, 2): np.array([5])}).validate()


def _rank_graph(comm, f, own):
    used = f.lo + np.flatnonzero(f.mask[:, comm.rank])
    return build_rank_graph(comm, used, own)


@settings(max_examples=15, deadline=None)
@given(fibers())
def test_rank_graph_matches_global(case):
    # [DERIVED]
    f, seed = case
    own = owners_of(f, seed)
    g = build_precomm_rows(LambdaInfo([f], []), own, 0)
    per_rank = run_world(f.mask.shape[1], _rank_graph, f, own)
    for r, rg in enumerate(per_rank):
        assert rg.triples() == g.restricted(r).triples()


# -- store and plans --------------------------------------------------------------


def test_coalesce_maximal():
    # [DERIVED]
    assert coalesce([3, 4, 5, 9, 10, 2], 2).tolist() == [[6, 6], [18, 4], [4, 2]]
    assert coalesce([], 4).shape == (0, 2)


def test_nb_single_descriptor_for_contiguous_ids():
    # [DERIVED]
    store = DenseRowStore(np.arange(5, 12), 4)
    g = CommGraph(BROADCAST, 2, {(0, 1): np.array([7, 8, 9])})
    plan = compile_plan(g, store, "nb", 0)
    assert plan.sends[0].descriptors.tolist() == [[store.offset(7), 12]]


def test_nb_same_id_two_peers():
    # [DERIVED]
    store = DenseRowStore(np.arange(10), 2)
    g = CommGraph(BROADCAST, 3, {(0, 1): np.array([4]), (0, 2): np.array([4])})
    plan = compile_plan(g, store, "nb", 0)
    d = [s.descriptors.tolist() for s in plan.sends]
    assert d == [[[8, 2]], [[8, 2]]]


def test_bb_buffer_words():
    # [DERIVED]
    store = DenseRowStore(np.arange(10), 3)
    g = CommGraph(BROADCAST, 3, {(0, 1): np.array([1, 5]), (0, 2): np.array([2, 3, 9])})
    plan = compile_plan(g, store, "bb", 0)
    assert [s.nids * plan.width for s in plan.sends] == [6, 9]
    assert plan.expected_copy_words() == 15


def test_store_lookup_and_relayout():
    # [TRIVIAL]
    store = DenseRowStore([9, 2, 5], 2)
    store.words[:] = [[9, 9], [2, 2], [5, 5]]
    assert store.slots([5, 9]).tolist() == [2, 0]
    assert 5 in store and 4 not in store
    with pytest.raises(KeyError):
        store.slots([4])
    before = store.snapshot()
    fp = store.fingerprint()
    store.relayout([2, 5, 9], "rb")
    assert store.ids.tolist() == [2, 5, 9]
    assert {k: v.tolist() for k, v in store.snapshot().items()} == {k: v.tolist() for k, v in before.items()}
    assert store.fingerprint() != fp
    offs = sorted(store.directory().values())
    assert offs == [(0, 2), (2, 2), (4, 2)]
    with pytest.raises(PlanError):
        store.relayout([2, 5], "rb")


def test_stale_plan_rejected():
    # [TRIVIAL]
    store = DenseRowStore(np.arange(4), 1)
    plan = compile_plan(CommGraph(BROADCAST, 1, {}), store, "nb", 0)
    store.relayout([3, 2, 1, 0], "other")
    with pytest.raises(PlanError):
        execute(plan, store, comm=None)


def value(gid, width, salt=0.0):
    return gid * 10.0 + np.arange(width) + salt


def _fiber_round(comm, f, own, strategy, kind, width):
    """One broadcast or reduce round on a fiber; returns (snapshot, counters)."""
    r = comm.rank
    used = f.lo + np.flatnonzero(f.mask[:, r])
    mine = own.owned_by(r)
    store = DenseRowStore(np.union1d(used, mine), width)
    g = build_rank_graph(comm, used, own)
    if kind == REDUCE:
        g = g.transpose()
        # every user holds a partial for each of its used ids
        store.words[store.slots(used)] = np.array([value(i, width, salt=r / 8) for i in used]).reshape(-1, width)
    else:
        store.words[store.slots(mine)] = np.array([value(i, width) for i in mine]).reshape(-1, width)
    plan = compile_plan(g, store, strategy, r)
    comm.set_phase("precomm")
    execute(plan, store, comm, tag=5)
    c = comm.world.counters(comm.world_rank, "precomm")
    return store.snapshot(), (c.recv_words, c.send_words, c.copy_words), plan


@pytest.mark.parametrize("kind", [BROADCAST, REDUCE])
@settings(max_examples=12, deadline=None)
@given(case=fibers(), width=st.integers(1, 3))
def test_strategy_equivalence_and_copy_honesty(kind, case, width):
    # [DERIVED]
    f, seed = case
    own = owners_of(f, seed)
    n = f.mask.shape[1]
    results = {s: run_world(n, _fiber_round, f, own, s, kind, width) for s in ("bb", "rb", "nb")}
    for r in range(n):
        snaps = [results[s][r][0] for s in ("bb", "rb", "nb")]
        assert all(a.keys() == snaps[0].keys() for a in snaps)
        for gid in snaps[0]:
            assert all(np.array_equal(s[gid], snaps[0][gid]) for s in snaps)
        recv, send = results["bb"][r][1][:2]
        assert all(results[s][r][1][:2] == (recv, send) for s in ("rb", "nb"))
        assert results["bb"][r][1][2] == recv + send
        assert results["nb"][r][1][2] == 0
        # rb keeps a buffer only on the side that may see an id more than once
        assert results["rb"][r][1][2] == (send if kind == BROADCAST else recv)
        for s in ("bb", "rb", "nb"):
            for side in results[s][r][2].sends + results[s][r][2].recvs:
                d = side.descriptors
                assert np.all(d[1:, 0] != d[:-1, 0] + d[:-1, 1])
                assert d[:, 1].sum() == side.nids * width
    # content oracle
    for r in range(n):
        snap = results["nb"][r][0]
        used = f.lo + np.flatnonzero(f.mask[:, r])
        if kind == BROADCAST:
            for gid in used:
                assert np.array_equal(snap[int(gid)], value(gid, width))
        else:
            for gid in own.owned_by(r):
                users = np.flatnonzero(f.mask[gid - f.lo])
                if len(users) == 0:
                    continue
                order = [r] + [u for u in users if u != r]
                acc = None
                for u in order:
                    part = value(gid, width, salt=u / 8)
                    acc = part.copy() if acc is None else acc + part
                assert np.array_equal(snap[int(gid)], acc)


def test_dump_plans_schema(tmp_path):
    # [TRIVIAL]
    store = DenseRowStore(np.arange(6), 2)
    g = CommGraph(BROADCAST, 2, {(0, 1): np.array([1, 2, 4])})
    plan = compile_plan(g, store, "nb", 0)
    path = tmp_path / "plans.json"
    dump_plans([plan], path)
    doc = json.loads(path.read_text())
    assert doc["schema"] == "sparse3d.plans/1"
    p = doc["plans"][0]
    assert p["strategy"] == "nb" and p["width"] == 2
    assert p["layout"] == "ascending" and p["store_ids"] == list(range(6))
    assert p["sends"][0] == {"peer": 1, "mode": "descriptors", "ids": [1, 2, 4], "descriptors": [[2, 4], [8, 2]]}
