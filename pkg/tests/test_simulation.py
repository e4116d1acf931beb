import dataclasses

import numpy as np
import pytest

from minifair import ingest, mf
from minifair.data import Group, GroupMap, Interaction, RatingSet
from minifair.errors import Exhausted
from minifair.simulation import (
    Simulation,
    SimulationConfig,
    SimulationState,
    equal_ratio_filter,
    init_known,
    init_pools,
    run,
    step,
)
from minifair.strategies import GreedyExtendOptions, ScoredList, StrategyContext

from worlds import HAND_QUERIES, HAND_TRACE, tiny_world

P, U = Group.PROTECTED, Group.UNPROTECTED
SMALL_HP = mf.MfHyperParams(n_factors=4, n_epochs=5, seed=0)


def _cfg(**kw):
    kw.setdefault("hyperparams", SMALL_HP)
    kw.setdefault("check_invariants", True)
    return SimulationConfig(**kw)


# -- init ---------------------------------------------------------------------------

def _flat(n):
    return RatingSet(Interaction(k // 50, k % 50, 3.0) for k in range(n))


def test_init_known_size():
    K, X = init_known(_flat(1000), 0.002, seed=1)
    assert len(K) == 2 and len(X) == 998
    assert not ({x.key for x in K} & {x.key for x in X})


def test_init_known_deterministic():
    a, _ = init_known(_flat(1000), 0.01, seed=5)
    b, _ = init_known(_flat(1000), 0.01, seed=5)
    assert a == b


def test_init_known_degenerate_zero():
    K, X = init_known(_flat(100), 0.002, seed=1)
    assert len(K) == 0 and X == _flat(100)


def test_init_known_equal_per_group():
    rs = _flat(1000)
    groups = GroupMap({u: (P if u < 4 else U) for u in range(20)})
    K, _ = init_known(rs, 0.02, seed=3, groups=groups)
    n_p = sum(groups.is_protected(x.user) for x in K)
    assert n_p == len(K) - n_p == 10


def test_init_pools_examples():
    K = RatingSet([Interaction(1, i, 3.0) for i in range(3)] + [Interaction(2, i, 3.0) for i in range(10)])
    pools = init_pools(K, range(10), n_users=3)
    assert pools.size(0) == 10
    assert pools.size(1) == 7
    assert pools.size(2) == 0


# -- step -----------------------------------------------------------------------------

def _fixed_strategy(lists):
    def strategy(u, q, ctx, pool):
        items = [i for i in lists[u] if i in set(pool.tolist())][:q]
        return ScoredList(np.array(items, dtype=np.int64), np.zeros(len(items)))
    return strategy


def _state(X_pairs, n_items=20, n_users=1):
    X = RatingSet(Interaction(u, i, 4.0) for u, i in X_pairs)
    K = RatingSet()
    return SimulationState(K, X, init_pools(K, range(n_items), n_users))


def test_step_partial_answers():
    st = _state([(0, 1), (0, 4), (0, 7), (0, 15)])
    acq = step(st, _fixed_strategy({0: list(range(10))}), StrategyContext(st.known, 20), q=10)
    assert len(acq) == 3 and len(st.known) == 3
    assert st.pools.size(0) == 10
    assert (0, 15) in st.candidate


def test_step_all_answered():
    st = _state([(0, i) for i in range(10)])
    step(st, _fixed_strategy({0: list(range(10))}), StrategyContext(st.known, 20), q=10)
    assert len(st.known) == 10 and len(st.candidate) == 0


def test_step_no_answers():
    st = _state([(0, 19)])
    step(st, _fixed_strategy({0: list(range(10))}), StrategyContext(st.known, 20), q=10)
    assert len(st.known) == 0 and st.pools.size(0) == 10


def test_step_exhausted():
    st = _state([], n_items=0)
    with pytest.raises(Exhausted):
        step(st, _fixed_strategy({0: []}), StrategyContext(st.known, 0), q=1)


# -- equal ratio -------------------------------------------------------------------------

def _acqs(n_p, n_u):
    return [Interaction(0, i, 3.0) for i in range(n_p)] + [Interaction(1, i, 3.0) for i in range(n_u)]


G2 = GroupMap({0: P, 1: U})


def test_equal_ratio_min_rule():
    kept, back = equal_ratio_filter(_acqs(30, 90), G2, seed=1)
    assert sum(x.user == 0 for x in kept) == 30 and sum(x.user == 1 for x in kept) == 30
    assert len(back) == 60 and all(x.user == 1 for x in back)


def test_equal_ratio_identity_when_balanced():
    acqs = _acqs(5, 5)
    kept, back = equal_ratio_filter(acqs, G2, seed=1)
    assert kept == acqs and back == []


def test_equal_ratio_one_group_empty():
    kept, back = equal_ratio_filter(_acqs(0, 12), G2, seed=1)
    assert kept == [] and len(back) == 12


# -- the hand-traced loop ------------------------------------------------------------------

def test_hand_traced_sweeps():
    K, X, T, G = tiny_world()
    sim = Simulation(K, X, T, G, _cfg(strategy="pop", query_size=1))
    for (known, sizes, _, _), queries in zip(HAND_TRACE, HAND_QUERIES):
        before = sim.queried.copy()
        sim.sweep()
        assert {x.key for x in sim.state.known} == known
        assert sim.state.pools.sizes().tolist() == sizes
        assert sorted(sim.queried - before) == queries


def test_hand_traced_run_trace():
    K, X, T, G = tiny_world()
    trace = Simulation(K, X, T, G, _cfg(strategy="pop", query_size=1)).run()
    assert trace.column("iteration").tolist() == [0, 1, 2, 3, 4]
    assert trace.column("n_known").tolist() == [2] + [len(k) for k, *_ in HAND_TRACE]
    assert trace.column("acq_protected").tolist() == [0] + [a for *_, a, _ in HAND_TRACE]
    assert trace.column("acq_unprotected").tolist() == [0] + [b for *_, b in HAND_TRACE]


# -- invariants on a synthetic world -----------------------------------------------------

@pytest.fixture(scope="module")
def world(synth_dir):
    ds = ingest.load_dataset(synth_dir)
    train, test = ingest.split_dataset(ds, ingest.SplitConfig(seed=2))
    return ds, train, test


def _run(world, **kw):
    ds, train, test = world
    kw.setdefault("known_init_fraction", 0.02)
    kw.setdefault("ge", GreedyExtendOptions(pool_size=10, n_factors=2, n_epochs=2, min_val=20))
    sim = Simulation(*init_known(train.copy(), kw["known_init_fraction"], kw.get("seed", 0),
                                 ds.groups if kw.get("equal_ratio") else None),
                     test, ds.groups, _cfg(**kw), ds.n_users, ds.n_items)
    return sim, sim.run()


@pytest.mark.parametrize("strategy", ["random", "pop", "var", "pop-var", "greedy-extend", "random-p",
                                      "max-rating", "min-rating", "mixed-rating", "knn"])
def test_original_ratio_invariants(world, strategy):
    ds, train, test = world
    sim, trace = _run(world, strategy=strategy, query_size=5)
    # check_invariants ran after every sweep (disjointness, conservation, monotone pools)
    assert sim.state.pools.total() == 0
    assert len(sim.state.known) == len(train)
    assert len(sim.queried) == ds.n_users * ds.n_items - len(init_known(train.copy(), 0.02, 0)[0])
    its = trace.column("iteration")
    assert np.all(np.diff(its) > 0) and np.all(np.diff(trace.column("n_known")) >= 0)
    assert its[-1] == sim.state.iteration


def test_no_repeat_queries(world):
    ds, train, test = world
    known, cand = init_known(train.copy(), 0.02, 0)
    sim = Simulation(known, cand, test, ds.groups, _cfg(strategy="random", query_size=7), ds.n_users, ds.n_items)
    seen = set()
    while sim.state.pools.total():
        before = set(sim.queried)
        sim.sweep()
        new = sim.queried - before
        assert not (new & seen)
        seen |= new


def test_equal_ratio_run(world):
    ds, _, _ = world
    sim, trace = _run(world, strategy="pop", query_size=5, equal_ratio=True)
    acq_p, acq_u = trace.column("acq_protected"), trace.column("acq_unprotected")
    assert np.array_equal(acq_p[1:], acq_u[1:])
    assert sim.trace.mode == "equal-ratio"
    # K stays balanced apart from the initial sample
    n_p = sum(ds.groups.is_protected(x.user) for x in sim.state.known)
    assert n_p == len(sim.state.known) - n_p


def test_eval_every_cadence(world):
    _, trace = _run(world, strategy="pop", query_size=5, eval_every=3)
    its = trace.column("iteration").tolist()
    assert its[0] == 0
    assert all(i % 3 == 0 for i in its[:-1])


def test_max_iterations(world):
    _, trace = _run(world, strategy="random", query_size=5, max_iterations=4)
    assert trace.column("iteration").tolist() == [0, 1, 2, 3, 4]


def test_run_is_deterministic(world):
    ds, train, test = world
    cfg = _cfg(strategy="knn", known_init_fraction=0.02, max_iterations=6, seed=3)
    a = run(train.copy(), test, ds.groups, cfg, ds.n_users, ds.n_items)
    b = run(train.copy(), test, ds.groups, cfg, ds.n_users, ds.n_items)
    assert a.points == b.points


def test_same_initial_known_set_across_strategies(world):
    ds, train, test = world
    cfg = _cfg(strategy="random", known_init_fraction=0.02, max_iterations=3, seed=1)
    a = run(train.copy(), test, ds.groups, cfg, ds.n_users, ds.n_items)
    b = run(train.copy(), test, ds.groups, dataclasses.replace(cfg, strategy="knn"), ds.n_users, ds.n_items)
    assert a.points[0] == b.points[0]
    assert a.points[1:] != b.points[1:]


def test_test_set_untouched(world):
    ds, train, test = world
    snapshot = test.sorted_entries()
    for s in ("random", "pop"):
        run(train.copy(), test, ds.groups, _cfg(strategy=s, known_init_fraction=0.02, max_iterations=3),
            ds.n_users, ds.n_items)
    assert test.sorted_entries() == snapshot


def test_empty_initial_known_set(world):
    ds, train, test = world
    sim = Simulation(RatingSet(), train.copy(), test, ds.groups,
                     _cfg(strategy="max-rating", max_iterations=2), ds.n_users, ds.n_items)
    trace = sim.run()
    assert trace.column("iteration").tolist() == [1, 2]


def test_warm_start_flag_runs(world):
    _, trace = _run(world, strategy="pop", query_size=10, max_iterations=3, warm_start=True)
    assert len(trace) == 4


def test_config_validation():
    with pytest.raises(ValueError):
        SimulationConfig(known_init_fraction=0.0)
    with pytest.raises(ValueError):
        SimulationConfig(query_size=0)
    with pytest.raises(ValueError):
        SimulationConfig(strategy="nope")
