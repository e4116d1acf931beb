"""Exit criteria for the build; one reported line per criterion.

Criteria 2-6 need the MovieLens-1M files (set MINIFAIR_ML1M to the directory
holding ratings.dat and users.dat) and are skipped otherwise.
"""
import dataclasses
import json
import time

import numpy as np
import pytest

from minifair import cli, ingest, mf
from minifair.evaluation import rolling_mean
from minifair.simulation import Simulation, SimulationConfig, run

import test_evaluation
import test_ingest
import test_mf
import test_strategies
from worlds import HAND_QUERIES, HAND_TRACE, tiny_world

REF_I0 = {"protected": 1.048, "unprotected": 1.031}
REF_RANDOM_I300 = {"protected": 0.906, "unprotected": 0.864}


@pytest.mark.criterion(1, "simulation loop oracle equivalence on the hand-built world")
def test_c1_algorithm_oracle():
    K, X, T, G = tiny_world()
    cfg = SimulationConfig(strategy="pop", query_size=1, check_invariants=True,
                           hyperparams=mf.MfHyperParams(n_factors=2, n_epochs=5))
    mf.train(K, cfg.hyperparams)  # one-time JIT compilation stays outside the timed region
    t0 = time.perf_counter()
    sim = Simulation(K, X, T, G, cfg)
    for (known, sizes, _, _), queries in zip(HAND_TRACE, HAND_QUERIES):
        before = set(sim.queried)
        sim.sweep()
        assert {x.key for x in sim.state.known} == known
        assert sim.state.pools.sizes().tolist() == sizes
        assert sorted(sim.queried - before) == queries
    assert sim.state.pools.total() == 0

    trace = Simulation(*tiny_world(), cfg).run()
    assert trace.column("iteration").tolist() == [0, 1, 2, 3, 4]  # one evaluation per iteration
    assert trace.column("n_known").tolist() == [2, 4, 6, 7, 7]
    assert time.perf_counter() - t0 < 1.0


# -- MovieLens-1M criteria ------------------------------------------------------------

@pytest.fixture(scope="module")
def ml1m(ml1m_dir):
    ds = ingest.load_dataset(ml1m_dir, "ml-1m", 5)
    train, test = ingest.split_dataset(ds, ingest.SplitConfig(train_fraction=0.8, k_core=5, seed=0))
    print(f"\nML-1M 5-core: {ds.stats}")
    return ds, train, test


_RUNS: dict = {}


def _ml1m_run(data, strategy, mode="original", max_iterations=300, eval_every=50, seed=0):
    key = (strategy, mode, max_iterations, eval_every, seed)
    if key not in _RUNS:
        ds, train, test = data
        cfg = SimulationConfig(strategy=strategy, query_size=10, known_init_fraction=0.002,
                               max_iterations=max_iterations, eval_every=eval_every,
                               equal_ratio=(mode == "equal-ratio"), seed=seed,
                               hyperparams=mf.MfHyperParams(seed=seed))
        _RUNS[key] = run(train.copy(), test, ds.groups, cfg, ds.n_users, ds.n_items)
    return _RUNS[key]


@pytest.mark.slow
@pytest.mark.criterion(2, "cold-start baseline RMSE at iteration 0 on ML-1M")
def test_c2_cold_start_baseline(ml1m):
    t0 = time.perf_counter()
    p0 = _ml1m_run(ml1m, "random", max_iterations=0).at(0)
    print(f"\ni=0: protected {p0.rmse_protected:.4f} unprotected {p0.rmse_unprotected:.4f}")
    for group, value in (("protected", p0.rmse_protected), ("unprotected", p0.rmse_unprotected)):
        assert 1.00 <= value <= 1.10
        assert abs(value - REF_I0[group]) <= 0.05
    assert p0.rmse_protected >= p0.rmse_unprotected
    assert time.perf_counter() - t0 < 300


@pytest.mark.slow
@pytest.mark.criterion(3, "RMSE falls >= 0.10 and rolling curve is mostly non-increasing (25% users)")
def test_c3_minimization_curve(ml1m_dir):
    t0 = time.perf_counter()
    ds = ingest.subsample_users(ingest.load_dataset(ml1m_dir, "ml-1m", 5), 0.25, seed=0)
    train, test = ingest.split_dataset(ds, ingest.SplitConfig(seed=0))
    failures = []
    for strategy in sorted(cli.STRATEGIES):
        cfg = SimulationConfig(strategy=strategy, query_size=10, known_init_fraction=0.002,
                               hyperparams=mf.MfHyperParams(seed=0))
        trace = run(train.copy(), test, ds.groups, cfg, ds.n_users, ds.n_items)
        r = trace.column("rmse_all")
        roll = rolling_mean(r)
        share = float(np.mean(np.diff(roll) <= 0)) if len(roll) > 1 else 0.0
        drop = r[0] - r[-1]
        print(f"\n{strategy}: i0 {r[0]:.4f} final {r[-1]:.4f} drop {drop:.4f} non-increasing {share:.3f}")
        if drop < 0.10 or share < 0.90:
            failures.append(strategy)
    assert not failures, f"strategies failing the curve check: {failures}"
    assert time.perf_counter() - t0 <= 2 * 3600


@pytest.mark.slow
@pytest.mark.criterion(4, "Random i=300 original ratio: gap within 0.03 of 0.042, p < 0.01")
def test_c4_fairness_gap_original(ml1m):
    p = _ml1m_run(ml1m, "random").at(300)
    assert p is not None, "run ended before iteration 300"
    gap = p.rmse_protected - p.rmse_unprotected
    print(f"\ni=300: protected {p.rmse_protected:.4f} unprotected {p.rmse_unprotected:.4f} p={p.p_value:.3g}")
    assert gap > 0
    assert abs(gap - (REF_RANDOM_I300["protected"] - REF_RANDOM_I300["unprotected"])) <= 0.03
    assert p.p_value < 0.01


@pytest.mark.slow
@pytest.mark.criterion(5, "Random equal ratio: protected RMSE below unprotected at the final checkpoint")
def test_c5_gap_reversal_equal_ratio(ml1m):
    trace = _ml1m_run(ml1m, "random", mode="equal-ratio")
    last = trace.at(300) or trace.points[-1]
    print(f"\ni={last.iteration}: protected {last.rmse_protected:.4f} unprotected {last.rmse_unprotected:.4f}")
    assert last.rmse_protected < last.rmse_unprotected


@pytest.mark.slow
@pytest.mark.criterion(6, "i=50 original: Greedy Extend unprotected RMSE >= 0.02 below Variance")
def test_c6_greedy_extend_beats_variance(ml1m):
    ge = _ml1m_run(ml1m, "greedy-extend", max_iterations=50).at(50)
    var = _ml1m_run(ml1m, "var", max_iterations=50).at(50)
    assert ge is not None and var is not None, "run ended before iteration 50"
    print(f"\ni=50 unprotected: GE {ge.rmse_unprotected:.4f} Var {var.rmse_unprotected:.4f}")
    assert var.rmse_unprotected - ge.rmse_unprotected >= 0.02


# -- always runnable ------------------------------------------------------------------------

@pytest.mark.criterion(7, "property suite (split, k-core, strategies, SGD gradient, RMSE identity, Welch)")
def test_c7_property_suite():
    # split partition and determinism
    test_ingest.test_split_partition_property()
    test_ingest.test_split_is_deterministic()
    # k-core fixpoint against brute force on 3 users x 3 items
    test_ingest.test_k_core_matches_brute_force_on_6_nodes()
    # L subset of pool, bounded, unique; 1000 randomized cases
    test_strategies.test_selection_is_subset_bounded_unique_and_deterministic()
    # SGD step vs central finite differences at 1e-6 relative
    for seed in range(5):
        test_mf.test_sgd_step_matches_finite_difference_gradient(seed)
    test_evaluation.test_rmse_decomposition_identity()
    test_evaluation.test_welch_antisymmetry()
    from minifair.evaluation import welch_t_test
    t, p = welch_t_test([1, 2, 3, 4, 5], [2, 3, 4, 5, 6])
    assert abs(t - (-1.0)) <= 1e-3 and abs(p - 0.3466) <= 1e-3


@pytest.mark.criterion(8, "end-to-end determinism: identical configs give byte-identical trace CSVs")
def test_c8_end_to_end_determinism(tmp_path, synth_dir):
    cfg = {
        "dataset_path": str(synth_dir),
        "strategies": ["random", "greedy-extend", "mixed-rating", "knn"],
        "modes": ["original", "equal-ratio"],
        "seeds": [11],
        "sim": {"known_init_fraction": 0.02, "hyperparams": {"n_factors": 8, "n_epochs": 5},
                "ge": {"pool_size": 10, "n_factors": 2, "n_epochs": 2, "min_val": 20}},
    }
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    for out in ("a", "b"):
        assert cli.main(["--config", str(path), "--out", str(tmp_path / out)]) == 0
    files = sorted(p.name for p in (tmp_path / "a").glob("*.csv"))
    assert len(files) == 4 * 2 + 2
    for name in files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
