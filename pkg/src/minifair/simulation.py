"""The acquire / retrain / evaluate loop and its equal-ratio variant.

Starting from a small known set K sampled out of the training split X, every
sweep asks each user with a non-empty pool for up to ``q`` items chosen by
the strategy.  Ratings that exist in X move into K; every queried item leaves
the user's pool whether or not it was answered.  The model is retrained on K
after each sweep and scored on the fixed test set, per group.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from minifair import mf
from minifair.data import CandidatePool, Group, GroupMap, Interaction, RatingSet, group_partition
from minifair.errors import Exhausted
from minifair.evaluation import SimulationTrace, TracePoint, group_report
from minifair.strategies import (
    MODEL_BASED,
    PERSONALIZED,
    GreedyExtendOptions,
    StrategyContext,
    candidate_popularity_pool,
    get_strategy,
    greedy_extend_global_scores,
    greedy_validation_split,
    select_greedy_extend,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SimulationConfig:
    strategy: str = "random"
    query_size: int = 10
    known_init_fraction: float = 0.002
    max_iterations: int | None = None
    eval_every: int = 1
    equal_ratio: bool = False
    seed: int = 0
    hyperparams: mf.MfHyperParams = field(default_factory=mf.MfHyperParams)
    ge: GreedyExtendOptions = field(default_factory=GreedyExtendOptions)
    knn_aggregate: str = "max"
    mixed_start: str = "max"
    warm_start: bool = False
    ttest_unit: str = "rating"
    check_invariants: bool = False

    def __post_init__(self):
        if not 0.0 < self.known_init_fraction < 1.0:
            raise ValueError("known_init_fraction must lie in (0, 1)")
        if self.query_size < 1:
            raise ValueError("query_size must be >= 1")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        if self.max_iterations is not None and self.max_iterations < 0:
            raise ValueError("max_iterations must be >= 0")
        get_strategy(self.strategy)

    @property
    def mode(self) -> str:
        return "equal-ratio" if self.equal_ratio else "original"


@dataclass
class SimulationState:
    known: RatingSet
    candidate: RatingSet
    pools: CandidatePool
    iteration: int = 0


def _rng(*keys: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([k & (2**64 - 1) for k in keys])))


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def init_known(
    candidate: RatingSet, fraction: float, seed: int, groups: GroupMap | None = None
) -> tuple[RatingSet, RatingSet]:
    """Sample ``round(fraction * |X|)`` ratings of X into a new known set.

    With ``groups`` the sample is split evenly between the two groups
    (``n // 2`` each, capped by what each group has).
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie in (0, 1)")
    entries = candidate.sorted_entries()
    n_known = _round_half_up(fraction * len(entries))
    rng = _rng(seed, 0x1417)
    if groups is None:
        picked = rng.choice(len(entries), size=n_known, replace=False) if n_known else []
    else:
        is_p = np.array([groups.is_protected(x.user) for x in entries], dtype=bool)
        per_group = n_known // 2
        picked = []
        for mask in (is_p, ~is_p):
            idx = np.flatnonzero(mask)
            take = min(per_group, len(idx))
            if take:
                picked.extend(rng.choice(idx, size=take, replace=False).tolist())
    chosen = np.zeros(len(entries), dtype=bool)
    chosen[np.asarray(picked, dtype=np.int64)] = True
    known = RatingSet(x for x, c in zip(entries, chosen) if c)
    rest = RatingSet(x for x, c in zip(entries, chosen) if not c)
    return known, rest


def init_pools(known: RatingSet, all_items, n_users: int) -> CandidatePool:
    """Every user's pool is every item they have no known rating for."""
    all_items = np.asarray(sorted(all_items), dtype=np.int64)
    n_items = int(all_items.max()) + 1 if len(all_items) else 0
    pools = CandidatePool(n_users, n_items)
    pools.mask[:, all_items] = True
    for x in known:
        pools.mask[x.user, x.item] = False
    return pools


def step(
    state: SimulationState,
    strategy: Callable,
    ctx: StrategyContext,
    q: int,
    queried: set | None = None,
) -> list[Interaction]:
    """One sweep over users (ascending id) with a non-empty pool."""
    users = state.pools.nonempty_users()
    if len(users) == 0:
        raise Exhausted("every candidate pool is empty")
    acquisitions = []
    for u in users.tolist():
        pool = state.pools.items(u)
        chosen = strategy(u, q, ctx, pool).item_list()
        for i in chosen:
            if queried is not None:
                queried.add((u, i))
            if (u, i) in state.candidate:
                x = state.candidate.remove(u, i)
                state.known.insert(x)
                acquisitions.append(x)
        state.pools.discard(u, chosen)
    return acquisitions


def equal_ratio_filter(
    acquisitions: list[Interaction], groups: GroupMap, seed: int
) -> tuple[list[Interaction], list[Interaction]]:
    """Subsample the majority group's acquisitions down to the minority count.

    Returns ``(kept, returned)``; both keep the input order.
    """
    is_p = np.array([groups.is_protected(x.user) for x in acquisitions], dtype=bool)
    idx_p, idx_u = np.flatnonzero(is_p), np.flatnonzero(~is_p)
    target = min(len(idx_p), len(idx_u))
    keep = np.zeros(len(acquisitions), dtype=bool)
    rng = _rng(seed)
    for idx in (idx_p, idx_u):
        if len(idx) > target:
            idx = rng.choice(idx, size=target, replace=False)
        keep[idx] = True
    kept = [x for x, k in zip(acquisitions, keep) if k]
    returned = [x for x, k in zip(acquisitions, keep) if not k]
    return kept, returned


def _return_to_candidates(state: SimulationState, returned: list[Interaction]) -> None:
    for x in returned:
        state.known.remove(x.user, x.item)
        state.candidate.insert(x)
        state.pools.mask[x.user, x.item] = True


class Simulation:
    """Runs the loop for one strategy from an explicit ``(K, X, T)`` state.

    Points are appended to ``self.trace`` as they are produced, so a caller
    that catches an exception still holds the partial trace.
    """

    def __init__(
        self,
        known: RatingSet,
        candidate: RatingSet,
        test: RatingSet,
        groups: GroupMap,
        cfg: SimulationConfig,
        n_users: int | None = None,
        n_items: int | None = None,
        trace: SimulationTrace | None = None,
        progress: Callable[[TracePoint], None] | None = None,
    ):
        self.cfg = cfg
        self.groups = groups
        self.test = test
        self.test_protected, self.test_unprotected = group_partition(test, groups)
        everything = [known, candidate, test]
        self.n_users = n_users or 1 + max(max(rs.users(), default=-1) for rs in everything)
        self.n_items = n_items or 1 + max(max(rs.items(), default=-1) for rs in everything)
        pools = init_pools(known, range(self.n_items), self.n_users)
        self.state = SimulationState(known, candidate, pools)
        self.strategy = get_strategy(cfg.strategy)
        self.trace = trace if trace is not None else SimulationTrace()
        self.trace.strategy, self.trace.mode, self.trace.seed = cfg.strategy, cfg.mode, cfg.seed
        self.progress = progress
        self.model: mf.MfModel | None = None
        self.queried: set | None = set() if cfg.check_invariants else None
        self._window_acq = {Group.PROTECTED: 0, Group.UNPROTECTED: 0}
        self._conserved = len(known) + len(candidate)
        self._ge_fallback: RatingSet | None = None

    # -- model and evaluation -------------------------------------------------
    def _train(self) -> None:
        if len(self.state.known) == 0:
            self.model = None
            return
        warm = self.model if self.cfg.warm_start else None
        self.model = mf.train(self.state.known, self.cfg.hyperparams, self.n_users, self.n_items, warm_start=warm)

    def _evaluate(self) -> None:
        if self.model is None:
            return
        report = group_report(self.model, self.test_protected, self.test_unprotected, unit=self.cfg.ttest_unit)
        point = TracePoint(
            iteration=self.state.iteration,
            n_known=len(self.state.known),
            acq_protected=self._window_acq[Group.PROTECTED],
            acq_unprotected=self._window_acq[Group.UNPROTECTED],
            rmse_all=mf.rmse(self.model, self.test),
            rmse_protected=report.rmse_protected,
            rmse_unprotected=report.rmse_unprotected,
            rmse_diff=report.rmse_diff,
            t_stat=report.t_statistic,
            p_value=report.p_value,
        )
        self.trace.append(point)
        self._window_acq = {Group.PROTECTED: 0, Group.UNPROTECTED: 0}
        if self.progress is not None:
            self.progress(point)

    def _eval_due(self) -> bool:
        return self.state.iteration % self.cfg.eval_every == 0

    # -- one sweep -------------------------------------------------------------
    def _context(self) -> StrategyContext:
        cfg = self.cfg
        model = None
        if cfg.strategy in PERSONALIZED:
            model = self.model
            if model is None and cfg.strategy in MODEL_BASED:
                model = _constant_model(self.n_users, self.n_items, cfg.hyperparams)
        ctx = StrategyContext(
            known=self.state.known,
            n_items=self.n_items,
            n_users=self.n_users,
            model=model,
            rng_seed=cfg.seed,
            iteration=self.state.iteration,
            max_rating=cfg.hyperparams.rating_max,
            knn_aggregate=cfg.knn_aggregate,
            mixed_start=cfg.mixed_start,
            candidate=self.state.candidate,
        )
        # snapshot statistics before any user of this sweep answers
        _ = ctx.item_stats
        if cfg.strategy == "knn":
            _ = ctx.item_similarity
        if cfg.strategy == "greedy-extend":
            ctx.global_scores = self._greedy_scores(ctx)
        return ctx

    def _greedy_scores(self, ctx: StrategyContext) -> np.ndarray:
        opts = self.cfg.ge
        if self._ge_fallback is None:
            split = sorted([*self.state.known, *self.state.candidate], key=lambda x: x.key)
            size = min(opts.min_val, len(split))
            pick = _rng(self.cfg.seed, 0x6E).choice(len(split), size=size, replace=False)
            self._ge_fallback = RatingSet(split[j] for j in sorted(pick.tolist()))
        fit, val = greedy_validation_split(self.state.known, self._ge_fallback, opts,
                                           self.cfg.seed, self.state.iteration)
        pool_items = candidate_popularity_pool(self.state.candidate, self.n_items, opts.pool_size)
        seed = int(_rng(self.cfg.seed, self.state.iteration, 0x6E).integers(2**63))
        hp = opts.cheap_hyperparams(self.cfg.hyperparams, seed)
        ranked = select_greedy_extend(len(pool_items), ctx, pool_items, val, hp, fit=fit)
        return greedy_extend_global_scores(ranked, self.n_items)

    def sweep(self) -> list[Interaction]:
        """Query every user once, then apply the equal-ratio filter if enabled."""
        cfg = self.cfg
        ctx = self._context()
        before_pools = self.state.pools.sizes() if cfg.check_invariants else None
        acq = step(self.state, self.strategy, ctx, cfg.query_size, self.queried)
        if cfg.equal_ratio:
            filter_seed = int(_rng(cfg.seed, self.state.iteration, 0xE9).integers(2**63))
            acq, returned = equal_ratio_filter(acq, self.groups, filter_seed)
            _return_to_candidates(self.state, returned)
            if self.queried is not None:
                self.queried.difference_update((x.user, x.item) for x in returned)
        for x in acq:
            self._window_acq[self.groups.group_of(x.user)] += 1
        self.state.iteration += 1
        if cfg.check_invariants:
            self.check_invariants(before_pools)
        return acq

    def check_invariants(self, before_pools: np.ndarray | None = None) -> None:
        st = self.state
        for x in st.known:
            assert x.key not in st.candidate, f"{x.key} in both K and X"
            assert x.key not in self.test, f"{x.key} in both K and T"
        for x in st.candidate:
            assert x.key not in self.test, f"{x.key} in both X and T"
        assert len(st.known) + len(st.candidate) == self._conserved, "K + X size changed"
        if before_pools is not None and not self.cfg.equal_ratio:
            assert np.all(st.pools.sizes() <= before_pools), "a candidate pool grew"

    # -- driver ------------------------------------------------------------------
    def _needs_model_next(self) -> bool:
        return self.cfg.strategy in PERSONALIZED

    def run(self) -> SimulationTrace:
        cfg = self.cfg
        self._train()
        self._evaluate()
        last_eval = 0
        while self.state.pools.total() > 0:
            if cfg.max_iterations is not None and self.state.iteration >= cfg.max_iterations:
                break
            k_before, pools_before = len(self.state.known), self.state.pools.total()
            self.sweep()
            stalled = len(self.state.known) == k_before and self.state.pools.total() == pools_before
            finished = (self.state.pools.total() == 0 or stalled
                        or (cfg.max_iterations is not None and self.state.iteration >= cfg.max_iterations))
            due = self._eval_due() or finished
            if cfg.warm_start or due or self._needs_model_next():
                self._train()
            if due:
                self._evaluate()
                last_eval = self.state.iteration
            if stalled:
                log.info("no progress in sweep %d; stopping", self.state.iteration)
                break
        if self.model is not None and last_eval != self.state.iteration:
            self._evaluate()
        return self.trace


def _constant_model(n_users: int, n_items: int, hp: mf.MfHyperParams) -> mf.MfModel:
    mid = 0.5 * (hp.rating_min + hp.rating_max)
    return mf.MfModel(mid, np.zeros(n_users), np.zeros(n_items),
                      np.zeros((n_users, hp.n_factors)), np.zeros((n_items, hp.n_factors)), hp)


def run(
    train: RatingSet,
    test: RatingSet,
    groups: GroupMap,
    cfg: SimulationConfig,
    n_users: int | None = None,
    n_items: int | None = None,
    trace: SimulationTrace | None = None,
    progress: Callable[[TracePoint], None] | None = None,
) -> SimulationTrace:
    """Sample the initial known set from ``train`` and run the loop to the end."""
    known, candidate = init_known(train, cfg.known_init_fraction, cfg.seed,
                                  groups if cfg.equal_ratio else None)
    sim = Simulation(known, candidate, test, groups, cfg, n_users, n_items, trace, progress)
    return sim.run()
