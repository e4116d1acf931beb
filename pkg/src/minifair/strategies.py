"""Active-learning acquisition strategies.

Every strategy has the signature ``strategy(u, q, ctx, pool) -> ScoredList``
where ``pool`` holds the item ids not yet queried from user ``u``.  Items are
ranked by descending score, ties broken by ascending item id, and the first
``q`` are returned (fewer when the pool is smaller).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable

import numpy as np
import scipy.sparse as sp

from minifair import mf
from minifair.data import RatingSet
from minifair.errors import EmptyValidationSet, MissingModel


@dataclass(frozen=True)
class ScoredList:
    items: np.ndarray
    scores: np.ndarray

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self):
        return zip(self.items.tolist(), self.scores.tolist())

    def item_list(self) -> list[int]:
        return self.items.tolist()

    @classmethod
    def empty(cls) -> ScoredList:
        return cls(np.empty(0, dtype=np.int64), np.empty(0))


def rank_order(items: np.ndarray, scores: np.ndarray) -> np.ndarray:
    """Indices sorting by score descending, then item id ascending."""
    return np.lexsort((items, -scores))


def top_q(items, scores, q: int) -> ScoredList:
    items = np.asarray(items, dtype=np.int64)
    scores = np.asarray(scores, dtype=np.float64)
    if q < 1 or len(items) == 0:
        return ScoredList.empty()
    if len(items) > 4 * q:
        # argpartition keeps the work near O(n); the boundary may hold ties,
        # so keep every item scoring at least the q-th best before sorting
        kth = np.partition(-scores, q - 1)[q - 1]
        keep = -scores <= kth
        items, scores = items[keep], scores[keep]
    order = rank_order(items, scores)[:q]
    return ScoredList(items[order], scores[order])


@dataclass(frozen=True)
class ItemStats:
    count: np.ndarray
    mean: np.ndarray
    variance: np.ndarray

    @classmethod
    def from_known(cls, known: RatingSet, n_items: int) -> ItemStats:
        _, items, ratings = known.to_arrays()
        count = np.bincount(items, minlength=n_items)[:n_items] if len(items) else np.zeros(n_items, np.int64)
        s1 = np.bincount(items, weights=ratings, minlength=n_items)[:n_items] if len(items) else np.zeros(n_items)
        with np.errstate(invalid="ignore", divide="ignore"):
            mean = np.where(count > 0, s1 / np.maximum(count, 1), 0.0)
        # two-pass variance: exact for small integer samples like [4, 4, 4]
        if len(items):
            dev = ratings - mean[items]
            s2 = np.bincount(items, weights=dev * dev, minlength=n_items)[:n_items]
        else:
            s2 = np.zeros(n_items)
        variance = np.where(count > 1, s2 / np.maximum(count, 1), 0.0)
        return cls(count.astype(np.int64), mean, variance)


@dataclass
class StrategyContext:
    """Per-sweep read-only view handed to every strategy call.

    ``item_stats`` and the item-similarity matrix are snapshots of ``known``
    taken when first accessed; the simulation builds a fresh context for
    each sweep.
    """

    known: RatingSet
    n_items: int
    n_users: int = 0
    model: mf.MfModel | None = None
    rng_seed: int = 0
    iteration: int = 0
    max_rating: float = 5.0
    knn_aggregate: str = "max"
    mixed_start: str = "max"
    candidate: RatingSet | None = None
    global_scores: np.ndarray | None = None

    @cached_property
    def item_stats(self) -> ItemStats:
        return ItemStats.from_known(self.known, self.n_items)

    @cached_property
    def item_similarity(self) -> np.ndarray:
        """Dense item x item cosine similarity of K's rating columns."""
        users, items, ratings = self.known.to_arrays()
        n_users = max(self.n_users, int(users.max()) + 1 if len(users) else 0)
        V = sp.csc_matrix((ratings, (users, items)), shape=(n_users, self.n_items))
        norms = np.sqrt(np.asarray(V.multiply(V).sum(axis=0)).ravel())
        inv = np.divide(1.0, norms, out=np.zeros_like(norms), where=norms > 0)
        Vn = V @ sp.diags(inv)
        return np.asarray((Vn.T @ Vn).todense())


def item_variance(ctx: StrategyContext, item: int) -> float:
    return float(ctx.item_stats.variance[item])


def item_popularity(ctx: StrategyContext, item: int) -> int:
    return int(ctx.item_stats.count[item])


# stream id reserved for the validation draw; never a real user id
_VALIDATION_STREAM = 0xFFFFFFFF


def _user_stream(seed: int, iteration: int, user: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed & (2**64 - 1), iteration, user])))


def select_random(u, q, ctx, pool) -> ScoredList:
    pool = np.asarray(pool, dtype=np.int64)
    scores = _user_stream(ctx.rng_seed, ctx.iteration, u).random(len(pool))
    return top_q(pool, scores, q)


def select_random_personalized(u, q, ctx, pool) -> ScoredList:
    # same mechanics as select_random; only the experiment batch differs
    return select_random(u, q, ctx, pool)


def select_popularity(u, q, ctx, pool) -> ScoredList:
    pool = np.asarray(pool, dtype=np.int64)
    return top_q(pool, ctx.item_stats.count[pool].astype(np.float64), q)


def select_variance(u, q, ctx, pool) -> ScoredList:
    pool = np.asarray(pool, dtype=np.int64)
    return top_q(pool, ctx.item_stats.variance[pool], q)


def pop_var_scores(count: np.ndarray, variance: np.ndarray) -> np.ndarray:
    return np.log1p(count) * variance


def select_pop_var(u, q, ctx, pool) -> ScoredList:
    pool = np.asarray(pool, dtype=np.int64)
    st = ctx.item_stats
    return top_q(pool, pop_var_scores(st.count[pool], st.variance[pool]), q)


def _require_model(ctx) -> mf.MfModel:
    if ctx.model is None:
        raise MissingModel("personalized strategy called without a trained model")
    return ctx.model


def select_max_rating(u, q, ctx, pool) -> ScoredList:
    pool = np.asarray(pool, dtype=np.int64)
    return top_q(pool, _require_model(ctx).predict_user(u, pool), q)


def select_min_rating(u, q, ctx, pool) -> ScoredList:
    pool = np.asarray(pool, dtype=np.int64)
    return top_q(pool, ctx.max_rating - _require_model(ctx).predict_user(u, pool), q)


def select_mixed_rating(u, q, ctx, pool) -> ScoredList:
    """Alternate highest and lowest predictions, skipping repeats.

    Reported scores are the predicted ratings, so unlike the other
    strategies the score column is not monotone.
    """
    pool = np.asarray(pool, dtype=np.int64)
    if q < 1 or len(pool) == 0:
        return ScoredList.empty()
    pred = _require_model(ctx).predict_user(u, pool)
    high = rank_order(pool, pred)
    low = rank_order(pool, ctx.max_rating - pred)
    sides = [high, low] if ctx.mixed_start == "max" else [low, high]
    chosen: list[int] = []
    taken = set()
    cursor = [0, 0]
    turn = 0
    target = min(q, len(pool))
    while len(chosen) < target:
        side = sides[turn]
        while cursor[turn] < len(side) and side[cursor[turn]] in taken:
            cursor[turn] += 1
        if cursor[turn] < len(side):
            j = int(side[cursor[turn]])
            taken.add(j)
            chosen.append(j)
        turn ^= 1
    idx = np.array(chosen, dtype=np.int64)
    return ScoredList(pool[idx], pred[idx])


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb))


def select_knn(u, q, ctx, pool) -> ScoredList:
    pool = np.asarray(pool, dtype=np.int64)
    rated = np.fromiter(ctx.known.user_entries(u).keys(), dtype=np.int64)
    if len(rated) == 0 or len(pool) == 0:
        return top_q(pool, np.zeros(len(pool)), q)
    sims = ctx.item_similarity[np.ix_(pool, rated)]
    scores = sims.max(axis=1) if ctx.knn_aggregate == "max" else sims.mean(axis=1)
    return top_q(pool, scores, q)


@dataclass(frozen=True)
class GreedyExtendOptions:
    pool_size: int = 200
    n_factors: int = 20
    n_epochs: int = 5
    val_fraction: float = 0.1
    min_val: int = 100

    def cheap_hyperparams(self, base: mf.MfHyperParams, seed: int) -> mf.MfHyperParams:
        return mf.MfHyperParams(
            n_factors=self.n_factors,
            learning_rate=base.learning_rate,
            regularization=base.regularization,
            n_epochs=self.n_epochs,
            init_std=base.init_std,
            rating_min=base.rating_min,
            rating_max=base.rating_max,
            seed=seed,
        )


def greedy_validation_split(
    known: RatingSet,
    fallback: RatingSet,
    opts: GreedyExtendOptions,
    seed: int,
    iteration: int,
) -> tuple[RatingSet, RatingSet]:
    """Return ``(fit, val)`` for one Greedy Extend scoring round.

    ``val`` is a fresh ``val_fraction`` sample of ``known`` when that sample
    has at least ``min_val`` ratings; otherwise ``fallback`` (a fixed sample
    of the training split) is used and ``fit`` is ``known`` minus any
    overlap with it.
    """
    entries = known.sorted_entries()
    n_val = int(round(opts.val_fraction * len(entries)))
    if n_val >= opts.min_val:
        rng = _user_stream(seed, iteration, _VALIDATION_STREAM)
        pick = np.zeros(len(entries), dtype=bool)
        pick[rng.choice(len(entries), size=n_val, replace=False)] = True
        fit = RatingSet(x for x, p in zip(entries, pick) if not p)
        val = RatingSet(x for x, p in zip(entries, pick) if p)
        return fit, val
    fit = RatingSet(x for x in entries if x.key not in fallback)
    return fit, fallback


def greedy_extend_scores(
    fit: RatingSet,
    val: RatingSet,
    candidate: RatingSet,
    pool_items,
    hp_cheap: mf.MfHyperParams,
    n_users: int,
    n_items: int,
) -> dict[int, float]:
    """RMSE reduction on ``val`` from adding each pool item's candidate ratings.

    All trainings share ``hp_cheap.seed`` and the same matrix shapes, so an
    item with no candidate ratings scores exactly 0.
    """
    if len(val) == 0:
        raise EmptyValidationSet("greedy extend needs a non-empty validation set")
    base = _rmse_after_training(fit, val, hp_cheap, n_users, n_items)
    scores = {}
    for i in pool_items:
        extra = [x for x in candidate.item_entries(int(i)).values() if x.key not in val]
        if not extra:
            scores[int(i)] = 0.0
            continue
        augmented = fit.copy()
        for x in extra:
            if x.key not in augmented:
                augmented.insert(x)
        scores[int(i)] = base - _rmse_after_training(augmented, val, hp_cheap, n_users, n_items)
    return scores


def _rmse_after_training(fit, val, hp, n_users, n_items) -> float:
    if len(fit) == 0:
        # no baseline model is possible; a constant offset does not change the ranking
        return 0.0
    model = mf.train(fit, hp, n_users=n_users, n_items=n_items)
    return mf.rmse(model, val)


def candidate_popularity_pool(candidate: RatingSet, n_items: int, size: int) -> np.ndarray:
    """The ``size`` items with the most candidate ratings (ties by id)."""
    _, items, _ = candidate.to_arrays()
    counts = np.bincount(items, minlength=n_items)[:n_items].astype(np.float64) if len(items) else np.zeros(n_items)
    ids = np.arange(n_items, dtype=np.int64)
    return top_q(ids, counts, size).items


def select_greedy_extend(q, ctx, pool_items, val, hp_cheap, fit=None) -> ScoredList:
    """Global Greedy Extend ranking over ``pool_items`` (non-personalized)."""
    if ctx.candidate is None:
        raise ValueError("greedy extend needs ctx.candidate")
    fit = ctx.known if fit is None else fit
    scores = greedy_extend_scores(fit, val, ctx.candidate, pool_items, hp_cheap,
                                  max(ctx.n_users, 1), ctx.n_items)
    items = np.fromiter(scores.keys(), dtype=np.int64, count=len(scores))
    vals = np.fromiter(scores.values(), dtype=np.float64, count=len(scores))
    return top_q(items, vals, q)


def greedy_extend_global_scores(ranked: ScoredList, n_items: int) -> np.ndarray:
    """Expand a pool ranking to a full item score vector; unscored items get -inf."""
    out = np.full(n_items, -np.inf)
    out[ranked.items] = ranked.scores
    return out


def select_greedy_extend_user(u, q, ctx, pool) -> ScoredList:
    """Per-user view of the once-per-sweep Greedy Extend ranking.

    Items outside the scored pool carry ``-inf`` and are only returned when
    the user's pool holds fewer than ``q`` scored items.
    """
    if ctx.global_scores is None:
        raise ValueError("greedy extend scores were not precomputed for this sweep")
    pool = np.asarray(pool, dtype=np.int64)
    return top_q(pool, ctx.global_scores[pool], q)


Strategy = Callable[[int, int, StrategyContext, np.ndarray], ScoredList]

STRATEGIES: dict[str, Strategy] = {
    "random": select_random,
    "pop": select_popularity,
    "var": select_variance,
    "pop-var": select_pop_var,
    "greedy-extend": select_greedy_extend_user,
    "random-p": select_random_personalized,
    "max-rating": select_max_rating,
    "min-rating": select_min_rating,
    "mixed-rating": select_mixed_rating,
    "knn": select_knn,
}

PERSONALIZED = frozenset({"random-p", "max-rating", "min-rating", "mixed-rating", "knn"})
MODEL_BASED = frozenset({"random-p", "max-rating", "min-rating", "mixed-rating"})


def get_strategy(name: str) -> Strategy:
    try:
        return STRATEGIES[name]
    except KeyError:
        raise ValueError(f"unknown strategy {name!r}; choose from {sorted(STRATEGIES)}") from None
