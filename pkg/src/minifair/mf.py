"""Biased matrix factorization (Funk SVD) trained with plain SGD.

Prediction is ``mu + b_u + b_i + q_i . p_u``, clamped to the rating range at
inference time only.  Training visits ratings in a per-epoch shuffled order
drawn from ``hp.seed`` and is bitwise reproducible.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit

from minifair.data import RatingSet
from minifair.errors import EmptyTestSet, EmptyTrainingSet


@dataclass(frozen=True)
class MfHyperParams:
    n_factors: int = 100
    learning_rate: float = 0.005
    regularization: float = 0.1
    n_epochs: int = 20
    init_std: float = 0.1
    rating_min: float = 1.0
    rating_max: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.n_factors < 1:
            raise ValueError("n_factors must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.regularization < 0:
            raise ValueError("regularization must be >= 0")
        if self.n_epochs < 1:
            raise ValueError("n_epochs must be >= 1")
        if not self.rating_min < self.rating_max:
            raise ValueError("rating_min must be < rating_max")


@njit(cache=True)
def sgd_update(u, i, r, mu, bu, bi, P, Q, lr, reg):
    """One SGD step on a single rating; returns the pre-update error."""
    n_factors = P.shape[1]
    dot = 0.0
    for f in range(n_factors):
        dot += Q[i, f] * P[u, f]
    err = r - (mu + bu[u] + bi[i] + dot)
    bu[u] += lr * (err - reg * bu[u])
    bi[i] += lr * (err - reg * bi[i])
    for f in range(n_factors):
        puf = P[u, f]
        qif = Q[i, f]
        P[u, f] += lr * (err * qif - reg * puf)
        Q[i, f] += lr * (err * puf - reg * qif)
    return err


@njit(cache=True)
def _sgd_epoch(users, items, ratings, order, mu, bu, bi, P, Q, lr, reg):
    sq = 0.0
    for k in range(order.shape[0]):
        j = order[k]
        err = sgd_update(users[j], items[j], ratings[j], mu, bu, bi, P, Q, lr, reg)
        sq += err * err
    return sq


@njit(cache=True)
def _predict_raw(users, items, mu, bu, bi, P, Q):
    n = users.shape[0]
    out = np.empty(n)
    n_users = bu.shape[0]
    n_items = bi.shape[0]
    n_factors = P.shape[1]
    for k in range(n):
        u = users[k]
        i = items[k]
        est = mu
        u_ok = 0 <= u < n_users
        i_ok = 0 <= i < n_items
        if u_ok:
            est += bu[u]
        if i_ok:
            est += bi[i]
        if u_ok and i_ok:
            for f in range(n_factors):
                est += Q[i, f] * P[u, f]
        out[k] = est
    return out


@dataclass
class MfModel:
    mu: float
    bu: np.ndarray
    bi: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    hp: MfHyperParams = field(default_factory=MfHyperParams)
    epoch_rmse: list[float] = field(default_factory=list)

    @property
    def n_users(self) -> int:
        return self.bu.shape[0]

    @property
    def n_items(self) -> int:
        return self.bi.shape[0]

    def predict_many(self, users, items) -> np.ndarray:
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        raw = _predict_raw(users, items, self.mu, self.bu, self.bi, self.P, self.Q)
        return np.clip(raw, self.hp.rating_min, self.hp.rating_max)

    def predict_user(self, user: int, items) -> np.ndarray:
        """Clamped predictions of one user for an array of items."""
        items = np.asarray(items, dtype=np.int64)
        return self.predict_many(np.full(items.shape, user, dtype=np.int64), items)

    def predict(self, user: int, item: int) -> float:
        return float(self.predict_many([user], [item])[0])


def predict(m: MfModel, user: int, item: int) -> float:
    return m.predict(user, item)


def train(
    known: RatingSet,
    hp: MfHyperParams,
    n_users: int | None = None,
    n_items: int | None = None,
    warm_start: MfModel | None = None,
) -> MfModel:
    """Fit biases and factors on ``known``.

    Factor rows of users/items absent from ``known`` are zeroed afterwards so
    unseen ids predict ``mu`` plus whichever bias is known.
    """
    if len(known) == 0:
        raise EmptyTrainingSet("cannot train on an empty rating set")
    users, items, ratings = known.to_arrays()
    n_users = max(n_users or 0, int(users.max()) + 1)
    n_items = max(n_items or 0, int(items.max()) + 1)
    rng = np.random.default_rng(hp.seed)
    mu = float(ratings.mean())
    if warm_start is None:
        bu = np.zeros(n_users)
        bi = np.zeros(n_items)
        P = rng.normal(0.0, hp.init_std, (n_users, hp.n_factors))
        Q = rng.normal(0.0, hp.init_std, (n_items, hp.n_factors))
    else:
        bu, bi, P, Q = _resize_from(warm_start, n_users, n_items, hp, rng)

    n = len(ratings)
    history = []
    for _ in range(hp.n_epochs):
        order = rng.permutation(n)
        sq = _sgd_epoch(users, items, ratings, order, mu, bu, bi, P, Q,
                        hp.learning_rate, hp.regularization)
        history.append(float(np.sqrt(sq / n)))

    seen_u = np.zeros(n_users, dtype=bool)
    seen_u[users] = True
    seen_i = np.zeros(n_items, dtype=bool)
    seen_i[items] = True
    P[~seen_u] = 0.0
    Q[~seen_i] = 0.0
    return MfModel(mu, bu, bi, P, Q, hp, history)


def _resize_from(m: MfModel, n_users, n_items, hp, rng):
    bu = np.zeros(n_users)
    bi = np.zeros(n_items)
    P = rng.normal(0.0, hp.init_std, (n_users, hp.n_factors))
    Q = rng.normal(0.0, hp.init_std, (n_items, hp.n_factors))
    nu = min(n_users, m.n_users)
    ni = min(n_items, m.n_items)
    bu[:nu] = m.bu[:nu]
    bi[:ni] = m.bi[:ni]
    # rows zeroed in the old model were unseen; keep fresh random init for them
    keep_u = np.any(m.P[:nu] != 0.0, axis=1)
    keep_i = np.any(m.Q[:ni] != 0.0, axis=1)
    P[:nu][keep_u] = m.P[:nu][keep_u]
    Q[:ni][keep_i] = m.Q[:ni][keep_i]
    return bu, bi, P, Q


def squared_errors(m: MfModel, test: RatingSet) -> np.ndarray:
    """``(r - r_hat)^2`` for every test rating, in ``(user, item)`` order."""
    if len(test) == 0:
        raise EmptyTestSet("empty test set")
    users, items, ratings = test.to_arrays()
    return (ratings - m.predict_many(users, items)) ** 2


def rmse(m: MfModel, test: RatingSet) -> float:
    return float(np.sqrt(np.mean(squared_errors(m, test))))


_HEADER = struct.Struct("<qqq")


def save_model(m: MfModel, path: str | Path) -> None:
    """Flat little-endian dump: n_users, n_items, n_factors, mu, b_u, b_i, P, Q."""
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(m.n_users, m.n_items, m.P.shape[1]))
        fh.write(struct.pack("<d", m.mu))
        for arr in (m.bu, m.bi, m.P, m.Q):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_model(path: str | Path, hp: MfHyperParams | None = None) -> MfModel:
    buf = Path(path).read_bytes()
    n_users, n_items, n_factors = _HEADER.unpack_from(buf, 0)
    off = _HEADER.size
    (mu,) = struct.unpack_from("<d", buf, off)
    off += 8
    flat = np.frombuffer(buf, dtype="<f8", offset=off).astype(np.float64)
    sizes = [n_users, n_items, n_users * n_factors, n_items * n_factors]
    parts = np.split(flat, np.cumsum(sizes)[:-1])
    hp = hp or MfHyperParams(n_factors=n_factors)
    return MfModel(mu, parts[0], parts[1], parts[2].reshape(n_users, n_factors),
                   parts[3].reshape(n_items, n_factors), hp)
