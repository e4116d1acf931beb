"""Synthetic MovieLens-format worlds for tests and smoke runs.

Ratings come from a low-rank biased model plus noise, rounded to 1..5.
Item exposure follows a power law and protected users rate fewer items,
loosely mimicking the group imbalance of MovieLens-1M.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np


def generate(
    n_users: int = 300,
    n_items: int = 200,
    rank: int = 3,
    protected_share: float = 0.3,
    mean_activity: float = 40.0,
    noise: float = 0.4,
    seed: int = 0,
) -> tuple[list[tuple[int, int, int, int]], dict[int, str]]:
    """Return ``(ratings, genders)`` with 1-based original ids."""
    rng = np.random.default_rng(seed)
    P = rng.normal(0, 0.6, (n_users, rank))
    Q = rng.normal(0, 0.6, (n_items, rank))
    bu = rng.normal(0, 0.3, n_users)
    bi = rng.normal(0, 0.4, n_items)
    protected = rng.random(n_users) < protected_share
    popularity = 1.0 / np.arange(1, n_items + 1) ** 0.8
    popularity /= popularity.sum()
    ratings = []
    for u in range(n_users):
        scale = 0.6 if protected[u] else 1.0
        n = int(np.clip(rng.lognormal(np.log(mean_activity * scale), 0.5), 8, n_items // 2))
        items = rng.choice(n_items, size=n, replace=False, p=popularity)
        for i in sorted(items.tolist()):
            r = 3.6 + bu[u] + bi[i] + P[u] @ Q[i] + rng.normal(0, noise)
            ratings.append((u + 1, i + 1, int(np.clip(np.rint(r), 1, 5)), 978300000 + len(ratings)))
    genders = {u + 1: ("F" if protected[u] else "M") for u in range(n_users)}
    return ratings, genders


def write_ml1m(directory: str | Path, ratings, genders) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "ratings.dat", "w", encoding="ascii", newline="\n") as fh:
        for u, i, r, t in ratings:
            fh.write(f"{u}::{i}::{r}::{t}\n")
    with open(directory / "users.dat", "w", encoding="ascii", newline="\n") as fh:
        for u in sorted(genders):
            fh.write(f"{u}::{genders[u]}::25::0::00000\n")
    return directory


def write_world(directory: str | Path, **kwargs) -> Path:
    ratings, genders = generate(**kwargs)
    return write_ml1m(directory, ratings, genders)
