"""MovieLens loaders, k-core filtering and the per-user (userfixed) split."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from minifair.data import Group, GroupMap, Interaction, RatingSet
from minifair.errors import DegenerateUser, ParseError

FORMATS = ("ml-1m", "ml-100k")

_RATING_SEP = {"ml-1m": "::", "ml-100k": "\t"}
_USER_SEP = {"ml-1m": "::", "ml-100k": "|"}
_RATING_FILE = {"ml-1m": "ratings.dat", "ml-100k": "u.data"}
_USER_FILE = {"ml-1m": "users.dat", "ml-100k": "u.user"}
_GENDER = {"F": Group.PROTECTED, "M": Group.UNPROTECTED}


@dataclass(frozen=True)
class SplitConfig:
    train_fraction: float = 0.8
    k_core: int = 5
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError(f"train_fraction must lie in (0, 1), got {self.train_fraction}")
        if self.k_core < 0:
            raise ValueError(f"k_core must be >= 0, got {self.k_core}")


def _read_lines(path: str | Path) -> list[str]:
    # Latin-1 never fails to decode; ids, ratings and gender tokens are ASCII.
    with open(path, "rb") as fh:
        return fh.read().decode("latin-1").splitlines()


def parse_ratings(path: str | Path, fmt: str = "ml-1m") -> list[Interaction]:
    """One :class:`Interaction` per non-blank line, in file order."""
    sep = _RATING_SEP[fmt]
    out = []
    for lineno, line in enumerate(_read_lines(path), start=1):
        if not line.strip():
            continue
        parts = line.split(sep)
        if len(parts) != 4:
            raise ParseError(lineno, f"expected 4 fields, got {len(parts)}")
        try:
            user, item, rating, ts = (int(p) for p in parts)
        except ValueError:
            raise ParseError(lineno, "non-integer field") from None
        if not 1 <= rating <= 5:
            raise ParseError(lineno, f"rating {rating} outside [1, 5]")
        out.append(Interaction(user, item, float(rating), ts))
    return out


def parse_users(path: str | Path, fmt: str = "ml-1m") -> GroupMap:
    """Gender column to group: ``F`` is protected, ``M`` unprotected."""
    sep = _USER_SEP[fmt]
    gender_col = 1 if fmt == "ml-1m" else 2
    groups = GroupMap()
    for lineno, line in enumerate(_read_lines(path), start=1):
        if not line.strip():
            continue
        parts = line.split(sep)
        if len(parts) != 5:
            raise ParseError(lineno, f"expected 5 fields, got {len(parts)}")
        try:
            user = int(parts[0])
        except ValueError:
            raise ParseError(lineno, "non-integer user id") from None
        token = parts[gender_col].strip()
        if token not in _GENDER:
            raise ParseError(lineno, f"unknown gender token {token!r}")
        groups[user] = _GENDER[token]
    return groups


def k_core_filter(interactions: list[Interaction], k: int) -> list[Interaction]:
    """Peel users and items with fewer than ``k`` ratings until nothing changes.

    Input order is preserved among the survivors.
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    if k == 0 or not interactions:
        return list(interactions)
    users = np.fromiter((x.user for x in interactions), dtype=np.int64, count=len(interactions))
    items = np.fromiter((x.item for x in interactions), dtype=np.int64, count=len(interactions))
    _, u_idx = np.unique(users, return_inverse=True)
    _, i_idx = np.unique(items, return_inverse=True)
    alive = np.ones(len(interactions), dtype=bool)
    while True:
        u_deg = np.bincount(u_idx[alive], minlength=u_idx.max() + 1)
        i_deg = np.bincount(i_idx[alive], minlength=i_idx.max() + 1)
        keep = alive & (u_deg[u_idx] >= k) & (i_deg[i_idx] >= k)
        if np.array_equal(keep, alive):
            break
        alive = keep
    return [x for x, a in zip(interactions, alive) if a]


def _train_count(n: int, fraction: float) -> int:
    # round() guards against 0.8 * n landing a hair above an integer
    return math.ceil(round(fraction * n, 9))


def _user_rng(seed: int, user_key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed & (2**64 - 1), user_key])))


def userfixed_split(
    rs: RatingSet, cfg: SplitConfig, user_keys: dict[int, int] | None = None
) -> tuple[RatingSet, RatingSet]:
    """Per-user random split: ``ceil(train_fraction * n_u)`` ratings go to train.

    Each user's shuffle comes from its own counter-based stream keyed by
    ``(cfg.seed, user_keys[u])`` so editing one user never moves another
    user's split.  ``user_keys`` defaults to the user id itself; pass the
    original (pre-remapping) ids to make splits stable across filtering.
    """
    train, test = RatingSet(), RatingSet()
    for u in rs.users():
        row = rs.user_entries(u)
        n = len(row)
        if n < 2:
            raise DegenerateUser(u)
        entries = [row[i] for i in sorted(row)]
        key = u if user_keys is None else user_keys[u]
        perm = _user_rng(cfg.seed, key).permutation(n)
        n_train = _train_count(n, cfg.train_fraction)
        for rank, j in enumerate(perm):
            (train if rank < n_train else test).insert(entries[j])
    return train, test


@dataclass
class Dataset:
    """A filtered dataset with dense ids and the original-id side tables."""

    ratings: RatingSet
    groups: GroupMap
    user_ids: np.ndarray
    item_ids: np.ndarray
    stats: dict = field(default_factory=dict)

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    @property
    def density(self) -> float:
        return len(self.ratings) / (self.n_users * self.n_items) if self.n_users and self.n_items else 0.0


def remap_dense(interactions: list[Interaction], groups: GroupMap) -> Dataset:
    """Map user and item ids to 0-based dense ids in ascending original order."""
    user_ids = np.array(sorted({x.user for x in interactions}), dtype=np.int64)
    item_ids = np.array(sorted({x.item for x in interactions}), dtype=np.int64)
    u_map = {int(u): k for k, u in enumerate(user_ids)}
    i_map = {int(i): k for k, i in enumerate(item_ids)}
    rs = RatingSet(Interaction(u_map[x.user], i_map[x.item], x.rating, x.timestamp) for x in interactions)
    dense_groups = GroupMap()
    for u, k in u_map.items():
        dense_groups[k] = groups.group_of(u)
    return Dataset(rs, dense_groups, user_ids, item_ids)


def load_dataset(directory: str | Path, fmt: str = "ml-1m", k_core: int = 5) -> Dataset:
    """Read ratings and users files from ``directory``, k-core filter, remap ids."""
    if fmt not in FORMATS:
        raise ValueError(f"unknown dataset format {fmt!r}; expected one of {FORMATS}")
    directory = Path(directory)
    raw = parse_ratings(directory / _RATING_FILE[fmt], fmt)
    groups = parse_users(directory / _USER_FILE[fmt], fmt)
    filtered = k_core_filter(raw, k_core)
    ds = remap_dense(filtered, groups)
    counts = ds.groups.counts()
    ds.stats = {
        "raw_ratings": len(raw),
        "ratings": len(ds.ratings),
        "users": ds.n_users,
        "items": ds.n_items,
        "density": ds.density,
        "protected_users": counts[Group.PROTECTED],
        "unprotected_users": counts[Group.UNPROTECTED],
    }
    return ds


def split_dataset(ds: Dataset, cfg: SplitConfig) -> tuple[RatingSet, RatingSet]:
    keys = {k: int(u) for k, u in enumerate(ds.user_ids)}
    return userfixed_split(ds.ratings, cfg, user_keys=keys)


def subsample_users(ds: Dataset, fraction: float, seed: int, k_core: int = 5) -> Dataset:
    """Keep a seeded random share of users, re-filter to the k-core and remap."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    if fraction == 1.0:
        return ds
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed & (2**64 - 1), 0x5B])))
    n_keep = max(1, int(round(fraction * ds.n_users)))
    keep = set(rng.choice(ds.n_users, size=n_keep, replace=False).tolist())
    raw = [Interaction(int(ds.user_ids[x.user]), int(ds.item_ids[x.item]), x.rating, x.timestamp)
           for x in ds.ratings.sorted_entries() if x.user in keep]
    groups = GroupMap({int(ds.user_ids[u]): g for u, g in ds.groups.items()})
    out = remap_dense(k_core_filter(raw, k_core), groups)
    out.stats = dict(ds.stats, ratings=len(out.ratings), users=out.n_users, items=out.n_items,
                     density=out.density, user_fraction=fraction)
    return out
