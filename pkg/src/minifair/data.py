"""Rating containers shared by every stage of the simulator.

A :class:`RatingSet` holds at most one rating per ``(user, item)`` pair and
keeps per-user and per-item indexes so that neighbourhood lookups cost
O(degree).  The same class is used for the full dataset, the candidate set,
the known set and the test set.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, Iterator, Mapping

import numpy as np

from minifair.errors import DuplicateEntry, NotFound, UnknownUser


@dataclass(frozen=True, slots=True)
class Interaction:
    user: int
    item: int
    rating: float
    timestamp: int = 0

    @property
    def key(self) -> tuple[int, int]:
        return (self.user, self.item)


class RatingSet:
    """Sparse ``(user, item) -> Interaction`` store with user and item indexes."""

    def __init__(self, interactions: Iterable[Interaction] = ()):
        self._entries: dict[tuple[int, int], Interaction] = {}
        self._by_user: dict[int, dict[int, Interaction]] = {}
        self._by_item: dict[int, dict[int, Interaction]] = {}
        self._version = 0
        self._arrays_cache: tuple[int, tuple[np.ndarray, np.ndarray, np.ndarray]] | None = None
        for x in interactions:
            self.insert(x)

    def insert(self, x: Interaction) -> None:
        key = (x.user, x.item)
        if key in self._entries:
            raise DuplicateEntry(key)
        self._entries[key] = x
        self._by_user.setdefault(x.user, {})[x.item] = x
        self._by_item.setdefault(x.item, {})[x.user] = x
        self._version += 1

    def remove(self, user: int, item: int) -> Interaction:
        try:
            x = self._entries.pop((user, item))
        except KeyError:
            raise NotFound((user, item)) from None
        row = self._by_user[user]
        del row[item]
        if not row:
            del self._by_user[user]
        col = self._by_item[item]
        del col[user]
        if not col:
            del self._by_item[item]
        self._version += 1
        return x

    def get(self, user: int, item: int) -> Interaction | None:
        return self._entries.get((user, item))

    def __contains__(self, key: tuple[int, int]) -> bool:
        return key in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[Interaction]:
        return iter(self._entries.values())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, RatingSet):
            return NotImplemented
        return self._entries == other._entries

    def __repr__(self) -> str:
        return f"RatingSet(n={len(self)}, users={len(self._by_user)}, items={len(self._by_item)})"

    def user_entries(self, user: int) -> Mapping[int, Interaction]:
        """Item -> Interaction for one user (empty mapping when unseen)."""
        return self._by_user.get(user, {})

    def item_entries(self, item: int) -> Mapping[int, Interaction]:
        """User -> Interaction for one item (empty mapping when unseen)."""
        return self._by_item.get(item, {})

    def users(self) -> list[int]:
        return sorted(self._by_user)

    def items(self) -> list[int]:
        return sorted(self._by_item)

    def user_degree(self, user: int) -> int:
        return len(self._by_user.get(user, ()))

    def item_degree(self, item: int) -> int:
        return len(self._by_item.get(item, ()))

    def copy(self) -> RatingSet:
        return RatingSet(self._entries.values())

    def sorted_entries(self) -> list[Interaction]:
        return [self._entries[k] for k in sorted(self._entries)]

    def to_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(users, items, ratings)`` sorted by ``(user, item)``.

        The result is cached until the next mutation; callers must not
        write into the returned arrays.
        """
        if self._arrays_cache is not None and self._arrays_cache[0] == self._version:
            return self._arrays_cache[1]
        n = len(self._entries)
        users = np.empty(n, dtype=np.int64)
        items = np.empty(n, dtype=np.int64)
        ratings = np.empty(n, dtype=np.float64)
        for k, x in enumerate(self._entries.values()):
            users[k] = x.user
            items[k] = x.item
            ratings[k] = x.rating
        order = np.lexsort((items, users))
        arrays = (users[order], items[order], ratings[order])
        for a in arrays:
            a.flags.writeable = False
        self._arrays_cache = (self._version, arrays)
        return arrays


class Group(enum.Enum):
    PROTECTED = "protected"
    UNPROTECTED = "unprotected"


class GroupMap(dict):
    """``user -> Group``; a plain dict with a few lookups on top."""

    def group_of(self, user: int) -> Group:
        try:
            return self[user]
        except KeyError:
            raise UnknownUser(user) from None

    def is_protected(self, user: int) -> bool:
        return self.group_of(user) is Group.PROTECTED

    def protected_mask(self, n_users: int) -> np.ndarray:
        mask = np.zeros(n_users, dtype=bool)
        for u, g in self.items():
            if g is Group.PROTECTED and 0 <= u < n_users:
                mask[u] = True
        return mask

    def counts(self) -> dict[Group, int]:
        out = {Group.PROTECTED: 0, Group.UNPROTECTED: 0}
        for g in self.values():
            out[g] += 1
        return out


def group_partition(rs: RatingSet, groups: GroupMap) -> tuple[RatingSet, RatingSet]:
    """Split ``rs`` into (protected users' entries, everyone else's entries)."""
    protected, unprotected = RatingSet(), RatingSet()
    for x in rs.sorted_entries():
        if groups.group_of(x.user) is Group.PROTECTED:
            protected.insert(x)
        else:
            unprotected.insert(x)
    return protected, unprotected


class CandidatePool:
    """Per-user sets of item ids that have not been queried yet.

    Stored as a dense boolean ``n_users x n_items`` matrix, which for the
    MovieLens-1M 5-core set is about 20 MB.
    """

    def __init__(self, n_users: int, n_items: int):
        self.mask = np.zeros((n_users, n_items), dtype=bool)

    @property
    def n_users(self) -> int:
        return self.mask.shape[0]

    @property
    def n_items(self) -> int:
        return self.mask.shape[1]

    def items(self, user: int) -> np.ndarray:
        return np.flatnonzero(self.mask[user])

    def size(self, user: int) -> int:
        return int(self.mask[user].sum())

    def sizes(self) -> np.ndarray:
        return self.mask.sum(axis=1)

    def total(self) -> int:
        return int(self.mask.sum())

    def __contains__(self, key: tuple[int, int]) -> bool:
        u, i = key
        return bool(self.mask[u, i])

    def nonempty_users(self) -> np.ndarray:
        return np.flatnonzero(self.mask.any(axis=1))

    def discard(self, user: int, items: Iterable[int]) -> None:
        self.mask[user, np.asarray(list(items), dtype=np.int64)] = False

    def restore(self, user: int, items: Iterable[int]) -> None:
        self.mask[user, np.asarray(list(items), dtype=np.int64)] = True

    def copy(self) -> CandidatePool:
        other = CandidatePool.__new__(CandidatePool)
        other.mask = self.mask.copy()
        return other
