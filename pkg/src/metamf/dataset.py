"""Rating ingestion, per-user splits and batch sampling."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .exceptions import DatasetError, DuplicateRatingError, EmptyDatasetError, ParseError
from .numkernel import as_rng, derive_seed

logger = logging.getLogger(__name__)

SEPARATORS = ("::", "\t", ",")

# SeedSequence path components, kept distinct so streams never collide.
STREAM_SPLIT = 1


@dataclass(frozen=True)
class RatingsTable:
    """All ratings with users and items remapped to dense 0-based indices.

    ``user_ids[i]`` is the raw id of user index ``i`` (likewise for items).
    """

    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    user_ids: tuple
    item_ids: tuple

    @property
    def num_users(self) -> int:
        return len(self.user_ids)

    @property
    def num_items(self) -> int:
        return len(self.item_ids)

    def __len__(self):
        return len(self.ratings)

    def user_index(self, raw_id) -> int:
        return _lookup(self.user_ids, raw_id, "user")

    def item_index(self, raw_id) -> int:
        return _lookup(self.item_ids, raw_id, "item")

    @classmethod
    def from_triples(cls, triples, *, check_duplicates: bool = True) -> "RatingsTable":
        """Build a table from ``(raw_user, raw_item, rating)`` triples."""
        triples = list(triples)
        if not triples:
            raise EmptyDatasetError("no ratings")
        user_ids = _sorted_ids({t[0] for t in triples})
        item_ids = _sorted_ids({t[1] for t in triples})
        uidx = {u: i for i, u in enumerate(user_ids)}
        iidx = {v: i for i, v in enumerate(item_ids)}
        users = np.fromiter((uidx[t[0]] for t in triples), dtype=np.int64, count=len(triples))
        items = np.fromiter((iidx[t[1]] for t in triples), dtype=np.int64, count=len(triples))
        ratings = np.fromiter((float(t[2]) for t in triples), dtype=np.float64, count=len(triples))
        if check_duplicates:
            key = users * len(item_ids) + items
            uniq, first, counts = np.unique(key, return_index=True, return_counts=True)
            if np.any(counts > 1):
                dup = int(np.flatnonzero(counts > 1)[0])
                k = int(uniq[dup])
                raise DuplicateRatingError(user_ids[k // len(item_ids)], item_ids[k % len(item_ids)])
        return cls(users, items, ratings, tuple(user_ids), tuple(item_ids))


def _lookup(ids, raw_id, kind):
    for cand in (raw_id, str(raw_id)):
        try:
            return ids.index(cand)
        except ValueError:
            pass
    raise KeyError(f"unknown {kind} id {raw_id!r}")


def _sorted_ids(ids):
    # numeric ids sort numerically so "10" lands after "9"
    ids = list(ids)
    try:
        return sorted(ids, key=lambda x: (float(x), str(x)))
    except (TypeError, ValueError):
        return sorted(ids, key=str)


def detect_separator(line: str) -> str | None:
    for sep in SEPARATORS:
        if sep in line:
            return sep
    return None  # whitespace


def load_ratings(path, sep: str | None = None, skip_header: bool = False,
                 comment: str = "#") -> RatingsTable:
    """Read a ratings file with one ``user item rating [timestamp]`` per line.

    The separator is auto-detected among ``::``, tab and comma from the first
    data line, falling back to runs of whitespace. A fourth column is ignored.

    Raises
    ------
    FileNotFoundError
        If ``path`` does not exist.
    ParseError
        On a malformed line, with its 1-based line number.
    DuplicateRatingError
        If a (user, item) pair occurs twice.
    EmptyDatasetError
        If the file holds no ratings.
    """
    path = Path(path)
    triples = []
    seen = {}
    with path.open(encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or (comment and line.startswith(comment)):
                continue
            if skip_header:
                skip_header = False
                continue
            if sep is None:
                sep = detect_separator(line) or ""
            parts = [p.strip() for p in (line.split(sep) if sep else line.split())]
            if len(parts) not in (3, 4) or not parts[0] or not parts[1]:
                raise ParseError(lineno, line, f"expected 3 or 4 fields, got {len(parts)}")
            try:
                rating = float(parts[2])
            except ValueError:
                raise ParseError(lineno, line, f"rating {parts[2]!r} is not a number") from None
            if not math.isfinite(rating):
                raise ParseError(lineno, line, "rating is not finite")
            pair = (parts[0], parts[1])
            if pair in seen:
                raise DuplicateRatingError(pair[0], pair[1], lineno)
            seen[pair] = lineno
            triples.append((parts[0], parts[1], rating))
    if not triples:
        raise EmptyDatasetError(f"{path}: no ratings found")
    return RatingsTable.from_triples(triples, check_duplicates=False)


@dataclass(frozen=True)
class SplitConfig:
    train_frac: float = 0.8
    valid_frac: float = 0.1
    test_frac: float = 0.1
    seed: int = 0
    min_ratings: int = 3

    def __post_init__(self):
        fracs = (self.train_frac, self.valid_frac, self.test_frac)
        if any(f < 0 for f in fracs) or not math.isclose(sum(fracs), 1.0, abs_tol=1e-9):
            raise DatasetError(f"split fractions must be non-negative and sum to 1, got {fracs}")
        if self.train_frac <= 0:
            raise DatasetError("train_frac must be positive")
        if self.min_ratings < 1:
            raise DatasetError("min_ratings must be at least 1")

    def sizes(self, count: int) -> tuple[int, int, int]:
        """(train, valid, test) sizes for a user with ``count`` ratings.

        Non-empty held-out chunks get ``floor(frac * count)`` but at least one
        rating; train keeps the remainder.
        """
        def held(frac):
            return max(1, math.floor(frac * count + 1e-9)) if frac > 0 else 0
        test = held(self.test_frac)
        valid = held(self.valid_frac)
        return count - valid - test, valid, test


@dataclass(frozen=True)
class UserShard:
    """One device's private ratings as ``(item_indices, ratings)`` array pairs."""

    user_index: int
    train: tuple
    valid: tuple
    test: tuple

    def chunk(self, name: str) -> tuple:
        if name not in ("train", "valid", "test"):
            raise ValueError(f"unknown chunk {name!r}")
        return getattr(self, name)

    @property
    def sizes(self) -> tuple[int, int, int]:
        return len(self.train[0]), len(self.valid[0]), len(self.test[0])


@dataclass
class SplitResult:
    shards: list
    dropped_users: list = field(default_factory=list)

    def __iter__(self):
        return iter(self.shards)

    def __len__(self):
        return len(self.shards)

    def __getitem__(self, i):
        return self.shards[i]


def split_per_user(table: RatingsTable, cfg: SplitConfig) -> SplitResult:
    """Randomly split every user's ratings into train/valid/test chunks.

    Each user's ratings are ordered by item index and then shuffled with a
    stream derived from ``(cfg.seed, user_index)``, so the result does not
    depend on file line order. Users with fewer than ``cfg.min_ratings``
    ratings, or too few to leave a training rating, are dropped and listed in
    ``dropped_users``.
    """
    order = np.lexsort((table.items, table.users))
    users, items, ratings = table.users[order], table.items[order], table.ratings[order]
    bounds = np.flatnonzero(np.diff(users)) + 1
    shards, dropped = [], []
    for start, stop in zip(np.r_[0, bounds], np.r_[bounds, len(users)]):
        if start == stop:
            continue
        u = int(users[start])
        count = int(stop - start)
        n_train, n_valid, n_test = cfg.sizes(count)
        if count < cfg.min_ratings or n_train < 1:
            dropped.append(u)
            continue
        perm = as_rng(derive_seed(cfg.seed, STREAM_SPLIT, u)).permutation(count)
        it, rt = items[start:stop][perm], ratings[start:stop][perm]
        cuts = (n_train, n_train + n_valid)
        shards.append(UserShard(
            u,
            (it[:cuts[0]].copy(), rt[:cuts[0]].copy()),
            (it[cuts[0]:cuts[1]].copy(), rt[cuts[0]:cuts[1]].copy()),
            (it[cuts[1]:].copy(), rt[cuts[1]:].copy()),
        ))
    if dropped:
        logger.info("dropped %d users with fewer than %d usable ratings", len(dropped), cfg.min_ratings)
    return SplitResult(shards, dropped)


def write_manifest(path, table: RatingsTable, split: SplitResult, cfg: SplitConfig) -> None:
    """Text manifest of per-user split sizes, tab separated."""
    lines = [f"# seed={cfg.seed} fractions={cfg.train_frac},{cfg.valid_frac},{cfg.test_frac} "
             f"min_ratings={cfg.min_ratings}",
             "user_id\ttrain\tvalid\ttest"]
    for shard in split.shards:
        lines.append("\t".join([str(table.user_ids[shard.user_index]), *map(str, shard.sizes)]))
    for u in split.dropped_users:
        lines.append(f"# dropped\t{table.user_ids[u]}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _clamp(batch_size: int, population: int) -> int:
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if batch_size > population:
        logger.debug("batch size %d clamped to population %d", batch_size, population)
        return population
    return batch_size


def sample_user_batch(users: Sequence[int], batch_size: int, seed) -> list[int]:
    """Uniform sample of distinct users, deterministic in ``seed``."""
    users = list(users)
    k = _clamp(batch_size, len(users))
    idx = as_rng(seed).permutation(len(users))[:k]
    return [users[i] for i in idx]


def sample_rating_batch(shard: UserShard, batch_size: int, seed) -> list[tuple[int, float]]:
    """Uniform sample of distinct training ratings from one shard."""
    items, ratings = shard.train
    k = _clamp(batch_size, len(items))
    idx = as_rng(seed).permutation(len(items))[:k]
    return [(int(items[i]), float(ratings[i])) for i in idx]


class EpochSampler:
    """Draws batches without replacement, reshuffling once the population is used up.

    A batch that straddles the end of a pass is completed from the next
    shuffled pass; members already in the batch are moved to the back of that
    pass so they are neither repeated nor lost.
    """

    def __init__(self, population: Sequence, batch_size: int, seed):
        self.population = np.asarray(population)
        if len(self.population) == 0:
            raise ValueError("cannot sample from an empty population")
        self.batch_size = _clamp(batch_size, len(self.population))
        self._rng = as_rng(seed)
        self._order = self._rng.permutation(len(self.population))
        self._pos = 0

    def next_indices(self) -> np.ndarray:
        take = []
        while len(take) < self.batch_size:
            if self._pos == len(self._order):
                order = self._rng.permutation(len(self.population))
                # members of the current batch go to the back of the new pass
                used = np.isin(order, take)
                self._order = np.concatenate([order[~used], order[used]])
                self._pos = 0
            take.append(int(self._order[self._pos]))
            self._pos += 1
        return np.asarray(take, dtype=np.int64)

    def next_batch(self) -> np.ndarray:
        return self.population[self.next_indices()]
