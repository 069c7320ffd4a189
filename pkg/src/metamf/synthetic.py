"""Synthetic low-rank rating data with a known generator."""
from __future__ import annotations

import numpy as np

from .dataset import RatingsTable
from .numkernel import as_rng


def make_low_rank_ratings(num_users=200, num_items=300, rank=4, ratings_per_user=50,
                          mean=3.0, factor_scale=None, noise=0.1, low=1.0, high=5.0,
                          seed=0) -> RatingsTable:
    """Ratings ``clip(mean + p_u . q_i + noise, low, high)`` on a random subset of items.

    Latent factors are Gaussian with per-entry scale ``factor_scale``
    (default chosen so ``p_u . q_i`` has unit variance). Every user rates
    exactly ``ratings_per_user`` distinct items.
    """
    rng = as_rng(seed)
    if factor_scale is None:
        factor_scale = rank ** -0.25
    p = rng.normal(0.0, factor_scale, size=(num_users, rank))
    q = rng.normal(0.0, factor_scale, size=(num_items, rank))
    users, items = [], []
    for u in range(num_users):
        chosen = np.sort(rng.choice(num_items, size=ratings_per_user, replace=False))
        users.append(np.full(ratings_per_user, u))
        items.append(chosen)
    users = np.concatenate(users)
    items = np.concatenate(items)
    values = mean + np.einsum("ij,ij->i", p[users], q[items]) + rng.normal(0.0, noise, size=len(users))
    values = np.clip(values, low, high)
    return RatingsTable(users.astype(np.int64), items.astype(np.int64), values,
                        tuple(range(num_users)), tuple(range(num_items)))


def write_ratings(path, table: RatingsTable, sep: str = "\t") -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for u, i, r in zip(table.users, table.items, table.ratings):
            fh.write(f"{table.user_ids[u]}{sep}{table.item_ids[i]}{sep}{float(r)!r}\n")
