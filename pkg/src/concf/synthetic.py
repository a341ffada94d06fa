"""Synthetic implicit feedback with a planted low-rank preference structure.

Users and items get latent factors; each user's interactions are drawn
without replacement from the softmax of their item affinities (via Gumbel
top-k), so a recommender that recovers the factors can rank the held-out
items well.  Lower sampling temperature means a cleaner signal.
"""

from __future__ import annotations

import numpy as np

from .data import InteractionSet

__all__ = ["planted_interactions"]


def planted_interactions(
    num_users: int = 500,
    num_items: int = 1000,
    rank: int = 8,
    interactions_per_user: float = 30.0,
    temperature: float = 0.5,
    seed: int = 0,
) -> InteractionSet:
    """Draw an InteractionSet whose positives follow planted rank-``rank`` affinities."""
    if rank < 1 or num_users < 1 or num_items < 2:
        raise ValueError("need rank >= 1, at least 1 user and 2 items")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 11]))
    u = rng.normal(size=(num_users, rank))
    v = rng.normal(size=(num_items, rank))
    affinity = (u @ v.T) / np.sqrt(rank)
    counts = rng.poisson(interactions_per_user, size=num_users)
    counts = np.clip(counts, 1, num_items - 1)
    users, items = [], []
    for user in range(num_users):
        gumbel = -np.log(-np.log(rng.uniform(size=num_items)))
        keys = affinity[user] / temperature + gumbel
        chosen = np.argpartition(-keys, counts[user])[: counts[user]]
        users.extend([user] * counts[user])
        items.extend(int(i) for i in chosen)
    return InteractionSet(num_users, num_items, np.array(users), np.array(items))
