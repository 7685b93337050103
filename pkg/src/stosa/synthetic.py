"""Synthetic interaction logs with known structure, for tests and demos."""
from __future__ import annotations

import numpy as np

from .data import Interaction


def cyclic_interactions(n_users=50, n_items=10, lengths=(5, 9), seed=0):
    """Every user walks the cycle 1 -> 2 -> ... -> n_items -> 1 from a random start.

    The next item is a deterministic function of the current one, so a
    perfect model reaches Recall@1 = 1. Sequence lengths are drawn uniformly
    from the inclusive range ``lengths``; keep the upper end below ``n_items``
    so every user has never-seen items to sample negatives from.
    """
    rng = np.random.default_rng(seed)
    lo, hi = lengths
    out = []
    for u in range(n_users):
        start = int(rng.integers(n_items))
        length = int(rng.integers(lo, hi + 1))
        for t in range(length):
            out.append(Interaction(f"u{u}", f"i{(start + t) % n_items + 1}", t))
    return out


def mixed_uncertainty_interactions(n_users=400, n_topics=6, topic_size=24, length=15,
                                   noisy_fraction=0.3, seed=0):
    """Users following deterministic topic cycles, plus a noisy mixed-topic group.

    Items are split into ``n_topics`` cycles of ``topic_size`` items.
    Deterministic users walk one cycle. Noisy users hold two topics and at
    every step advance a randomly chosen one of them, so the next item is
    one of two candidates. Returns ``(interactions, noisy_users)`` where the
    latter is the set of noisy user names.
    """
    rng = np.random.default_rng(seed)
    out, noisy = [], set()

    def item(topic, pos):
        return f"t{topic}_{pos % topic_size}"

    for u in range(n_users):
        name = f"u{u}"
        if rng.random() < noisy_fraction:
            noisy.add(name)
            topics = rng.choice(n_topics, size=2, replace=False)
            pos = rng.integers(topic_size, size=2)
            for t in range(length):
                k = int(rng.integers(2))
                out.append(Interaction(name, item(topics[k], pos[k]), t))
                pos[k] += 1
        else:
            topic, pos = int(rng.integers(n_topics)), int(rng.integers(topic_size))
            for t in range(length):
                out.append(Interaction(name, item(topic, pos + t), t))
    return out, noisy


def uniform_interactions(n_users=200, n_items=50, length=8, seed=0):
    """Items drawn independently and uniformly: no learnable signal."""
    rng = np.random.default_rng(seed)
    return [Interaction(f"u{u}", f"i{int(rng.integers(n_items)) + 1}", t)
            for u in range(n_users) for t in range(length)]
