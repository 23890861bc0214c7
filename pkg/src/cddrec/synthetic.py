"""Deterministic toy corpora for overfit and ablation checks."""

from __future__ import annotations

from .corpus import InteractionSequence, ItemCatalog


def stride_corpus(
    n_users: int = 50, length: int = 8, n_items: int | None = None, offset: int = 1
) -> tuple[list[InteractionSequence], ItemCatalog]:
    """User u walks ``length`` consecutive items starting at ``offset * u``.

    Items wrap around ``n_items``, which defaults to exactly the number of
    items the walks touch. With ``offset=1`` every held-out transition also
    occurs, at the same slot, in another user's training part.
    """
    if n_items is None:
        n_items = (n_users - 1) * offset + length
    sequences = []
    for u in range(n_users):
        start = offset * u
        items = tuple((start + j) % n_items + 1 for j in range(length))
        sequences.append(InteractionSequence(u + 1, items))
    catalog = ItemCatalog([f"item{i}" for i in range(1, n_items + 1)])
    return sequences, catalog
