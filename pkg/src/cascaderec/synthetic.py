"""Planted-factor synthetic interaction logs.

Every item belongs to one of K latent factors (contiguous index blocks,
Zipf-like popularity inside each factor). Every user gets a browsing
factor and a buying factor; an ``alignment`` fraction of users buys inside
the factor they browse, the rest buy one factor over. Behaviors are
emitted with increasing selectivity: the first behavior is broad with a
mild browse-factor bias, middle behaviors tighten around the browsing
factor, and the target behavior draws almost exclusively from the buying
factor. Later-behavior items seep backward down the chain (you view what
you cart, you cart part of what you buy), so the planted structure is
recoverable from the auxiliary graphs.
"""

from __future__ import annotations

import numpy as np

from .data import RawInteraction


def _weighted_sample(rng, weights, size, exclude=()):
    weights = weights.copy()
    if len(exclude):
        weights[list(exclude)] = 0.0
    avail = np.count_nonzero(weights)
    size = min(size, avail)
    if size == 0:
        return []
    picks = rng.choice(len(weights), size=size, replace=False, p=weights / weights.sum())
    return [int(i) for i in picks]


def generate_interactions(num_users=200, num_items=100, num_factors=2,
                          behaviors=("view", "cart", "buy"), seed=0,
                          target_per_user=6, mid_extra=4, first_extra=8,
                          alignment=0.5, containment=0.7,
                          popularity_exponent=0.8, factor_focus=0.95):
    """Return RawInteraction records with planted factor structure.

    ``target_per_user`` is the number of target interactions per user
    (>= 3 gives every user both validation and test holdouts);
    ``containment`` is the fraction of a user's target items seeded into
    each middle behavior; ``factor_focus`` is the probability mass the
    target behavior puts on the buying factor.
    """
    if num_factors < 1 or num_items < num_factors:
        raise ValueError("need at least one item per factor")
    if len(behaviors) < 1:
        raise ValueError("need at least one behavior")
    rng = np.random.default_rng(seed)
    behaviors = list(behaviors)
    item_factor = (np.arange(num_items) * num_factors) // num_items
    rank_in_factor = np.zeros(num_items)
    for f in range(num_factors):
        members = np.nonzero(item_factor == f)[0]
        rank_in_factor[members] = np.arange(len(members))
    popularity = 1.0 / (1.0 + rank_in_factor) ** popularity_exponent

    records = []
    for u in range(num_users):
        browse_factor = int(rng.integers(num_factors))
        if rng.random() < alignment or num_factors == 1:
            buy_factor = browse_factor
        else:
            buy_factor = (browse_factor + 1) % num_factors
        in_browse = (item_factor == browse_factor).astype(float)
        in_buy = (item_factor == buy_factor).astype(float)

        buy_weights = popularity * (factor_focus * in_buy + (1.0 - factor_focus) / num_factors)
        buys = _weighted_sample(rng, buy_weights, target_per_user)

        # middle behaviors: part of the basket plus browse-factor noise
        mid_sets = []
        seeded = max(0, int(round(containment * len(buys))))
        mid_weights = popularity * (0.75 * in_browse + 0.25 / num_factors)
        for _ in range(max(0, len(behaviors) - 2)):
            base = _weighted_sample(rng, np.ones(len(buys)), seeded) if seeded else []
            items = [buys[j] for j in base]
            items += _weighted_sample(rng, mid_weights, mid_extra, exclude=items)
            mid_sets.append(items)

        per_user = [buys] if len(behaviors) == 1 else []
        if len(behaviors) >= 2:
            # first behavior: everything downstream plus broad noise
            first = sorted(set(buys).union(*map(set, mid_sets)) if mid_sets else set(buys))
            first_weights = popularity * (0.4 * in_browse + 0.6 / num_factors)
            first = first + _weighted_sample(rng, first_weights, first_extra, exclude=first)
            per_user = [first] + mid_sets + [buys]

        clock = 0
        for name, items in zip(behaviors, per_user):
            if name == behaviors[-1]:
                items = [buys[j] for j in rng.permutation(len(buys))]
            for i in items:
                records.append(RawInteraction(f"u{u}", f"i{i:05d}", name, clock))
                clock += 1
    return records


def write_tsv(records, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# user_key\titem_key\tbehavior\ttimestamp\n")
        for rec in records:
            fh.write(f"{rec.user_key}\t{rec.item_key}\t{rec.behavior}\t{rec.timestamp}\n")
