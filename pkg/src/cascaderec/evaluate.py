"""Leave-one-out top-n evaluation: Recall@N and NDCG@N.

Each holdout user's held-out item is ranked against every item the user
has no training target-behavior interaction with. Score ties break by
ascending item index, so candidate iteration order cannot matter.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import score_candidates
from .autodiff import Tape
from .model import forward_cascade


@dataclass
class RankingReport:
    cutoffs: tuple
    recall: dict
    ndcg: dict
    ranks: dict = field(default_factory=dict)  # user -> rank of held-out item
    num_users: int = 0

    def to_dict(self):
        return {
            "num_users": self.num_users,
            "metrics": {
                str(n): {"recall": self.recall[n], "ndcg": self.ndcg[n]}
                for n in self.cutoffs
            },
        }


def rank_of(scores, candidates, held_item):
    """1-based rank of the held-out item; equal scores lose to lower indices."""
    pos = np.nonzero(candidates == held_item)[0]
    if len(pos) != 1:
        raise ValueError(f"held-out item {held_item} not among candidates")
    s = scores[pos[0]]
    return int(1 + np.sum(scores > s) + np.sum((scores == s) & (candidates < held_item)))


def evaluate(params, dataset, graphs, cfg, cutoffs=(10, 20, 50), split="test",
             users=None, mask_train=True, cascade=None, chunk=None):
    """Rank every holdout user's held-out item and aggregate the metrics.

    recall@N is the fraction of users ranked within N; ndcg@N averages
    1/log2(rank + 1) for ranks within N and 0 otherwise. Users without a
    holdout for ``split`` are excluded from all denominators. With
    ``mask_train`` unset (diagnostics), training positives stay in the
    candidate set.
    """
    holdout = dataset.test_item if split == "test" else dataset.validation_item
    if users is None:
        users = sorted(holdout)
    if cascade is None:
        cascade = forward_cascade(Tape(record=False), params, graphs, cfg)
    target = dataset.target
    train_items = [set() for _ in range(dataset.num_users)]
    if mask_train:
        for (u, i) in dataset.train_pairs(target):
            train_items[u].add(i)

    tape = Tape(record=False)
    cutoffs = tuple(sorted(cutoffs))
    hits = {n: 0 for n in cutoffs}
    gains = {n: 0.0 for n in cutoffs}
    ranks = {}
    evaluated = 0
    for u in users:
        held = holdout.get(u)
        if held is None:
            continue
        mask = np.ones(dataset.num_items, dtype=bool)
        if train_items[u]:
            mask[list(train_items[u])] = False
        mask[held] = True
        candidates = np.nonzero(mask)[0]
        scores = score_candidates(tape, params, cascade, u, candidates, cfg, chunk=chunk)
        rank = rank_of(scores, candidates, held)
        ranks[u] = rank
        evaluated += 1
        for n in cutoffs:
            if rank <= n:
                hits[n] += 1
                gains[n] += 1.0 / np.log2(rank + 1.0)
    if evaluated == 0:
        recall = {n: 0.0 for n in cutoffs}
        ndcg = {n: 0.0 for n in cutoffs}
    else:
        recall = {n: hits[n] / evaluated for n in cutoffs}
        ndcg = {n: gains[n] / evaluated for n in cutoffs}
    return RankingReport(cutoffs, recall, ndcg, ranks, evaluated)


def compare_runs(named_reports):
    """Tabulate >= 2 reports; deltas are the first (reference) run's relative
    improvement over each other run, in percent."""
    if len(named_reports) < 2:
        raise ValueError("compare_runs needs at least two reports")
    ref_name, ref = named_reports[0]
    rows = []
    for n in ref.cutoffs:
        for metric, values_of in (("recall", lambda r: r.recall), ("ndcg", lambda r: r.ndcg)):
            row = {
                "metric": f"{metric}@{n}",
                "values": {name: values_of(rep)[n] for name, rep in named_reports},
            }
            row["deltas_pct"] = {}
            for name, rep in named_reports[1:]:
                base = values_of(rep)[n]
                ref_val = values_of(ref)[n]
                row["deltas_pct"][name] = (
                    0.0 if base == ref_val else
                    float("inf") if base == 0.0 else
                    (ref_val - base) / base * 100.0
                )
            rows.append(row)
    return rows


def format_comparison(rows, named_reports):
    names = [name for name, _ in named_reports]
    ref = names[0]
    header = ["metric"] + names + [f"{ref} vs {n} (%)" for n in names[1:]]
    lines = ["\t".join(header)]
    for row in rows:
        cells = [row["metric"]]
        cells += [f"{row['values'][n]:.4f}" for n in names]
        cells += [f"{row['deltas_pct'][n]:+.2f}" for n in names[1:]]
        lines.append("\t".join(cells))
    return "\n".join(lines)
