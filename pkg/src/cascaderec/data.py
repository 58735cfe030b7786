"""Multi-behavior interaction ingestion, leave-one-out splits, and graphs.

Input format: UTF-8 tab-separated lines ``user_key \\t item_key \\t
behavior_name \\t timestamp``; lines starting with ``#`` are skipped.
The target behavior is the last entry of the configured chain.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

CACHE_MAGIC = b"CRDS"
CACHE_VERSION = 1


class DataError(ValueError):
    """Malformed input or an inconsistent dataset."""


@dataclass(frozen=True)
class RawInteraction:
    user_key: str
    item_key: str
    behavior: str
    timestamp: int


@dataclass
class InteractionDataset:
    """Deduplicated, ID-remapped interactions plus (optional) holdout split.

    ``interactions[b]`` maps (user, item) index pairs to the earliest
    timestamp seen for that pair under behavior ``b``. Once built the
    dataset is treated as immutable.
    """

    user_keys: list
    item_keys: list
    behaviors: list
    interactions: list  # per behavior: dict[(u, i)] -> timestamp
    test_item: dict = field(default_factory=dict)
    validation_item: dict = field(default_factory=dict)

    @property
    def num_users(self):
        return len(self.user_keys)

    @property
    def num_items(self):
        return len(self.item_keys)

    @property
    def num_behaviors(self):
        return len(self.behaviors)

    @property
    def target(self):
        """Index of the target behavior (last in the cascade chain)."""
        return len(self.behaviors) - 1

    def pairs(self, b):
        """All deduplicated (user, item) pairs of behavior ``b``."""
        return set(self.interactions[b].keys())

    def train_pairs(self, b):
        """Training pairs of behavior ``b``: held-out target pairs removed."""
        pairs = self.interactions[b].keys()
        if b != self.target:
            return list(pairs)
        held = {(u, i) for u, i in self.test_item.items()}
        held |= {(u, i) for u, i in self.validation_item.items()}
        return [p for p in pairs if p not in held]

    def user_key_index(self):
        return {k: u for u, k in enumerate(self.user_keys)}

    def item_key_index(self):
        return {k: i for i, k in enumerate(self.item_keys)}


def parse_tsv(lines):
    """Yield RawInteraction from TSV lines; raises DataError with line numbers."""
    for lineno, line in enumerate(lines, start=1):
        line = line.rstrip("\n").rstrip("\r")
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise DataError(f"line {lineno}: expected 4 tab-separated columns, got {len(parts)}")
        user_key, item_key, behavior, ts_raw = parts
        try:
            ts = int(ts_raw)
        except ValueError:
            raise DataError(f"line {lineno}: timestamp {ts_raw!r} is not an integer") from None
        if ts < 0:
            raise DataError(f"line {lineno}: negative timestamp {ts}")
        yield RawInteraction(user_key, item_key, behavior, ts)


def read_tsv(path):
    with open(path, "r", encoding="utf-8") as fh:
        yield from parse_tsv(fh)


def write_tsv(dataset, path):
    """Re-serialize a dataset to the TSV input format.

    Records are ordered so that re-ingesting the file reproduces the
    dataset exactly, including first-seen index order: distinct users and
    items must each appear in index order, so triples are released by a
    two-counter merge (a triple is writable once its user and item indices
    are at or below the next-unintroduced counters).
    """
    from collections import deque

    triples = [
        (u, i, b, ts)
        for b in range(dataset.num_behaviors)
        for (u, i), ts in dataset.interactions[b].items()
    ]
    waiting_u, waiting_i = {}, {}
    ready = deque()
    for t in triples:
        if t[0] > 0:
            waiting_u.setdefault(t[0], []).append(t)
        elif t[1] > 0:
            waiting_i.setdefault(t[1], []).append(t)
        else:
            ready.append(t)
    next_u, next_i = 0, 0
    with open(path, "w", encoding="utf-8") as fh:
        emitted = 0
        while ready:
            u, i, b, ts = ready.popleft()
            fh.write(
                f"{dataset.user_keys[u]}\t{dataset.item_keys[i]}\t"
                f"{dataset.behaviors[b]}\t{ts}\n"
            )
            emitted += 1
            if u == next_u:
                next_u += 1
                for t in waiting_u.pop(next_u, []):
                    if t[1] <= next_i:
                        ready.append(t)
                    else:
                        waiting_i.setdefault(t[1], []).append(t)
            if i == next_i:
                next_i += 1
                for t in waiting_i.pop(next_i, []):
                    ready.append(t)
        if emitted != len(triples):
            raise DataError("dataset key order is not reproducible from its triples")


def ingest(records, chain):
    """Build an InteractionDataset from raw records.

    Duplicate (user, item, behavior) triples collapse to the earliest
    timestamp; user/item keys map to dense indices in first-seen order.
    """
    chain = list(chain)
    if not chain:
        raise DataError("behavior chain must be nonempty")
    behavior_index = {name: b for b, name in enumerate(chain)}
    if len(behavior_index) != len(chain):
        raise DataError("behavior chain contains duplicates")

    user_ids, item_ids = {}, {}
    user_keys, item_keys = [], []
    interactions = [dict() for _ in chain]
    count = 0
    for rec in records:
        count += 1
        b = behavior_index.get(rec.behavior)
        if b is None:
            raise DataError(
                f"unknown behavior {rec.behavior!r} in record "
                f"({rec.user_key!r}, {rec.item_key!r}, {rec.behavior!r}, {rec.timestamp})"
            )
        u = user_ids.get(rec.user_key)
        if u is None:
            u = user_ids[rec.user_key] = len(user_keys)
            user_keys.append(rec.user_key)
        i = item_ids.get(rec.item_key)
        if i is None:
            i = item_ids[rec.item_key] = len(item_keys)
            item_keys.append(rec.item_key)
        prev = interactions[b].get((u, i))
        if prev is None or rec.timestamp < prev:
            interactions[b][(u, i)] = rec.timestamp
    if count == 0:
        raise DataError("empty interaction stream")
    return InteractionDataset(user_keys, item_keys, chain, interactions)


def split_leave_one_out(dataset):
    """Hold out each user's latest target interaction as the test item.

    Users with >= 3 target interactions additionally donate their
    second-latest as the validation item. Ties on equal timestamps are
    broken by lexicographically larger item key counting as later. Users
    with no target interaction simply get no holdout. Returns a new
    dataset; training pairs exclude the held-out pairs for the target
    behavior only.
    """
    target = len(dataset.behaviors) - 1
    by_user = {}
    for (u, i), ts in dataset.interactions[target].items():
        by_user.setdefault(u, []).append((ts, dataset.item_keys[i], i))
    test_item, validation_item = {}, {}
    for u, events in by_user.items():
        events.sort()
        test_item[u] = events[-1][2]
        if len(events) >= 3:
            validation_item[u] = events[-2][2]
    return InteractionDataset(
        dataset.user_keys,
        dataset.item_keys,
        dataset.behaviors,
        dataset.interactions,
        test_item=test_item,
        validation_item=validation_item,
    )


class BehaviorGraph:
    """Sparse bipartite adjacency of one behavior with symmetric norms.

    Stores the user->item and item->user orientations as CSR with edge
    weights 1 / (sqrt(deg_u) * sqrt(deg_i)); degrees count training
    interactions of this behavior only. Immutable once built.
    """

    def __init__(self, num_users, num_items, edges_u, edges_i):
        self.num_users = num_users
        self.num_items = num_items
        self.edges_u = np.asarray(edges_u, dtype=np.int64)
        self.edges_i = np.asarray(edges_i, dtype=np.int64)
        self.deg_u = np.bincount(self.edges_u, minlength=num_users).astype(np.int64)
        self.deg_i = np.bincount(self.edges_i, minlength=num_items).astype(np.int64)
        if len(self.edges_u):
            norm = 1.0 / np.sqrt(
                self.deg_u[self.edges_u].astype(np.float64)
                * self.deg_i[self.edges_i].astype(np.float64)
            )
        else:
            norm = np.zeros(0, dtype=np.float64)
        self.adj_ui = sp.csr_matrix(
            (norm, (self.edges_u, self.edges_i)), shape=(num_users, num_items)
        )
        self.adj_iu = sp.csr_matrix(
            (norm, (self.edges_i, self.edges_u)), shape=(num_items, num_users)
        )

    @property
    def num_edges(self):
        return len(self.edges_u)


def build_graph(dataset, b):
    """BehaviorGraph over the training interactions of behavior ``b``."""
    if not 0 <= b < dataset.num_behaviors:
        raise DataError(f"behavior index {b} out of range [0, {dataset.num_behaviors})")
    pairs = dataset.train_pairs(b)
    edges_u = [u for u, _ in pairs]
    edges_i = [i for _, i in pairs]
    return BehaviorGraph(dataset.num_users, dataset.num_items, edges_u, edges_i)


def build_graphs(dataset):
    return [build_graph(dataset, b) for b in range(dataset.num_behaviors)]


# ---- binary cache -----------------------------------------------------------


def _write_str(fh, s):
    raw = s.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)


def _read_str(fh):
    (n,) = struct.unpack("<I", fh.read(4))
    return fh.read(n).decode("utf-8")


def _write_array(fh, arr, dtype):
    arr = np.asarray(arr, dtype=dtype)
    fh.write(struct.pack("<Q", arr.size))
    fh.write(arr.tobytes())


def _read_array(fh, dtype):
    (n,) = struct.unpack("<Q", fh.read(8))
    itemsize = np.dtype(dtype).itemsize
    return np.frombuffer(fh.read(n * itemsize), dtype=dtype).copy()


def save_cache(dataset, path):
    """Write the versioned binary cache of a processed dataset."""
    buf = io.BytesIO()
    buf.write(CACHE_MAGIC)
    buf.write(struct.pack("<I", CACHE_VERSION))
    buf.write(struct.pack("<III", dataset.num_users, dataset.num_items, dataset.num_behaviors))
    for key in dataset.user_keys:
        _write_str(buf, key)
    for key in dataset.item_keys:
        _write_str(buf, key)
    for name in dataset.behaviors:
        _write_str(buf, name)
    for b in range(dataset.num_behaviors):
        pairs = dataset.interactions[b]
        us = np.fromiter((u for u, _ in pairs), dtype=np.int64, count=len(pairs))
        it = np.fromiter((i for _, i in pairs), dtype=np.int64, count=len(pairs))
        ts = np.fromiter(pairs.values(), dtype=np.int64, count=len(pairs))
        _write_array(buf, us, "<i8")
        _write_array(buf, it, "<i8")
        _write_array(buf, ts, "<i8")
    for holdout in (dataset.test_item, dataset.validation_item):
        col = np.full(dataset.num_users, -1, dtype=np.int64)
        for u, i in holdout.items():
            col[u] = i
        _write_array(buf, col, "<i8")
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_cache(path):
    """Read a dataset cache; rejects bad magic or unknown versions."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CACHE_MAGIC:
            raise DataError(f"{path}: not a dataset cache (magic {magic!r})")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CACHE_VERSION:
            raise DataError(f"{path}: unsupported cache version {version}")
        num_users, num_items, num_behaviors = struct.unpack("<III", fh.read(12))
        user_keys = [_read_str(fh) for _ in range(num_users)]
        item_keys = [_read_str(fh) for _ in range(num_items)]
        behaviors = [_read_str(fh) for _ in range(num_behaviors)]
        interactions = []
        for _ in range(num_behaviors):
            us = _read_array(fh, "<i8")
            it = _read_array(fh, "<i8")
            ts = _read_array(fh, "<i8")
            interactions.append(
                {(int(u), int(i)): int(t) for u, i, t in zip(us, it, ts)}
            )
        test_col = _read_array(fh, "<i8")
        val_col = _read_array(fh, "<i8")
    test_item = {u: int(i) for u, i in enumerate(test_col) if i >= 0}
    validation_item = {u: int(i) for u, i in enumerate(val_col) if i >= 0}
    return InteractionDataset(
        user_keys, item_keys, behaviors, interactions,
        test_item=test_item, validation_item=validation_item,
    )


def save_split_manifest(dataset, path):
    """JSON manifest of test/validation items per user, by original key."""
    doc = {
        "format": "cascaderec-split",
        "version": 1,
        "target_behavior": dataset.behaviors[-1],
        "test": {dataset.user_keys[u]: dataset.item_keys[i] for u, i in dataset.test_item.items()},
        "validation": {
            dataset.user_keys[u]: dataset.item_keys[i] for u, i in dataset.validation_item.items()
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
