"""Pairwise-ranking training of the cascade with early stopping.

One epoch is a shuffled pass over every target-behavior training positive,
each paired with one fresh uniform negative the user has no known target
interaction with. The total loss is the BPR term plus L2 over all
trainable parameters plus the weighted independence penalty on the initial
and first-behavior embeddings of the mini-batch rows.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from .attention import score_pairs
from .autodiff import Tape, Tensor
from .data import build_graph
from .disentangle import independence_loss, mean_block_dcor
from .evaluate import evaluate
from .model import CascadeOutput, forward_cascade, init_params, l2_penalty
from .optim import AdamState, adam_step


class ConfigError(ValueError):
    """Invalid or inconsistent training configuration."""


ABLATION_VARIANTS = ("full", "wo_A", "wo_T", "wo_AT")


@dataclass
class TrainingConfig:
    behaviors: list = field(default_factory=lambda: ["view", "cart", "buy"])
    embed_dim: int = 64
    num_factors: int = 4
    attn_scale: float = 4.0
    layers: list = field(default_factory=lambda: [3, 4, 3])
    lr: float = 1e-3
    l2_weight: float = 1e-3
    ind_weight: float = 1e-2
    batch_size: int = 1024
    seed: int = 0
    patience: int = 10
    max_epochs: int = 400
    dcor_sample_cap: int = 1024
    dcor_diag_rows: int = 256
    eval_chunk: int = 2048
    eval_users: int = 0  # 0 = evaluate every holdout user
    use_attention: bool = True
    personalized_transform: bool = True
    post_conv_meta: bool = False
    single_behavior: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not self.behaviors:
            raise ConfigError("behaviors must be nonempty")
        if self.embed_dim % self.num_factors != 0:
            raise ConfigError(
                f"num_factors {self.num_factors} does not divide embed_dim {self.embed_dim}"
            )
        if len(self.layers) != len(self.behaviors):
            raise ConfigError(
                f"layers has {len(self.layers)} entries for {len(self.behaviors)} behaviors"
            )
        if any(l < 1 for l in self.layers):
            raise ConfigError("every layer count must be >= 1")
        if self.attn_scale <= 0:
            raise ConfigError(f"attn_scale must be positive, got {self.attn_scale}")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 0:
            raise ConfigError("batch_size/max_epochs must be >= 1 and patience >= 0")

    def effective_behaviors(self):
        """The chain actually run; single-behavior mode keeps only the target."""
        return self.behaviors[-1:] if self.single_behavior else list(self.behaviors)

    def effective_layers(self):
        return self.layers[-1:] if self.single_behavior else list(self.layers)

    def with_variant(self, variant):
        """Ablation presets over the attention/transform flags."""
        base = dict(use_attention=True, personalized_transform=True,
                    post_conv_meta=False, single_behavior=False)
        flags = {
            "full": dict(),
            "wo_A": dict(use_attention=False),
            "wo_T": dict(personalized_transform=False),
            "wo_AT": dict(use_attention=False, personalized_transform=False),
            "w_post": dict(post_conv_meta=True),
            "single_behavior": dict(single_behavior=True),
        }
        if variant not in flags:
            raise ConfigError(f"unknown variant {variant!r}; choose from {sorted(flags)}")
        return dataclasses.replace(self, **(base | flags[variant]))

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**doc)


def sample_negatives(rng, users, known_target, num_items):
    """One uniform negative per user, rejecting known target interactions."""
    neg = rng.integers(0, num_items, size=len(users))
    for pos in range(len(users)):
        interacted = known_target[users[pos]]
        if len(interacted) >= num_items:
            raise ValueError(f"user {users[pos]} has interacted with every item")
        while neg[pos] in interacted:
            neg[pos] = rng.integers(0, num_items)
    return neg


def bpr_loss(tape, pos_scores, neg_scores):
    """Sum of -ln sigmoid(pos - neg) over the batch (softplus identity)."""
    diff = tape.sub(pos_scores, neg_scores)
    return tape.sum(tape.softplus(tape.neg(diff)))


def total_loss(tape, loss_rec, loss_ind, ind_weight):
    return tape.add(loss_rec, tape.scale(loss_ind, ind_weight))


def _dcor_sample(rng, indices, cap):
    uniq = np.unique(indices)
    if len(uniq) > cap:
        uniq = np.sort(rng.choice(uniq, size=cap, replace=False))
    return uniq


def batch_loss(tape, params, graphs, cfg, users, pos_items, neg_items,
               sample_users=None, sample_items=None):
    """Forward pass and loss for one mini-batch; pure in its inputs.

    Returns (total, loss_rec, loss_ind) tensors. The independence term
    covers the initial and first-behavior embeddings restricted to the
    sampled user/item rows (defaults: unique batch users / pos+neg items).
    """
    cascade = forward_cascade(tape, params, graphs, cfg)
    pos_scores = score_pairs(tape, params, cascade, users, pos_items, cfg)
    neg_scores = score_pairs(tape, params, cascade, users, neg_items, cfg)
    ranking = bpr_loss(tape, pos_scores, neg_scores)
    loss_rec = tape.add(ranking, tape.scale(l2_penalty(tape, params), cfg.l2_weight))
    if cfg.num_factors > 1:
        if sample_users is None:
            sample_users = np.unique(users)
        if sample_items is None:
            sample_items = np.unique(np.concatenate([pos_items, neg_items]))
        matrices = [
            tape.gather_rows(cascade.initial_user, sample_users),
            tape.gather_rows(cascade.initial_item, sample_items),
            tape.gather_rows(cascade.behavior_user[0], sample_users),
            tape.gather_rows(cascade.behavior_item[0], sample_items),
        ]
        loss_ind = independence_loss(tape, matrices, cfg.num_factors)
    else:
        loss_ind = Tensor(0.0)
    return total_loss(tape, loss_rec, loss_ind, cfg.ind_weight), loss_rec, loss_ind


@dataclass
class EpochRecord:
    epoch: int
    loss_rec: float
    loss_ind: float
    val_recall20: float
    dcor_diag: dict  # behavior index -> {"user": float, "item": float}

    def log_line(self):
        """Canonical, deterministic training-log record (diagnostics excluded)."""
        return json.dumps(
            {
                "epoch": self.epoch,
                "loss_rec": self.loss_rec,
                "loss_ind": self.loss_ind,
                "val_recall@20": self.val_recall20,
            },
            sort_keys=True,
        )


@dataclass
class TrainResult:
    params: object  # best-validation ModelParams
    history: list  # EpochRecord per completed epoch
    best_epoch: int
    best_val_recall20: float
    diverged: bool = False

    def log_lines(self):
        return [rec.log_line() for rec in self.history]


def _dcor_diagnostics(cascade, cfg, rng):
    diag = {}
    for b in range(len(cascade.behavior_user)):
        diag[b] = {
            "user": mean_block_dcor(
                cascade.behavior_user[b].values, cfg.num_factors,
                sample_rows=cfg.dcor_diag_rows, rng=rng,
            ),
            "item": mean_block_dcor(
                cascade.behavior_item[b].values, cfg.num_factors,
                sample_rows=cfg.dcor_diag_rows, rng=rng,
            ),
        }
    return diag


def train(cfg, dataset, progress=None):
    """Full training run; returns the best-validation checkpoint and history.

    Deterministic for a fixed config and dataset: shuffling, negative
    sampling, and every diagnostic subsample come from one seeded stream.
    Stops after ``patience`` epochs without validation Recall@20
    improvement; on a non-finite loss, stops immediately and returns the
    last good parameters with ``diverged`` set. ``progress(record, params)``
    runs after every epoch with the live parameters.
    """
    rng = np.random.default_rng(cfg.seed)
    chain = cfg.effective_behaviors()
    offset = dataset.num_behaviors - len(chain)
    graphs = [build_graph(dataset, offset + b) for b in range(len(chain))]
    params = init_params(cfg, dataset.num_users, dataset.num_items, rng=rng)
    state = AdamState(dict(params.items()))

    target = dataset.target
    positives = dataset.train_pairs(target)
    if not positives:
        raise ValueError("no target-behavior training positives; nothing to train on")
    pos_users = np.array([u for u, _ in positives], dtype=np.int64)
    pos_items = np.array([i for _, i in positives], dtype=np.int64)
    known_target = [set() for _ in range(dataset.num_users)]
    for (u, i) in dataset.interactions[target]:
        known_target[u].add(i)

    val_users = sorted(dataset.validation_item)
    if cfg.eval_users and len(val_users) > cfg.eval_users:
        val_users = sorted(rng.choice(val_users, size=cfg.eval_users, replace=False))

    best_values = params.copy_values()
    best_recall = -1.0
    best_epoch = 0
    epochs_since_best = 0
    history = []
    diverged = False

    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(positives))
        sum_rec = 0.0
        sum_ind = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            users = pos_users[batch]
            pos = pos_items[batch]
            neg = sample_negatives(rng, users, known_target, dataset.num_items)
            sample_users = _dcor_sample(rng, users, cfg.dcor_sample_cap)
            sample_items = _dcor_sample(
                rng, np.concatenate([pos, neg]), cfg.dcor_sample_cap
            )
            tape = Tape()
            with np.errstate(over="ignore", invalid="ignore"):
                loss, loss_rec, loss_ind = batch_loss(
                    tape, params, graphs, cfg, users, pos, neg, sample_users, sample_items
                )
            if not np.isfinite(loss.values):
                diverged = True
                break
            params.zero_grads()
            tape.backward(loss)
            adam_step(dict(params.items()), state, cfg.lr)
            sum_rec += float(loss_rec.values)
            sum_ind += float(loss_ind.values)
        if diverged:
            break

        eval_tape = Tape(record=False)
        cascade = forward_cascade(eval_tape, params, graphs, cfg)
        diag_rng = np.random.default_rng(cfg.seed + 7)
        diag = _dcor_diagnostics(cascade, cfg, diag_rng)
        report = evaluate(
            params, dataset, graphs, cfg, cutoffs=(20,), split="validation",
            users=val_users, cascade=cascade,
        )
        val_recall = report.recall[20] if report.num_users else 0.0
        record = EpochRecord(epoch, sum_rec, sum_ind, val_recall, diag)
        history.append(record)
        if progress:
            progress(record, params)

        if val_recall > best_recall:
            best_recall = val_recall
            best_epoch = epoch
            best_values = params.copy_values()
            epochs_since_best = 0
        else:
            epochs_since_best += 1
            if epochs_since_best >= cfg.patience:
                break

    params.load_values(best_values)
    return TrainResult(params, history, best_epoch, max(best_recall, 0.0), diverged)
