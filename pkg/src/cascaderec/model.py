"""Model parameters and the cascaded multi-behavior forward pass.

The cascade runs one graph encoder per behavior in chain order. Between
behaviors, every factor block is transformed independently (generated
per-node matrices, or one shared matrix per block for the ablation) and
the concatenated blocks seed the next behavior's layer-0 embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, xavier_init
from .disentangle import split_blocks
from .meta import (
    generate_transforms,
    meta_knowledge,
    personalized_transform,
    shared_transform,
)
from .gcn import encode_behavior

_SIDES = ("user", "item")


class ModelParams:
    """All trainable tensors, addressable by name for checkpoints and Adam."""

    def __init__(self, named):
        self.named = dict(named)

    def __iter__(self):
        return iter(self.named.items())

    def items(self):
        return self.named.items()

    def zero_grads(self):
        for p in self.named.values():
            p.zero_grad()

    def copy_values(self):
        return {name: p.values.copy() for name, p in self.named.items()}

    def load_values(self, arrays):
        for name, p in self.named.items():
            p.values = np.ascontiguousarray(arrays[name], dtype=np.float64)


def parameter_shapes(cfg, num_users, num_items):
    """Expected name -> shape map for the active configuration."""
    chain = cfg.effective_behaviors()
    num_behaviors = len(chain)
    d = cfg.embed_dim
    width = d // cfg.num_factors
    shapes = {"user_embed": (num_users, d), "item_embed": (num_items, d)}
    for t in range(num_behaviors - 1):
        for side in _SIDES:
            for k in range(cfg.num_factors):
                if cfg.personalized_transform:
                    base = f"meta.{side}.t{t}.k{k}"
                    shapes[f"{base}.w1"] = (2 * width, width)
                    shapes[f"{base}.b1"] = (width,)
                    shapes[f"{base}.w2"] = (width, width * width)
                    shapes[f"{base}.b2"] = (width * width,)
                else:
                    shapes[f"shared.{side}.t{t}.k{k}"] = (width, width)
    if cfg.use_attention:
        for b in range(num_behaviors):
            shapes[f"attn.b{b}.w"] = (2 * width, d)
            shapes[f"attn.b{b}.bias"] = (d,)
            shapes[f"attn.b{b}.h"] = (d,)
    return shapes


def init_params(cfg, num_users, num_items, rng=None):
    """Xavier-initialize every parameter in a fixed name order."""
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    named = {
        name: xavier_init(shape, rng=rng)
        for name, shape in parameter_shapes(cfg, num_users, num_items).items()
    }
    return ModelParams(named)


def params_from_arrays(cfg, num_users, num_items, arrays):
    """Rebuild ModelParams from checkpoint arrays; missing names are fatal."""
    shapes = parameter_shapes(cfg, num_users, num_items)
    missing = sorted(set(shapes) - set(arrays))
    if missing:
        raise KeyError(f"checkpoint is missing tensors: {', '.join(missing)}")
    named = {}
    for name, shape in shapes.items():
        arr = np.asarray(arrays[name], dtype=np.float64)
        if arr.shape != shape:
            raise ValueError(f"checkpoint tensor {name!r}: shape {arr.shape}, expected {shape}")
        named[name] = Tensor(arr)
    return ModelParams(named)


@dataclass
class CascadeOutput:
    """Embeddings the predictor consumes: initial plus one set per behavior."""

    initial_user: Tensor
    initial_item: Tensor
    behavior_user: list
    behavior_item: list


def _transform_blocks(tape, params, cfg, t, side, graph, own, prev_other, post_other):
    """Map behavior t's blocks of one side into behavior t+1's layer-0 blocks."""
    own_blocks = split_blocks(tape, own, cfg.num_factors)
    source = post_other if cfg.post_conv_meta else prev_other
    source_blocks = split_blocks(tape, source, cfg.num_factors)
    out_blocks = []
    for k, own_blk in enumerate(own_blocks):
        if cfg.personalized_transform:
            knowledge = meta_knowledge(
                tape, graph, own_blk, source_blocks[k], user_side=(side == "user")
            )
            base = f"meta.{side}.t{t}.k{k}"
            mats = generate_transforms(
                tape,
                knowledge,
                params.named[f"{base}.w1"],
                params.named[f"{base}.b1"],
                params.named[f"{base}.w2"],
                params.named[f"{base}.b2"],
            )
            out_blocks.append(personalized_transform(tape, mats, own_blk))
        else:
            shared = params.named[f"shared.{side}.t{t}.k{k}"]
            out_blocks.append(shared_transform(tape, shared, own_blk))
    return tape.concat(out_blocks, axis=1)


def forward_cascade(tape, params, graphs, cfg):
    """Run every behavior encoder and the inter-behavior transforms.

    ``graphs`` aligns with cfg.effective_behaviors(). Behavior b's encoder
    consumes the transformed output of behavior b-1 (the initial
    embeddings for b = 0); meta-knowledge aggregates the previous
    behavior's blocks over behavior b's own graph.
    """
    chain = cfg.effective_behaviors()
    if len(graphs) != len(chain):
        raise ValueError(f"expected {len(chain)} graphs, got {len(graphs)}")
    layer_counts = cfg.effective_layers()
    e_user = params.named["user_embed"]
    e_item = params.named["item_embed"]
    prev_user, prev_item = e_user, e_item
    in_user, in_item = e_user, e_item
    behavior_user, behavior_item = [], []
    for b in range(len(chain)):
        out_user, out_item = encode_behavior(
            tape, graphs[b], in_user, in_item, layer_counts[b]
        )
        behavior_user.append(out_user)
        behavior_item.append(out_item)
        if b < len(chain) - 1:
            in_user = _transform_blocks(
                tape, params, cfg, b, "user", graphs[b], out_user, prev_item, out_item
            )
            in_item = _transform_blocks(
                tape, params, cfg, b, "item", graphs[b], out_item, prev_user, out_user
            )
            prev_user, prev_item = out_user, out_item
    return CascadeOutput(e_user, e_item, behavior_user, behavior_item)


def l2_penalty(tape, params):
    """Sum of squared entries over every trainable tensor."""
    total = None
    for _, p in params.items():
        term = tape.sum(tape.mul(p, p))
        total = term if total is None else tape.add(total, term)
    return total
