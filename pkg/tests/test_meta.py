import numpy as np
import pytest

from cascaderec.autodiff import Tape, Tensor
from cascaderec.data import BehaviorGraph
from cascaderec.meta import (
    generate_transforms,
    meta_knowledge,
    personalized_transform,
    shared_transform,
)
from cascaderec.model import forward_cascade, init_params
from cascaderec.train import TrainingConfig

from conftest import rel_err


def knowledge_oracle(graph, own, prev_other, user_side):
    """Per-node loop: own block next to the degree-normalized neighbor sum."""
    if user_side:
        n, deg_self, deg_other = graph.num_users, graph.deg_u, graph.deg_i
        edges = list(zip(graph.edges_u, graph.edges_i))
    else:
        n, deg_self, deg_other = graph.num_items, graph.deg_i, graph.deg_u
        edges = list(zip(graph.edges_i, graph.edges_u))
    agg = np.zeros((n, prev_other.shape[1]))
    for self_idx, other_idx in edges:
        agg[self_idx] += prev_other[other_idx] / np.sqrt(
            deg_self[self_idx] * deg_other[other_idx]
        )
    return np.hstack([own, agg])


class TestMetaKnowledge:
    def test_isolated_node_gets_zero_aggregate(self, rng):
        g = BehaviorGraph(2, 2, [0], [0])  # user 1 isolated
        own = rng.normal(size=(2, 3))
        prev = rng.normal(size=(2, 3))
        out = meta_knowledge(Tape(), g, Tensor(own), Tensor(prev), user_side=True)
        assert np.array_equal(out.values[1], np.concatenate([own[1], np.zeros(3)]))

    def test_single_edge_unit_degrees(self, rng):
        g = BehaviorGraph(1, 1, [0], [0])
        own = rng.normal(size=(1, 3))
        prev = rng.normal(size=(1, 3))
        out = meta_knowledge(Tape(), g, Tensor(own), Tensor(prev), user_side=True)
        assert rel_err(out.values[0, 3:], prev[0]) < 1e-15

    def test_matches_loop_oracle(self, rng):
        mask = rng.random((6, 5)) < 0.4
        us, its = np.nonzero(mask)
        g = BehaviorGraph(6, 5, us, its)
        own_u = rng.normal(size=(6, 4))
        prev_i = rng.normal(size=(5, 4))
        got = meta_knowledge(Tape(), g, Tensor(own_u), Tensor(prev_i), user_side=True)
        assert np.max(np.abs(got.values - knowledge_oracle(g, own_u, prev_i, True))) < 1e-12
        own_i = rng.normal(size=(5, 4))
        prev_u = rng.normal(size=(6, 4))
        got = meta_knowledge(Tape(), g, Tensor(own_i), Tensor(prev_u), user_side=False)
        assert np.max(np.abs(got.values - knowledge_oracle(g, own_i, prev_u, False))) < 1e-12


class TestGenerateTransforms:
    def test_zero_network_zero_matrices(self, rng):
        t = Tape()
        out = generate_transforms(
            t, Tensor(rng.normal(size=(3, 8))),
            Tensor(np.zeros((8, 4))), Tensor(np.zeros(4)),
            Tensor(np.zeros((4, 16))), Tensor(np.zeros(16)))
        assert np.array_equal(out.values, np.zeros((3, 4, 4)))

    def test_identity_bias_gives_identity_transforms(self, rng):
        t = Tape()
        out = generate_transforms(
            t, Tensor(rng.normal(size=(3, 8))),
            Tensor(rng.normal(size=(8, 4))), Tensor(rng.normal(size=4)),
            Tensor(np.zeros((4, 16))), Tensor(np.eye(4).ravel()))
        for n in range(3):
            assert np.array_equal(out.values[n], np.eye(4))

    def test_matches_two_layer_oracle(self, rng):
        know = rng.normal(size=(5, 8))
        w1, b1 = rng.normal(size=(8, 4)), rng.normal(size=4)
        w2, b2 = rng.normal(size=(4, 16)), rng.normal(size=16)
        out = generate_transforms(Tape(), Tensor(know), Tensor(w1), Tensor(b1),
                                  Tensor(w2), Tensor(b2))
        hidden = np.maximum(know @ w1 + b1, 0.0)
        oracle = (hidden @ w2 + b2).reshape(5, 4, 4)
        assert np.max(np.abs(out.values - oracle)) < 1e-12


class TestApplyTransforms:
    def test_identity_matrices_keep_rows(self, rng):
        block = rng.normal(size=(4, 3))
        mats = np.broadcast_to(np.eye(3), (4, 3, 3)).copy()
        out = personalized_transform(Tape(), Tensor(mats), Tensor(block))
        assert np.array_equal(out.values, block)

    def test_zero_matrices_zero_rows(self, rng):
        out = personalized_transform(Tape(), Tensor(np.zeros((4, 3, 3))),
                                     Tensor(rng.normal(size=(4, 3))))
        assert np.array_equal(out.values, np.zeros((4, 3)))

    def test_matches_per_row_matvec(self, rng):
        mats = rng.normal(size=(4, 3, 3))
        block = rng.normal(size=(4, 3))
        out = personalized_transform(Tape(), Tensor(mats), Tensor(block))
        for n in range(4):
            assert rel_err(out.values[n], mats[n] @ block[n]) < 1e-12

    def test_shared_transform_applies_same_matrix(self, rng):
        s = rng.normal(size=(3, 3))
        block = rng.normal(size=(5, 3))
        out = shared_transform(Tape(), Tensor(s), Tensor(block))
        for n in range(5):
            assert rel_err(out.values[n], s @ block[n]) < 1e-12
        # equal inputs -> equal outputs, regardless of the row
        same = shared_transform(Tape(), Tensor(s),
                                Tensor(np.vstack([block[0], block[0]])))
        assert np.array_equal(same.values[0], same.values[1])


def two_behavior_setup(rng, num_factors=2, post_conv=False, personalized=True):
    cfg = TrainingConfig(
        behaviors=["aux", "buy"], embed_dim=8, num_factors=num_factors,
        layers=[1, 1], attn_scale=2.0, seed=11, post_conv_meta=post_conv,
        personalized_transform=personalized,
    )
    mask0 = rng.random((6, 5)) < 0.5
    mask1 = rng.random((6, 5)) < 0.4
    graphs = [BehaviorGraph(6, 5, *np.nonzero(mask0)),
              BehaviorGraph(6, 5, *np.nonzero(mask1))]
    params = init_params(cfg, 6, 5, rng=np.random.default_rng(3))
    return cfg, graphs, params


class TestVariants:
    def test_post_conv_coincides_when_sources_equal(self, rng):
        # both variants read the same source once the previous behavior's
        # output equals the current one
        from cascaderec.model import _transform_blocks

        cfg, graphs, params = two_behavior_setup(rng, post_conv=False)
        cfg_post, _, _ = two_behavior_setup(rng, post_conv=True)
        own = Tensor(rng.normal(size=(6, 8)))
        other = Tensor(rng.normal(size=(5, 8)))
        tape = Tape(record=False)
        pre = _transform_blocks(tape, params, cfg, 0, "user", graphs[0],
                                own, other, other)
        post = _transform_blocks(tape, params, cfg_post, 0, "user", graphs[0],
                                 own, other, other)
        assert np.array_equal(pre.values, post.values)

    def test_post_conv_uses_current_blocks(self, rng):
        cfg, graphs, params = two_behavior_setup(rng, post_conv=True)
        cfg_pre, _, params_pre = two_behavior_setup(rng, post_conv=False)
        params_pre.load_values(params.copy_values())
        tape = Tape(record=False)
        post = forward_cascade(tape, params, graphs, cfg)
        pre = forward_cascade(tape, params_pre, graphs, cfg_pre)
        # same first behavior, different second-behavior inputs
        assert np.array_equal(post.behavior_user[0].values, pre.behavior_user[0].values)
        assert not np.allclose(post.behavior_user[1].values, pre.behavior_user[1].values)

    def test_personalization_differs_by_user(self, rng):
        cfg, graphs, params = two_behavior_setup(rng)
        width = cfg.embed_dim // cfg.num_factors
        tape = Tape(record=False)
        out = forward_cascade(tape, params, graphs, cfg)
        # two users with identical behavior-0 output rows but different
        # neighborhoods get different generated transforms
        forced = out.behavior_user[0].values.copy()
        forced[1] = forced[0]
        know0 = meta_knowledge(tape, graphs[0], Tensor(forced[:, :width]),
                               Tensor(out.behavior_item[0].values[:, :width]),
                               user_side=True)
        base = "meta.user.t0.k0"
        mats = generate_transforms(
            tape, know0, params.named[f"{base}.w1"], params.named[f"{base}.b1"],
            params.named[f"{base}.w2"], params.named[f"{base}.b2"])
        assert not np.allclose(mats.values[0], mats.values[1])

    def test_block_locality(self, rng):
        # zeroing every block but k in the initial embeddings leaves block
        # k of each behavior's output unchanged
        cfg, graphs, params = two_behavior_setup(rng)
        width = cfg.embed_dim // cfg.num_factors
        tape = Tape(record=False)
        full = forward_cascade(tape, params, graphs, cfg)
        k = 1
        sel = slice(k * width, (k + 1) * width)
        for name in ("user_embed", "item_embed"):
            zeroed = np.zeros_like(params.named[name].values)
            zeroed[:, sel] = params.named[name].values[:, sel]
            params.named[name].values = zeroed
        masked = forward_cascade(tape, params, graphs, cfg)
        for b in range(2):
            assert rel_err(masked.behavior_user[b].values[:, sel],
                           full.behavior_user[b].values[:, sel]) < 1e-12
            assert rel_err(masked.behavior_item[b].values[:, sel],
                           full.behavior_item[b].values[:, sel]) < 1e-12

    def test_shape_chain_composes(self, rng):
        cfg = TrainingConfig(behaviors=["a", "b", "c"], embed_dim=8,
                             num_factors=4, layers=[1, 2, 1], seed=5)
        graphs = [BehaviorGraph(4, 5, *np.nonzero(rng.random((4, 5)) < 0.5))
                  for _ in range(3)]
        params = init_params(cfg, 4, 5)
        out = forward_cascade(Tape(record=False), params, graphs, cfg)
        assert all(t.shape == (4, 8) for t in out.behavior_user)
        assert all(t.shape == (5, 8) for t in out.behavior_item)
