import numpy as np
import pytest

from cascaderec.attention import (
    attention_logits,
    attention_table,
    attention_weights,
    score_candidates,
    score_pairs,
)
from cascaderec.autodiff import Tape, Tensor
from cascaderec.data import BehaviorGraph
from cascaderec.model import forward_cascade, init_params
from cascaderec.train import TrainingConfig

from conftest import rel_err


def model_fixture(rng, num_factors=2, embed_dim=8, use_attention=True, attn_scale=2.0):
    cfg = TrainingConfig(
        behaviors=["aux", "buy"], embed_dim=embed_dim, num_factors=num_factors,
        layers=[1, 1], attn_scale=attn_scale, seed=21, use_attention=use_attention,
    )
    graphs = [BehaviorGraph(6, 50, *np.nonzero(rng.random((6, 50)) < 0.3))
              for _ in range(2)]
    params = init_params(cfg, 6, 50, rng=np.random.default_rng(8))
    cascade = forward_cascade(Tape(record=False), params, graphs, cfg)
    return cfg, params, cascade


def score_expansion_oracle(cfg, params, cascade, u, i):
    """Scalar expansion of the prediction: per factor, the attention-weighted
    user aggregate dotted with the unweighted item aggregate."""
    K = cfg.num_factors
    width = cfg.embed_dim // K
    total = 0.0
    weights = np.zeros((len(cascade.behavior_user), K))
    for b in range(len(cascade.behavior_user)):
        logits = np.zeros(K)
        for k in range(K):
            eu = cascade.behavior_user[b].values[u, k * width:(k + 1) * width]
            ei = cascade.behavior_item[b].values[i, k * width:(k + 1) * width]
            if cfg.use_attention:
                w = params.named[f"attn.b{b}.w"].values
                bias = params.named[f"attn.b{b}.bias"].values
                h = params.named[f"attn.b{b}.h"].values
                logits[k] = h @ np.tanh(np.concatenate([eu, ei]) @ w + bias)
        if cfg.use_attention:
            e = np.exp(logits - logits.max())
            weights[b] = cfg.attn_scale * e / e.sum()
        else:
            weights[b] = cfg.attn_scale / K
    for k in range(K):
        user_agg = np.zeros(width)
        item_agg = np.zeros(width)
        for b in range(len(cascade.behavior_user)):
            eu = cascade.behavior_user[b].values[u, k * width:(k + 1) * width]
            ei = cascade.behavior_item[b].values[i, k * width:(k + 1) * width]
            user_agg += weights[b, k] * eu
            item_agg += ei
        total += user_agg @ item_agg
    return total


class TestLogits:
    def test_zero_output_projection(self, rng):
        out = attention_logits(
            Tape(), Tensor(rng.normal(size=(3, 2))), Tensor(rng.normal(size=(3, 2))),
            Tensor(rng.normal(size=(4, 5))), Tensor(rng.normal(size=5)),
            Tensor(np.zeros(5)))
        assert np.array_equal(out.values, np.zeros((3, 1)))

    def test_zero_weights_and_bias(self, rng):
        out = attention_logits(
            Tape(), Tensor(rng.normal(size=(3, 2))), Tensor(rng.normal(size=(3, 2))),
            Tensor(np.zeros((4, 5))), Tensor(np.zeros(5)),
            Tensor(rng.normal(size=5)))
        assert np.array_equal(out.values, np.zeros((3, 1)))

    def test_matches_algebra_oracle(self, rng):
        eu, ei = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
        w, bias, h = rng.normal(size=(4, 5)), rng.normal(size=5), rng.normal(size=5)
        out = attention_logits(Tape(), Tensor(eu), Tensor(ei), Tensor(w),
                               Tensor(bias), Tensor(h))
        for n in range(3):
            oracle = h @ np.tanh(np.concatenate([eu[n], ei[n]]) @ w + bias)
            assert abs(out.values[n, 0] - oracle) < 1e-12


class TestWeights:
    @pytest.mark.parametrize("K,rho", [(1, 1.0), (2, 4.0), (4, 4.0), (8, 2.0)])
    def test_equal_logits_uniform(self, K, rho):
        out = attention_weights(Tape(), Tensor(np.full((5, K), 0.3)), rho)
        assert np.array_equal(out.values, np.full((5, K), rho / K))

    def test_single_factor_weight_is_scale(self):
        out = attention_weights(Tape(), Tensor(np.array([[2.7]])), 4.0)
        assert out.values[0, 0] == 4.0

    def test_frozen_values_for_123(self):
        out = attention_weights(Tape(), Tensor(np.array([[1.0, 2.0, 3.0]])), 4.0)
        frozen = np.array([0.3601, 0.9789, 2.6610])  # 4 * softmax(1,2,3)
        assert np.max(np.abs(out.values[0] - frozen)) < 1e-4
        e = np.exp([1.0, 2.0, 3.0])
        assert rel_err(out.values[0], 4.0 * e / e.sum()) < 1e-12

    def test_rows_sum_to_scale(self, rng):
        logits = rng.normal(size=(200, 4)) * 3
        out = attention_weights(Tape(), Tensor(logits), 4.0)
        assert np.max(np.abs(out.values.sum(axis=1) - 4.0)) < 1e-10
        assert (out.values > 0).all()

    def test_monotone_logit_effect(self, rng):
        logits = rng.normal(size=(1, 4))
        base = attention_weights(Tape(), Tensor(logits), 2.0).values[0]
        bumped = logits.copy()
        bumped[0, 1] += 0.5
        after = attention_weights(Tape(), Tensor(bumped), 2.0).values[0]
        assert after[1] > base[1]
        for k in (0, 2, 3):
            assert after[k] < base[k]

    def test_nonpositive_scale_rejected(self):
        with pytest.raises(ValueError, match="attn_scale"):
            attention_weights(Tape(), Tensor(np.zeros((1, 2))), 0.0)


class TestScore:
    def test_single_behavior_single_factor_is_dot_product(self, rng):
        cfg = TrainingConfig(behaviors=["buy"], embed_dim=8, num_factors=1,
                             layers=[1], attn_scale=1.0, seed=3)
        graphs = [BehaviorGraph(4, 6, *np.nonzero(rng.random((4, 6)) < 0.5))]
        params = init_params(cfg, 4, 6)
        tape = Tape(record=False)
        cascade = forward_cascade(tape, params, graphs, cfg)
        got = score_pairs(tape, params, cascade, [2], [3], cfg).values[0]
        want = cascade.behavior_user[0].values[2] @ cascade.behavior_item[0].values[3]
        assert rel_err(got, want) < 1e-12

    def test_zero_item_embeddings_zero_score(self, rng):
        cfg, params, cascade = model_fixture(rng)
        for t in cascade.behavior_item:
            t.values[:] = 0.0
        tape = Tape(record=False)
        got = score_pairs(tape, params, cascade, [0, 1], [2, 3], cfg)
        assert np.array_equal(got.values, np.zeros(2))

    def test_matches_expansion_oracle(self, rng):
        cfg, params, cascade = model_fixture(rng, num_factors=2, embed_dim=4)
        tape = Tape(record=False)
        users = rng.integers(0, 6, size=10)
        items = rng.integers(0, 50, size=10)
        got = score_pairs(tape, params, cascade, users, items, cfg)
        for n in range(10):
            oracle = score_expansion_oracle(cfg, params, cascade, users[n], items[n])
            assert abs(got.values[n] - oracle) < 1e-12

    def test_uniform_weights_without_attention(self, rng):
        cfg, params, cascade = model_fixture(rng, use_attention=False)
        tape = Tape(record=False)
        got = score_pairs(tape, params, cascade, [1], [7], cfg)
        oracle = score_expansion_oracle(cfg, params, cascade, 1, 7)
        assert abs(got.values[0] - oracle) < 1e-12


class TestScoreCandidates:
    def test_duplicate_items_identical_scores(self, rng):
        cfg, params, cascade = model_fixture(rng)
        for t in cascade.behavior_item:
            t.values[9] = t.values[4]
        tape = Tape(record=False)
        scores = score_candidates(tape, params, cascade, 2, [4, 9], cfg)
        assert scores[0] == scores[1]

    def test_single_candidate_equals_pair_score(self, rng):
        cfg, params, cascade = model_fixture(rng)
        tape = Tape(record=False)
        one = score_candidates(tape, params, cascade, 3, [17], cfg)
        pair = score_pairs(tape, params, cascade, [3], [17], cfg)
        assert one[0] == pair.values[0]

    def test_fifty_candidates_match_looped_scores(self, rng):
        cfg, params, cascade = model_fixture(rng)
        tape = Tape(record=False)
        cand = np.arange(50)
        batched = score_candidates(tape, params, cascade, 1, cand, cfg)
        for i in cand:
            single = score_pairs(tape, params, cascade, [1], [i], cfg).values[0]
            assert abs(batched[i] - single) < 1e-12

    def test_chunking_invariant(self, rng):
        cfg, params, cascade = model_fixture(rng)
        tape = Tape(record=False)
        cand = np.arange(50)
        a = score_candidates(tape, params, cascade, 0, cand, cfg, chunk=7)
        b = score_candidates(tape, params, cascade, 0, cand, cfg, chunk=512)
        assert np.array_equal(a, b)

    def test_frozen_attention_scales_linearly_in_item_side(self, rng):
        # with fixed uniform weights the score is linear in item embeddings
        cfg, params, cascade = model_fixture(rng, use_attention=False)
        tape = Tape(record=False)
        base = score_candidates(tape, params, cascade, 2, np.arange(10), cfg)
        for t in cascade.behavior_item:
            t.values *= 3.0
        scaled = score_candidates(tape, params, cascade, 2, np.arange(10), cfg)
        assert rel_err(scaled, 3.0 * base) < 1e-12


class TestAttentionTable:
    def test_rows_sum_to_scale(self, rng):
        cfg, params, cascade = model_fixture(rng, num_factors=4, attn_scale=4.0)
        tape = Tape(record=False)
        users = rng.integers(0, 6, size=20)
        items = rng.integers(0, 50, size=20)
        table = attention_table(tape, params, cascade, users, items, cfg)
        assert np.max(np.abs(table.sum(axis=2) - 4.0)) < 1e-10

    def test_uniform_when_disabled(self, rng):
        cfg, params, cascade = model_fixture(rng, use_attention=False, attn_scale=4.0)
        table = attention_table(Tape(record=False), params, cascade, [0], [1], cfg)
        assert np.array_equal(table, np.full((1, 2, 2), 2.0))
