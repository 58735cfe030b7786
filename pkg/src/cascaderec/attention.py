"""Factor-level attention and the preference score.

Per (user, item, behavior, factor): a one-hidden-layer scorer on the
concatenated user/item blocks yields a logit; a softmax over factors
scaled by the amplification coefficient gives weights that sum to that
coefficient. The score contracts the attention-weighted user aggregate
against the unweighted item aggregate, factor by factor.
"""

from __future__ import annotations

import numpy as np


def attention_logits(tape, u_block, i_block, w, bias, h):
    """Logits h^T tanh(W [e_u ; e_i] + bias) for a batch of pairs, (n, 1)."""
    joint = tape.concat([u_block, i_block], axis=1)
    hidden = tape.tanh(tape.add(tape.matmul(joint, w), bias))
    return tape.matmul(hidden, tape.reshape(h, (h.shape[0], 1)))


def attention_weights(tape, logits, attn_scale):
    """Scaled softmax over the factor axis; rows sum to ``attn_scale``."""
    if attn_scale <= 0:
        raise ValueError(f"attn_scale must be positive, got {attn_scale}")
    return tape.scale(tape.softmax_lastdim(logits), attn_scale)


def pair_attention(tape, params, b, u_blocks, i_blocks, attn_scale):
    """(n, K) attention weights of behavior ``b`` for aligned block lists."""
    w = params.named[f"attn.b{b}.w"]
    bias = params.named[f"attn.b{b}.bias"]
    h = params.named[f"attn.b{b}.h"]
    logits = tape.concat(
        [attention_logits(tape, ub, ib, w, bias, h) for ub, ib in zip(u_blocks, i_blocks)],
        axis=1,
    )
    return attention_weights(tape, logits, attn_scale)


def score_pairs(tape, params, cascade, users, items, cfg):
    """Preference scores for aligned (user, item) index arrays, shape (n,).

    score = sum_k (sum_b a^{(b,k)} e_u^{(b,k)})^T (sum_b e_i^{(b,k)}); the
    item side sums behaviors unweighted. With attention disabled every
    weight is the constant attn_scale / K.
    """
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    num_factors = cfg.num_factors
    width = cfg.embed_dim // num_factors
    user_terms = [None] * num_factors
    item_terms = [None] * num_factors
    uniform = cfg.attn_scale / num_factors
    for b in range(len(cascade.behavior_user)):
        eu = tape.gather_rows(cascade.behavior_user[b], users)
        ei = tape.gather_rows(cascade.behavior_item[b], items)
        u_blocks = [tape.slice_cols(eu, k * width, (k + 1) * width) for k in range(num_factors)]
        i_blocks = [tape.slice_cols(ei, k * width, (k + 1) * width) for k in range(num_factors)]
        if cfg.use_attention:
            weights = pair_attention(tape, params, b, u_blocks, i_blocks, cfg.attn_scale)
        for k in range(num_factors):
            if cfg.use_attention:
                a_k = tape.slice_cols(weights, k, k + 1)
                weighted = tape.mul(a_k, u_blocks[k])
            else:
                weighted = tape.scale(u_blocks[k], uniform)
            user_terms[k] = weighted if user_terms[k] is None else tape.add(user_terms[k], weighted)
            item_terms[k] = i_blocks[k] if item_terms[k] is None else tape.add(item_terms[k], i_blocks[k])
    score = None
    for k in range(num_factors):
        term = tape.sum(tape.mul(user_terms[k], item_terms[k]), axis=1)
        score = term if score is None else tape.add(score, term)
    return score


def score_candidates(tape, params, cascade, user, candidates, cfg, chunk=None):
    """Scores of one user against a candidate item array, as ndarray.

    Attention is recomputed per candidate (the logit concatenates the item
    block, so weights are item-dependent). Candidates are processed in
    chunks to bound peak memory; chunking cannot change the values.
    """
    candidates = np.asarray(candidates, dtype=np.int64)
    chunk = chunk or cfg.eval_chunk
    out = np.empty(len(candidates), dtype=np.float64)
    for start in range(0, len(candidates), chunk):
        cand = candidates[start:start + chunk]
        users = np.full(len(cand), user, dtype=np.int64)
        out[start:start + chunk] = score_pairs(tape, params, cascade, users, cand, cfg).values
    return out


def attention_table(tape, params, cascade, users, items, cfg):
    """Per-(user, item, behavior, factor) weights for aligned index arrays.

    Returns an (n, B, K) array; each (behavior) row sums to attn_scale.
    With attention disabled the table is the uniform constant.
    """
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    num_behaviors = len(cascade.behavior_user)
    num_factors = cfg.num_factors
    width = cfg.embed_dim // num_factors
    table = np.empty((len(users), num_behaviors, num_factors), dtype=np.float64)
    if not cfg.use_attention:
        table[:] = cfg.attn_scale / num_factors
        return table
    for b in range(num_behaviors):
        eu = tape.gather_rows(cascade.behavior_user[b], users)
        ei = tape.gather_rows(cascade.behavior_item[b], items)
        u_blocks = [tape.slice_cols(eu, k * width, (k + 1) * width) for k in range(num_factors)]
        i_blocks = [tape.slice_cols(ei, k * width, (k + 1) * width) for k in range(num_factors)]
        table[:, b, :] = pair_attention(tape, params, b, u_blocks, i_blocks, cfg.attn_scale).values
    return table
