"""Per-block meta-knowledge and generated feature transformations.

Between consecutive behaviors, each node's block embedding is mapped by a
node-specific matrix emitted from a small shared two-layer network (a
hypernetwork). The network's input concatenates the node's own block from
the current behavior with the normalized first-order-neighbor aggregate of
the previous behavior's blocks, so the transform carries both current and
inherited signal. The ablation path replaces the generated matrices with
one shared matrix per block.
"""

from __future__ import annotations


def meta_knowledge(tape, graph, own_block, prev_other_block, user_side):
    """Concatenate a node's block with its neighbor aggregate, width 2d/K.

    ``prev_other_block`` holds the opposite side's block embeddings from
    the previous behavior; the aggregate weighs each neighbor by
    1/(sqrt(deg_u) * sqrt(deg_i)) over this behavior's graph. Isolated
    nodes aggregate to zero.
    """
    if user_side:
        agg = tape.spmm(graph.adj_ui, graph.adj_iu, prev_other_block)
    else:
        agg = tape.spmm(graph.adj_iu, graph.adj_ui, prev_other_block)
    return tape.concat([own_block, agg], axis=1)


def generate_transforms(tape, knowledge, w1, b1, w2, b2):
    """Run the meta-network: (n, 2d/K) knowledge -> (n, d/K, d/K) matrices.

    Two layers, rectifier hidden, linear output reshaped row-major into one
    square transformation matrix per input row.
    """
    hidden = tape.relu(tape.add(tape.matmul(knowledge, w1), b1))
    flat = tape.add(tape.matmul(hidden, w2), b2)
    n = knowledge.shape[0]
    width = int(round(flat.shape[1] ** 0.5))
    return tape.reshape(flat, (n, width, width))


def personalized_transform(tape, mats, block):
    """Apply one generated matrix per row: out[n] = mats[n] @ block[n]."""
    return tape.rowwise_matvec(mats, block)


def shared_transform(tape, shared_mat, block):
    """Ablation path: the same matrix for every row, out[n] = S @ block[n]."""
    return tape.matmul(block, tape.transpose(shared_mat))
