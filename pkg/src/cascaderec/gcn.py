"""Per-behavior embedding propagation over the bipartite graph.

Linear neighborhood aggregation with symmetric normalization and uniform
layer combination; no transforms, no nonlinearity.
"""

from __future__ import annotations


def propagate(tape, graph, e_user, e_item, num_layers):
    """Run ``num_layers`` rounds of normalized neighbor aggregation.

    Layer l+1 user rows are the norm-weighted sums of their layer-l item
    neighbors and vice versa; isolated nodes get zero rows from layer 1 on.
    Returns the per-layer stacks ``(users, items)``, index 0 = inputs.
    """
    if num_layers < 1:
        raise ValueError(f"propagate: num_layers must be >= 1, got {num_layers}")
    users = [e_user]
    items = [e_item]
    for _ in range(num_layers):
        users.append(tape.spmm(graph.adj_ui, graph.adj_iu, items[-1]))
        items.append(tape.spmm(graph.adj_iu, graph.adj_ui, users[-2]))
    return users, items


def combine(tape, layers):
    """Uniform 1/(L+1)-weighted sum of a layer stack."""
    acc = layers[0]
    for layer in layers[1:]:
        acc = tape.add(acc, layer)
    return tape.scale(acc, 1.0 / len(layers))


def encode_behavior(tape, graph, e_user, e_item, num_layers):
    """propagate + combine: the final embeddings of one behavior."""
    users, items = propagate(tape, graph, e_user, e_item, num_layers)
    return combine(tape, users), combine(tape, items)
