"""Factor blocks and the distance-correlation independence penalty.

Embeddings split into K contiguous column blocks, one latent factor per
block. Dependence between blocks is measured with distance correlation
(pairwise euclidean distance matrices, double centering); the biased
V-statistic estimator matches the classical definition.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tape, Tensor

DCOR_EPS = 1e-12


def split_blocks(tape, e, num_factors):
    """Split (n, d) into K contiguous (n, d/K) column blocks."""
    n_cols = e.shape[1]
    if n_cols % num_factors != 0:
        raise ValueError(
            f"num_factors {num_factors} does not divide embedding width {n_cols}"
        )
    width = n_cols // num_factors
    return [
        tape.slice_cols(e, k * width, (k + 1) * width) for k in range(num_factors)
    ]


def concat_blocks(tape, blocks):
    """Inverse of split_blocks."""
    return tape.concat(blocks, axis=1)


def _centered_distances(tape, x):
    """Double-centered euclidean distance matrix of the rows of x.

    Returns (centered matrix, raw squared distance variance mean(A*A) as a
    float). The diagonal of the distance matrix is masked to exact zero;
    sqrt_eps stabilizes the off-diagonal gradient near coincident rows.
    """
    n = x.shape[0]
    sq_norms = tape.sum(tape.mul(x, x), axis=1, keepdims=True)  # (n, 1)
    gram = tape.matmul(x, tape.transpose(x))
    sq = tape.sub(tape.add(sq_norms, tape.transpose(sq_norms)), tape.scale(gram, 2.0))
    mask = Tensor(1.0 - np.eye(n))
    dist = tape.mul(tape.sqrt_eps(tape.relu(sq), DCOR_EPS), mask)
    row_mean = tape.mean(dist, axis=1, keepdims=True)
    col_mean = tape.mean(dist, axis=0, keepdims=True)
    grand_mean = tape.mean(dist)
    centered = tape.add(tape.sub(tape.sub(dist, row_mean), col_mean), grand_mean)
    dvar2 = float(tape.mean(tape.mul(centered, centered)).values)
    return centered, dvar2


def _dcor_centered(tape, a, b):
    """dCov / sqrt(dVar * dVar') from two centered distance matrices."""
    dcov = tape.sqrt_eps(tape.mean(tape.mul(a, b)), DCOR_EPS)
    dvar_a = tape.sqrt_eps(tape.mean(tape.mul(a, a)), DCOR_EPS)
    dvar_b = tape.sqrt_eps(tape.mean(tape.mul(b, b)), DCOR_EPS)
    return tape.div(dcov, tape.sqrt_eps(tape.mul(dvar_a, dvar_b), DCOR_EPS))


def dcor(tape, x, y):
    """Distance correlation between the row samples of x and y, in [0, 1].

    Degenerate inputs (either side with vanishing distance variance, e.g. a
    constant matrix) return exactly 0 with no gradient.
    """
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"dcor: sample counts differ, {x.shape[0]} vs {y.shape[0]}")
    if x.shape[0] < 2:
        raise ValueError(f"dcor: need at least 2 samples, got {x.shape[0]}")
    ax, vx = _centered_distances(tape, x)
    ay, vy = _centered_distances(tape, y)
    if vx < DCOR_EPS or vy < DCOR_EPS:
        return Tensor(0.0)
    return _dcor_centered(tape, ax, ay)


def block_dcor_sum(tape, e_rows, num_factors):
    """Sum of dcor over all unordered block pairs of one sampled matrix.

    Centers each block's distance matrix once and reuses it across pairs.
    Returns a scalar tensor; zero (constant) when K = 1.
    """
    if num_factors == 1:
        return Tensor(0.0)
    blocks = split_blocks(tape, e_rows, num_factors)
    centered = [_centered_distances(tape, blk) for blk in blocks]
    total = None
    for k in range(num_factors):
        ak, vk = centered[k]
        for kk in range(k + 1, num_factors):
            akk, vkk = centered[kk]
            if vk < DCOR_EPS or vkk < DCOR_EPS:
                continue
            term = _dcor_centered(tape, ak, akk)
            total = term if total is None else tape.add(total, term)
    if total is None:
        return Tensor(0.0)
    return total


def independence_loss(tape, matrices, num_factors):
    """Σ of block_dcor_sum over the sampled embedding matrices.

    ``matrices`` holds the row-sampled user/item embeddings the constraint
    covers (initial plus first-behavior, user and item sides).
    """
    total = None
    for m in matrices:
        term = block_dcor_sum(tape, m, num_factors)
        total = term if total is None else tape.add(total, term)
    if total is None:
        raise ValueError("independence_loss: no matrices given")
    return total


def mean_block_dcor(values, num_factors, sample_rows=None, rng=None):
    """Diagnostic: mean pairwise inter-block dcor of a plain array.

    Forward-only (no recording); optionally subsamples rows with ``rng``
    for bounded cost. Returns 0.0 for K = 1.
    """
    if num_factors == 1:
        return 0.0
    values = np.asarray(values, dtype=np.float64)
    if sample_rows is not None and values.shape[0] > sample_rows:
        idx = rng.choice(values.shape[0], size=sample_rows, replace=False)
        idx.sort()
        values = values[idx]
    tape = Tape(record=False)
    total = block_dcor_sum(tape, Tensor(values), num_factors)
    pairs = num_factors * (num_factors - 1) // 2
    return float(total.values) / pairs
