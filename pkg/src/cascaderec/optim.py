"""Adam optimizer over named parameter tensors."""

from __future__ import annotations

import numpy as np


class AdamState:
    """First/second moment estimates plus the shared step counter."""

    def __init__(self, params):
        self.m = {name: np.zeros_like(p.values) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.values) for name, p in params.items()}
        self.step = 0


def adam_step(params, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update, in place, from each tensor's .grad.

    Parameters with no gradient this step are treated as zero-gradient
    (moments still decay). Raises on non-finite gradients, naming the
    offending parameter.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.values)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"adam_step: non-finite gradient for '{name}'")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.values -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return params, state
