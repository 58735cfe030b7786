"""Dense float64 tensors on a reverse-mode gradient tape.

Just enough machinery for the model: matmul, broadcasting add/sub/mul,
concat/slice/reshape/transpose, gather of embedding rows, tanh/sigmoid/
relu/softplus/log, stabilized sqrt, last-axis softmax, axis reductions,
sparse-matrix products against a constant CSR adjacency, and a batched
per-row matrix-vector product for generated transformation matrices.
"""

from __future__ import annotations

import itertools

import numpy as np

_UIDS = itertools.count()


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an op."""


class Tensor:
    """A float64 array plus a lazily allocated gradient of the same shape."""

    __slots__ = ("values", "grad", "uid")

    def __init__(self, values):
        values = np.asarray(values, dtype=np.float64)
        if values.ndim and not values.flags["C_CONTIGUOUS"]:
            values = np.ascontiguousarray(values)  # 0-d stays 0-d
        self.values = values
        self.grad = None
        self.uid = next(_UIDS)

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    def item(self):
        return float(self.values)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, uid={self.uid})"


class _Node:
    """One tape record: op name, input tensors, output, and the backward rule."""

    __slots__ = ("op", "inputs", "out", "bwd")

    def __init__(self, op, inputs, out, bwd):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.bwd = bwd  # grad_out -> tuple of input grads (None = no grad)


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tape:
    """Records ops for one forward pass; replays them backward for gradients.

    One tape per training step, single-threaded. Construct with
    ``record=False`` for forward-only inference (nothing is retained).
    """

    def __init__(self, record=True):
        self.nodes = []
        self.record = record

    def _emit(self, op, inputs, out_values, bwd):
        out = Tensor(out_values)
        if self.record:
            self.nodes.append(_Node(op, inputs, out, bwd))
        return out

    # ---- elementwise / arithmetic -------------------------------------

    def add(self, a, b):
        try:
            out = a.values + b.values
        except ValueError:
            raise ShapeError(f"add: {a.shape} vs {b.shape}") from None

        def bwd(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

        return self._emit("add", (a, b), out, bwd)

    def sub(self, a, b):
        try:
            out = a.values - b.values
        except ValueError:
            raise ShapeError(f"sub: {a.shape} vs {b.shape}") from None

        def bwd(g):
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

        return self._emit("sub", (a, b), out, bwd)

    def mul(self, a, b):
        try:
            out = a.values * b.values
        except ValueError:
            raise ShapeError(f"mul: {a.shape} vs {b.shape}") from None
        av, bv = a.values, b.values

        def bwd(g):
            return _unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)

        return self._emit("mul", (a, b), out, bwd)

    def div(self, a, b):
        try:
            out = a.values / b.values
        except ValueError:
            raise ShapeError(f"div: {a.shape} vs {b.shape}") from None
        av, bv = a.values, b.values

        def bwd(g):
            return (
                _unbroadcast(g / bv, a.shape),
                _unbroadcast(-g * av / (bv * bv), b.shape),
            )

        return self._emit("div", (a, b), out, bwd)

    def neg(self, a):
        return self._emit("neg", (a,), -a.values, lambda g: (-g,))

    def scale(self, a, c):
        """Multiply by a python-float constant."""
        c = float(c)
        return self._emit("scale", (a,), a.values * c, lambda g: (g * c,))

    def tanh(self, a):
        out = np.tanh(a.values)
        return self._emit("tanh", (a,), out, lambda g: (g * (1.0 - out * out),))

    def sigmoid(self, a):
        out = 0.5 * (1.0 + np.tanh(0.5 * a.values))
        return self._emit("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))

    def relu(self, a):
        mask = a.values > 0.0
        return self._emit("relu", (a,), np.where(mask, a.values, 0.0), lambda g: (g * mask,))

    def softplus(self, a):
        """log(1 + exp(x)), overflow-safe; -log(sigmoid(x)) == softplus(-x)."""
        av = a.values
        out = np.logaddexp(0.0, av)
        sig = 0.5 * (1.0 + np.tanh(0.5 * av))
        return self._emit("softplus", (a,), out, lambda g: (g * sig,))

    def log(self, a):
        av = a.values
        return self._emit("log", (a,), np.log(av), lambda g: (g / av,))

    def sqrt_eps(self, a, eps=1e-12):
        """sqrt(x + eps); the stabilizer keeps the gradient finite at x = 0."""
        if eps < 0.0:
            raise ValueError(f"sqrt_eps: eps must be >= 0, got {eps}")
        out = np.sqrt(a.values + eps)
        return self._emit("sqrt_eps", (a,), out, lambda g: (g / (2.0 * out),))

    def softmax_lastdim(self, a):
        """Softmax over the last axis, computed with max-subtraction."""
        shifted = a.values - a.values.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        out = e / e.sum(axis=-1, keepdims=True)

        def bwd(g):
            dot = (g * out).sum(axis=-1, keepdims=True)
            return (out * (g - dot),)

        return self._emit("softmax_lastdim", (a,), out, bwd)

    # ---- linear algebra -------------------------------------------------

    def matmul(self, a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: {a.shape} vs {b.shape}")
        av, bv = a.values, b.values

        def bwd(g):
            return g @ bv.T, av.T @ g

        return self._emit("matmul", (a, b), av @ bv, bwd)

    def transpose(self, a):
        if a.ndim != 2:
            raise ShapeError(f"transpose: expected 2-d, got {a.shape}")
        return self._emit("transpose", (a,), a.values.T, lambda g: (g.T,))

    def spmm(self, adj, adj_t, x):
        """Sparse @ dense for a constant CSR matrix; adj_t must equal adj.T."""
        if x.ndim != 2 or adj.shape[1] != x.shape[0]:
            raise ShapeError(f"spmm: {adj.shape} vs {x.shape}")
        out = adj @ x.values
        return self._emit("spmm", (x,), out, lambda g: (adj_t @ g,))

    def rowwise_matvec(self, mats, vecs):
        """out[n] = mats[n] @ vecs[n] for mats (n,r,r) and vecs (n,r)."""
        if mats.ndim != 3 or vecs.ndim != 2 or mats.shape[0] != vecs.shape[0] \
                or mats.shape[2] != vecs.shape[1]:
            raise ShapeError(f"rowwise_matvec: {mats.shape} vs {vecs.shape}")
        mv, vv = mats.values, vecs.values
        out = np.einsum("nij,nj->ni", mv, vv)

        def bwd(g):
            return np.einsum("ni,nj->nij", g, vv), np.einsum("nij,ni->nj", mv, g)

        return self._emit("rowwise_matvec", (mats, vecs), out, bwd)

    # ---- structure ------------------------------------------------------

    def concat(self, tensors, axis=-1):
        tensors = tuple(tensors)
        try:
            out = np.concatenate([t.values for t in tensors], axis=axis)
        except ValueError:
            raise ShapeError(
                "concat: " + " vs ".join(str(t.shape) for t in tensors)
            ) from None
        sizes = [t.values.shape[axis] for t in tensors]
        splits = np.cumsum(sizes)[:-1]

        def bwd(g):
            return tuple(np.split(g, splits, axis=axis))

        return self._emit("concat", tensors, out, bwd)

    def slice_cols(self, a, start, stop):
        if a.ndim != 2 or not (0 <= start <= stop <= a.shape[1]):
            raise ShapeError(f"slice_cols: [{start}:{stop}] of {a.shape}")

        def bwd(g):
            full = np.zeros_like(a.values)
            full[:, start:stop] = g
            return (full,)

        return self._emit("slice_cols", (a,), a.values[:, start:stop].copy(), bwd)

    def reshape(self, a, shape):
        old = a.shape
        try:
            out = a.values.reshape(shape)
        except ValueError:
            raise ShapeError(f"reshape: {old} to {shape}") from None
        return self._emit("reshape", (a,), out, lambda g: (g.reshape(old),))

    def gather_rows(self, a, idx):
        """Select rows a[idx]; backward scatter-adds into the source rows."""
        idx = np.asarray(idx, dtype=np.int64)
        if a.ndim != 2 or idx.ndim != 1:
            raise ShapeError(f"gather_rows: {a.shape} with index shape {idx.shape}")

        def bwd(g):
            full = np.zeros_like(a.values)
            np.add.at(full, idx, g)
            return (full,)

        return self._emit("gather_rows", (a,), a.values[idx], bwd)

    # ---- reductions -------------------------------------------------------

    def sum(self, a, axis=None, keepdims=False):
        out = a.values.sum(axis=axis, keepdims=keepdims)

        def bwd(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape).copy(),)

        return self._emit("sum", (a,), out, bwd)

    def mean(self, a, axis=None, keepdims=False):
        out = a.values.mean(axis=axis, keepdims=keepdims)
        count = a.values.size if axis is None else a.shape[axis]

        def bwd(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape) / count,)

        return self._emit("mean", (a,), out, bwd)

    # ---- backward ---------------------------------------------------------

    def backward(self, loss):
        """Assign d(loss)/d(leaf) into .grad of every reachable leaf.

        Visits records in reverse order exactly once; grads of tensors not
        produced by this tape accumulate across calls until zeroed.
        """
        if loss.values.ndim != 0:
            raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
        produced = {node.out.uid for node in self.nodes}
        scratch = {loss.uid: np.ones((), dtype=np.float64)}
        if loss.uid not in produced:
            loss.grad = scratch[loss.uid] if loss.grad is None else loss.grad + 1.0
            return
        for node in reversed(self.nodes):
            g = scratch.pop(node.out.uid, None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.bwd(g)):
                if gi is None:
                    continue
                if inp.uid in produced:
                    if inp.uid in scratch:
                        scratch[inp.uid] = scratch[inp.uid] + gi
                    else:
                        scratch[inp.uid] = gi
                else:
                    inp.grad = gi.copy() if inp.grad is None else inp.grad + gi


def xavier_init(shape, seed=None, rng=None):
    """Uniform Xavier/Glorot tensor on +-sqrt(6 / (fan_in + fan_out))."""
    shape = tuple(int(s) for s in shape)
    if len(shape) < 1:
        raise ValueError("xavier_init: shape needs at least one dimension")
    if rng is None:
        rng = np.random.default_rng(seed)
    fan_in = int(np.prod(shape[:-1])) if len(shape) > 1 else shape[0]
    fan_out = shape[-1]
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=shape))
