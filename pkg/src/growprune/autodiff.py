"""Dense-tensor engine with tape-based reverse-mode differentiation.

Everything is float64. Ops executed while a :class:`Graph` is active are
recorded on its tape in execution order; ``backward`` replays the tape in
reverse, so every record is visited exactly once and gradient accumulation
is deterministic. Ops executed with no active graph run forward-only,
which doubles as inference mode.
"""

from __future__ import annotations

import threading

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "apply_op",
    "elementwise",
    "matmul",
    "transpose",
    "reshape",
    "conv2d",
    "channel_scale",
    "channel_bias",
    "select_step",
    "sum_all",
    "smul",
    "add",
    "sub",
    "mul",
    "sigmoid",
    "tanh",
    "relu",
    "softmax_cross_entropy",
    "backward",
]

_local = threading.local()


def _graph_stack():
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_graph():
    """The innermost graph currently recording on this thread, or None."""
    stack = _graph_stack()
    return stack[-1] if stack else None


class Tensor:
    """Dense n-d array of float64 participating in the autodiff graph.

    Leaf tensors created with ``requires_grad=True`` hold an eagerly
    allocated zero ``grad`` buffer; op outputs get one lazily during
    backward. All stored values must be finite.
    """

    __slots__ = ("data", "requires_grad", "grad", "graph")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.isfinite(np.sum(arr)):
            raise FloatingPointError("tensor holds non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if self.requires_grad else None
        self.graph = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad.fill(0.0)

    def item(self):
        return float(self.data)

    def backward(self):
        if self.graph is None:
            raise ValueError("tensor was not produced under a recording graph")
        backward(self.graph, self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class _Record:
    __slots__ = ("kind", "inputs", "out", "bwd")

    def __init__(self, kind, inputs, out, bwd):
        self.kind = kind
        self.inputs = inputs
        self.out = out
        self.bwd = bwd


class Graph:
    """Tape of operation records in execution order.

    Use as a context manager around the forward pass; a single graph must
    only ever be mutated by one thread.
    """

    def __init__(self):
        self.records = []

    def __enter__(self):
        _graph_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _graph_stack().pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self.records)


def apply_op(kind, inputs, out_data, bwd):
    """Wrap ``out_data`` in a Tensor and record the op on the active graph.

    ``bwd(out_grad) -> tuple of input grads`` (None for inputs that need
    none). Recording only happens when a graph is active and some input
    requires grad.
    """
    out = Tensor(out_data)
    graph = active_graph()
    if graph is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.graph = graph
        graph.records.append(_Record(kind, tuple(inputs), out, bwd))
    return out


def backward(graph, loss):
    """Populate gradients of everything ``loss`` depends on.

    ``loss`` must be scalar. The tape is walked once in reverse; records
    whose output received no gradient are skipped, so leaves feeding only
    dead branches keep their exact-zero grad buffers.
    """
    if loss.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss.grad is None:
        loss.grad = np.zeros_like(loss.data)
    loss.grad += np.ones_like(loss.data)
    for rec in reversed(graph.records):
        out_grad = rec.out.grad
        if out_grad is None:
            continue
        in_grads = rec.bwd(out_grad)
        for tens, g in zip(rec.inputs, in_grads):
            if g is None or not tens.requires_grad:
                continue
            if tens.grad is None:
                tens.grad = np.zeros_like(tens.data)
            tens.grad += g


# ---------------------------------------------------------------------------
# elementwise ops


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _binary_broadcast(a_data, b_data):
    """Validate the supported broadcast: equal shapes, or one side a vector
    matching the other's last axis. Returns (out_shape, reduce_a, reduce_b)
    where reduce_* tells how to collapse the output grad for that side."""
    if a_data.shape == b_data.shape:
        return a_data.shape, None, None
    if b_data.ndim == 1 and a_data.ndim >= 1 and a_data.shape[-1] == b_data.shape[0]:
        axes = tuple(range(a_data.ndim - 1))
        return a_data.shape, None, axes
    if a_data.ndim == 1 and b_data.ndim >= 1 and b_data.shape[-1] == a_data.shape[0]:
        axes = tuple(range(b_data.ndim - 1))
        return b_data.shape, axes, None
    raise ValueError(
        f"elementwise shapes {a_data.shape} and {b_data.shape} are neither equal "
        "nor vector-broadcastable along the last axis"
    )


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _, red_a, red_b = _binary_broadcast(a.data, b.data)

    def bwd(g):
        ga = g if red_a is None else g.sum(axis=red_a)
        gb = g if red_b is None else g.sum(axis=red_b)
        return ga, gb

    return apply_op("add", (a, b), a.data + b.data, bwd)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _, red_a, red_b = _binary_broadcast(a.data, b.data)

    def bwd(g):
        ga = g if red_a is None else g.sum(axis=red_a)
        gb = -g if red_b is None else -g.sum(axis=red_b)
        return ga, gb

    return apply_op("sub", (a, b), a.data - b.data, bwd)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _, red_a, red_b = _binary_broadcast(a.data, b.data)
    ad, bd = a.data, b.data

    def bwd(g):
        ga = g * bd
        gb = g * ad
        if red_a is not None:
            ga = ga.sum(axis=red_a)
        if red_b is not None:
            gb = gb.sum(axis=red_b)
        return ga, gb

    return apply_op("mul", (a, b), ad * bd, bwd)


def smul(a, c):
    """Multiply by a python scalar constant."""
    a = _as_tensor(a)
    c = float(c)
    return apply_op("smul", (a,), a.data * c, lambda g: (g * c,))


def _sigmoid_data(x):
    return 1.0 / (1.0 + np.exp(-np.clip(x, -500.0, 500.0)))


def sigmoid(a):
    a = _as_tensor(a)
    out = _sigmoid_data(a.data)
    return apply_op("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def tanh(a):
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return apply_op("tanh", (a,), out, lambda g: (g * (1.0 - out * out),))


def relu(a):
    a = _as_tensor(a)
    # derivative is exactly 0 in the flat region and at the kink itself
    mask = a.data > 0.0
    return apply_op("relu", (a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,))


_UNARY = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op_kind, a, b=None):
    """Dispatch an elementwise op by name; see module functions for shapes."""
    if op_kind in _UNARY:
        if b is not None:
            raise ValueError(f"{op_kind} is unary")
        return _UNARY[op_kind](a)
    if op_kind in _BINARY:
        if b is None:
            raise ValueError(f"{op_kind} needs two operands")
        return _BINARY[op_kind](a, b)
    raise ValueError(f"unknown elementwise op kind: {op_kind!r}")


# ---------------------------------------------------------------------------
# structural / linear ops


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(
            f"matmul expects rank-2 operands, got {a.shape} and {b.shape}"
        )
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner dimensions disagree: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        return g @ bd.T, ad.T @ g

    return apply_op("matmul", (a, b), ad @ bd, bwd)


def transpose(a):
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ValueError(f"transpose expects rank-2, got {a.shape}")
    return apply_op("transpose", (a,), a.data.T.copy(), lambda g: (g.T.copy(),))


def reshape(a, new_shape):
    a = _as_tensor(a)
    old_shape = a.shape
    out = a.data.reshape(new_shape)
    return apply_op("reshape", (a,), out, lambda g: (g.reshape(old_shape),))


def select_step(a, t):
    """Pick index ``t`` along axis 0 (timestep slicing for sequences)."""
    a = _as_tensor(a)
    shape = a.shape

    def bwd(g):
        full = np.zeros(shape)
        full[t] = g
        return (full,)

    return apply_op("select_step", (a,), a.data[t].copy(), bwd)


def sum_all(a):
    a = _as_tensor(a)
    shape = a.shape
    return apply_op(
        "sum", (a,), np.asarray(np.sum(a.data)), lambda g: (np.broadcast_to(g, shape).copy(),)
    )


def conv2d(x, kernels, stride=1, pad=0):
    """2-D convolution, NCHW input against OIKK kernels.

    Output spatial extent per axis is floor((H + 2*pad - k)/stride) + 1.
    Implemented as an explicit loop over kernel offsets with a channel
    contraction per offset; no transform tricks.
    """
    x, kernels = _as_tensor(x), _as_tensor(kernels)
    if x.data.ndim != 4 or kernels.data.ndim != 4:
        raise ValueError(
            f"conv2d expects NCHW input and OIKK kernels, got {x.shape} and {kernels.shape}"
        )
    n, c, h, w = x.shape
    o, c_k, kh, kw = kernels.shape
    if c_k != c:
        raise ValueError(
            f"kernel input channels ({c_k}) do not match input channels ({c})"
        )
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if pad < 0:
        raise ValueError(f"pad must be >= 0, got {pad}")
    hp, wp = h + 2 * pad, w + 2 * pad
    if kh > hp or kw > wp:
        raise ValueError(
            f"kernel {kh}x{kw} larger than padded input {hp}x{wp}"
        )
    h_out = (hp - kh) // stride + 1
    w_out = (wp - kw) // stride + 1

    if pad:
        xp = np.zeros((n, c, hp, wp))
        xp[:, :, pad : pad + h, pad : pad + w] = x.data
    else:
        xp = x.data
    kd = kernels.data

    out = np.zeros((n, h_out, w_out, o))
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i : i + stride * h_out : stride, j : j + stride * w_out : stride]
            # [n,c,h',w'] x [o,c] -> [n,h',w',o]
            out += np.tensordot(patch, kd[:, :, i, j], axes=([1], [1]))
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def bwd(g):
        # g: [n,o,h',w']
        gk = np.zeros_like(kd)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                patch = xp[:, :, i : i + stride * h_out : stride, j : j + stride * w_out : stride]
                gk[:, :, i, j] = np.tensordot(g, patch, axes=([0, 2, 3], [0, 2, 3]))
                spread = np.tensordot(g, kd[:, :, i, j], axes=([1], [0]))  # [n,h',w',c]
                gxp[:, :, i : i + stride * h_out : stride, j : j + stride * w_out : stride] += (
                    spread.transpose(0, 3, 1, 2)
                )
        gx = gxp[:, :, pad : pad + h, pad : pad + w] if pad else gxp
        return gx, gk

    return apply_op("conv2d", (x, kernels), out, bwd)


def channel_scale(x, scale):
    """Scale every channel of an NCHW tensor by a per-channel factor."""
    x, scale = _as_tensor(x), _as_tensor(scale)
    if x.data.ndim != 4 or scale.data.ndim != 1 or scale.shape[0] != x.shape[1]:
        raise ValueError(
            f"channel_scale expects NCHW and a [C] vector, got {x.shape} and {scale.shape}"
        )
    xd, sd = x.data, scale.data
    out = xd * sd[None, :, None, None]

    def bwd(g):
        return g * sd[None, :, None, None], np.sum(g * xd, axis=(0, 2, 3))

    return apply_op("channel_scale", (x, scale), out, bwd)


def channel_bias(x, bias):
    """Add a per-channel bias to an NCHW tensor."""
    x, bias = _as_tensor(x), _as_tensor(bias)
    if x.data.ndim != 4 or bias.data.ndim != 1 or bias.shape[0] != x.shape[1]:
        raise ValueError(
            f"channel_bias expects NCHW and a [C] vector, got {x.shape} and {bias.shape}"
        )
    out = x.data + bias.data[None, :, None, None]
    return apply_op(
        "channel_bias", (x, bias), out, lambda g: (g, np.sum(g, axis=(0, 2, 3)))
    )


def softmax_cross_entropy(logits, labels):
    """Mean negative log softmax probability of the true class.

    ``labels`` is an int vector of class indices; gradient w.r.t. logits is
    (softmax - onehot) / batch.
    """
    logits = _as_tensor(logits)
    if logits.data.ndim != 2:
        raise ValueError(f"logits must be [batch, classes], got {logits.shape}")
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise ValueError(
            f"labels shape {labels.shape} does not match batch {logits.shape[0]}"
        )
    n, n_classes = logits.shape
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError(
            f"label out of range [0, {n_classes}): {int(labels.min())}..{int(labels.max())}"
        )
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    lse = np.log(np.sum(np.exp(shifted), axis=1)) + zmax[:, 0]
    true_logit = z[np.arange(n), labels]
    loss = np.asarray(np.mean(lse - true_logit))

    def bwd(g):
        softmax = np.exp(shifted)
        softmax /= softmax.sum(axis=1, keepdims=True)
        softmax[np.arange(n), labels] -= 1.0
        return (float(g) * softmax / n,)

    return apply_op("softmax_cross_entropy", (logits,), loss, bwd)
