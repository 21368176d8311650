"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every primitive records a backward rule expressed with other primitives, so
calling :func:`grad` with ``create_graph=True`` yields gradients that are
themselves differentiable. That is what lets the meta-learner differentiate
through its own inner gradient step.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from metashot.errors import GradientError, NonFiniteError, ShapeError

_local = threading.local()


def is_grad_enabled():
    return getattr(_local, "grad_enabled", True)


@contextmanager
def set_grad_enabled(flag):
    prev = is_grad_enabled()
    _local.grad_enabled = bool(flag)
    try:
        yield
    finally:
        _local.grad_enabled = prev


def no_grad():
    return set_grad_enabled(False)


@contextmanager
def scope(name):
    """Prefix node labels created inside the block (used in error messages)."""
    stack = getattr(_local, "scopes", None)
    if stack is None:
        stack = _local.scopes = []
    stack.append(name)
    try:
        yield
    finally:
        stack.pop()


def _label(op):
    stack = getattr(_local, "scopes", None)
    if stack:
        return "/".join(stack) + "/" + op
    return op


class Tensor:
    __slots__ = ("data", "requires_grad", "parents", "backward_fn", "op", "__weakref__")

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.parents = ()
        self.backward_fn = None
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ShapeError(self.op, f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data)

    def requires_grad_(self, flag=True):
        self.requires_grad = flag
        return self

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return mul(self, 1.0 / other)
        return mul(self, power(other, -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _node(data, op, parents, backward, check=True):
    label = _label(op)
    # a single reduction propagates any NaN/Inf; confirm before raising since
    # the sum of finite values can itself overflow. Pure data-movement ops
    # cannot create non-finite values and skip the check.
    if check and not np.isfinite(data.sum()) and not np.isfinite(data).all():
        raise NonFiniteError(label)
    out = Tensor(data, op=label)
    if getattr(_local, "grad_enabled", True) and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out.backward_fn = backward
    return out


# ---------------------------------------------------------------- elementwise


def _binary(op, fn, a, b):
    try:
        return fn(a.data, b.data)
    except ValueError:
        raise ShapeError(_label(op), f"cannot broadcast {a.shape} with {b.shape}") from None


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return (
            sum_to(g, a.shape) if a.requires_grad else None,
            sum_to(g, b.shape) if b.requires_grad else None,
        )

    return _node(_binary("add", np.add, a, b), "add", (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return (
            sum_to(g, a.shape) if a.requires_grad else None,
            sum_to(mul(g, -1.0), b.shape) if b.requires_grad else None,
        )

    return _node(_binary("sub", np.subtract, a, b), "sub", (a, b), backward)


def mul(a, b):
    """Elementwise product with numpy broadcasting (also covers scalar scaling)."""
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return (
            sum_to(mul(g, b), a.shape) if a.requires_grad else None,
            sum_to(mul(g, a), b.shape) if b.requires_grad else None,
        )

    return _node(_binary("mul", np.multiply, a, b), "mul", (a, b), backward)


def power(x, p):
    x = as_tensor(x)
    p = float(p)
    if p < 0 and np.any(x.data == 0):
        raise NonFiniteError(_label("power"), "negative power of zero")

    def backward(g):
        return (mul(g, mul(power(x, p - 1.0), p)),)

    return _node(np.power(x.data, p), "power", (x,), backward)


def exp(x):
    x = as_tensor(x)

    def backward(g):
        return (mul(g, out),)

    out = _node(np.exp(x.data), "exp", (x,), backward)
    return out


def log(x):
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise NonFiniteError(_label("log"), "log of non-positive value")

    def backward(g):
        return (mul(g, power(x, -1.0)),)

    return _node(np.log(x.data), "log", (x,), backward)


def abs_(x):
    x = as_tensor(x)
    sign = Tensor(np.sign(x.data))

    def backward(g):
        return (mul(g, sign),)

    return _node(np.abs(x.data), "abs", (x,), backward)


def relu(x):
    x = as_tensor(x)
    # subgradient 0 at the kink
    mask = Tensor((x.data > 0).astype(np.float64))

    def backward(g):
        return (mul(g, mask),)

    return _node(x.data * mask.data, "relu", (x,), backward, check=False)


def sigmoid(x):
    x = as_tensor(x)
    d = x.data
    # split form keeps exp() from overflowing for large |x|
    e = np.exp(-np.abs(d))
    s = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def backward(g):
        return (mul(g, mul(out, sub(1.0, out))),)

    out = _node(s, "sigmoid", (x,), backward)
    return out


# ---------------------------------------------------------------- shape ops


def reshape(x, shape):
    x = as_tensor(x)
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(_label("reshape"), f"cannot reshape {x.shape} to {shape}") from None
    src = x.shape

    def backward(g):
        return (reshape(g, src),)

    return _node(data, "reshape", (x,), backward, check=False)


def transpose(x, axes=None):
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        return (transpose(g, inv),)

    return _node(x.data.transpose(axes), "transpose", (x,), backward, check=False)


def broadcast_to(x, shape):
    x = as_tensor(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    try:
        data = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise ShapeError(_label("broadcast_to"), f"cannot broadcast {x.shape} to {shape}") from None
    src = x.shape

    def backward(g):
        return (sum_to(g, src),)

    return _node(data, "broadcast_to", (x,), backward, check=False)


def sum_to(x, shape):
    """Sum ``x`` down to ``shape``; the adjoint of broadcasting."""
    x = as_tensor(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    axes = list(range(lead))
    for i, n in enumerate(shape):
        if n == 1 and x.shape[lead + i] != 1:
            axes.append(lead + i)
    data = x.data.sum(axis=tuple(axes), keepdims=True)
    if lead:
        data = data.reshape(data.shape[lead:])
    src = x.shape

    def backward(g):
        return (broadcast_to(g, src),)

    return _node(data, "sum_to", (x,), backward, check=False)


def tsum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    if axis is None:
        axes = tuple(range(x.ndim))
    elif isinstance(axis, int):
        axes = (axis % x.ndim,)
    else:
        axes = tuple(a % x.ndim for a in axis)
    data = x.data.sum(axis=axes, keepdims=keepdims)
    kept = tuple(1 if i in axes else n for i, n in enumerate(x.shape))
    src = x.shape

    def backward(g):
        return (broadcast_to(reshape(g, kept), src),)

    return _node(data, "sum", (x,), backward)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    if axis is None:
        n = x.size
    elif isinstance(axis, int):
        n = x.shape[axis]
    else:
        n = int(np.prod([x.shape[a] for a in axis]))
    return mul(tsum(x, axis, keepdims), 1.0 / n)


def take(x, axis, start, stop):
    x = as_tensor(x)
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    src = x.shape

    def backward(g):
        return (embed(g, axis, start, src),)

    return _node(x.data[idx], "take", (x,), backward, check=False)


def embed(x, axis, start, shape):
    """Place ``x`` into a zero tensor of ``shape`` at ``start`` along ``axis``."""
    x = as_tensor(x)
    stop = start + x.shape[axis]
    data = np.zeros(shape)
    idx = [slice(None)] * len(shape)
    idx[axis] = slice(start, stop)
    data[tuple(idx)] = x.data

    def backward(g):
        return (take(g, axis, start, stop),)

    return _node(data, "embed", (x,), backward, check=False)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    nd = tensors[0].ndim
    axis = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or any(
            t.shape[i] != tensors[0].shape[i] for i in range(nd) if i != axis
        ):
            raise ShapeError(_label("concat"), f"incompatible shapes {[u.shape for u in tensors]}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(
            take(g, axis, int(bounds[i]), int(bounds[i + 1])) if t.requires_grad else None
            for i, t in enumerate(tensors)
        )

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return _node(data, "concat", tuple(tensors), backward, check=False)


def flatten(x):
    return reshape(x, (x.shape[0], -1))


# ---------------------------------------------------------------- linear algebra


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(_label("matmul"), f"cannot multiply {a.shape} by {b.shape}")

    def backward(g):
        return (
            matmul(g, transpose(b)) if a.requires_grad else None,
            matmul(transpose(a), g) if b.requires_grad else None,
        )

    return _node(a.data @ b.data, "matmul", (a, b), backward)


def _im2col(x, k):
    """(B, H, W, C) -> (B*H*W, k*k*C) patches of the zero-padded input."""
    B, H, W, C = x.shape
    p = k // 2
    xp = np.zeros((B, H + 2 * p, W + 2 * p, C))
    xp[:, p : p + H, p : p + W] = x
    win = sliding_window_view(xp, (k, k), axis=(1, 2))
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(B * H * W, k * k * C)


def conv2d(x, w):
    """Stride-1 'same' convolution, NHWC input, (k, k, cin, cout) filters."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(_label("conv2d"), f"expected 4-d input and filter, got {x.shape}, {w.shape}")
    k = w.shape[0]
    if w.shape[1] != k or k % 2 != 1:
        raise ShapeError(_label("conv2d"), f"filter must be square with odd size, got {w.shape}")
    if x.shape[3] != w.shape[2]:
        raise ShapeError(
            _label("conv2d"), f"input has {x.shape[3]} channels, filter expects {w.shape[2]}"
        )
    B, H, W, C = x.shape
    cols = x.data.reshape(-1, C) if k == 1 else _im2col(x.data, k)
    data = (cols @ w.data.reshape(k * k * C, -1)).reshape(B, H, W, -1)

    def backward(g):
        return (
            conv2d(g, flip_filter(w)) if x.requires_grad else None,
            conv2d_filter_grad(x, g, k) if w.requires_grad else None,
        )

    return _node(data, "conv2d", (x, w), backward)


def flip_filter(w):
    """Spatially flip a filter bank and swap its in/out channel axes (an involution)."""
    w = as_tensor(w)

    def backward(g):
        return (flip_filter(g),)

    data = np.ascontiguousarray(w.data[::-1, ::-1].transpose(0, 1, 3, 2))
    return _node(data, "flip_filter", (w,), backward, check=False)


def conv2d_filter_grad(x, g, k):
    """Cross-correlation of input and output-gradient: d conv2d / d filter."""
    x, g = as_tensor(x), as_tensor(g)
    C, O = x.shape[3], g.shape[3]
    cols = x.data.reshape(-1, C) if k == 1 else _im2col(x.data, k)
    data = (cols.T @ g.data.reshape(-1, O)).reshape(k, k, C, O)

    def backward(G):
        return (
            conv2d(g, flip_filter(G)) if x.requires_grad else None,
            conv2d(x, G) if g.requires_grad else None,
        )

    return _node(np.ascontiguousarray(data), "conv2d_filter_grad", (x, g), backward)


# ---------------------------------------------------------------- pooling


def _pool_index(d):
    """Index in 0..3 (row-major within each 2x2 window) of the first maximum."""
    q = (d[:, 0::2, 0::2], d[:, 0::2, 1::2], d[:, 1::2, 0::2], d[:, 1::2, 1::2])
    best = q[0].copy()
    idx = np.zeros(best.shape, dtype=np.int64)
    for i in (1, 2, 3):
        better = q[i] > best
        idx[better] = i
        np.maximum(best, q[i], out=best)
    return idx, best


def max_pool2(x):
    """2x2 max-pool, stride 2; ties resolve to the first element in row-major order."""
    x = as_tensor(x)
    B, H, W, C = x.shape
    if H % 2 or W % 2:
        raise ShapeError(_label("max_pool2"), f"spatial size {H}x{W} is not even")
    idx, data = _pool_index(x.data)

    def backward(g):
        return (_unpool(g, idx),)

    return _node(data, "max_pool2", (x,), backward, check=False)


def _unpool(g, idx):
    g = as_tensor(g)
    B, h, w, C = g.shape
    out = np.zeros((B, 2 * h, 2 * w, C))
    gd = g.data
    for i, (r, c) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
        out[:, r::2, c::2] = np.where(idx == i, gd, 0.0)

    def backward(G):
        return (_pool_select(G, idx),)

    return _node(out, "unpool", (g,), backward, check=False)


def _pool_select(x, idx):
    x = as_tensor(x)
    d = x.data
    data = np.zeros(idx.shape)
    for i, (r, c) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
        data = np.where(idx == i, d[:, r::2, c::2], data)

    def backward(g):
        return (_unpool(g, idx),)

    return _node(data, "pool_select", (x,), backward, check=False)


def global_avg_pool(x):
    """P_a: (b, h, w, c) -> (b, 1, 1, c)."""
    return mean(x, axis=(1, 2), keepdims=True)


def upsample2(x):
    """Nearest-neighbour x2 spatial upsampling."""
    x = as_tensor(x)
    B, H, W, C = x.shape
    y = broadcast_to(reshape(x, (B, H, 1, W, 1, C)), (B, H, 2, W, 2, C))
    return reshape(y, (B, 2 * H, 2 * W, C))


def resize(x, rows, cols):
    """Apply fixed interpolation matrices along height (rows) and width (cols).

    ``rows`` is (out_h, in_h), ``cols`` is (out_w, in_w).  Linear in x, so the
    adjoint is the same operation with transposed matrices.
    """
    x = as_tensor(x)
    rows = np.asarray(rows, dtype=np.float64)
    cols = np.asarray(cols, dtype=np.float64)
    if x.ndim != 4 or rows.shape[1] != x.shape[1] or cols.shape[1] != x.shape[2]:
        raise ShapeError(
            _label("resize"), f"matrices {rows.shape}, {cols.shape} do not fit input {x.shape}"
        )
    data = np.einsum("hH,bHWc,wW->bhwc", rows, x.data, cols)

    def backward(g):
        return (resize(g, rows.T, cols.T),)

    return _node(data, "resize", (x,), backward)


# ---------------------------------------------------------------- losses & norms


def softmax(x, axis=-1):
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        gs = mul(g, out)
        return (sub(gs, mul(out, tsum(gs, axis, keepdims=True))),)

    out = _node(s, "softmax", (x,), backward)
    return out


def one_hot(labels, n):
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], n))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy of (b, n) logits against integer labels."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(
            _label("cross_entropy"), f"logits {logits.shape} incompatible with labels {labels.shape}"
        )
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ShapeError(_label("cross_entropy"), "label outside [0, n)")
    d = logits.data
    m = d.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(d - m).sum(axis=1))
    b = d.shape[0]
    data = np.mean(lse - d[np.arange(b), labels])
    target = Tensor(one_hot(labels, d.shape[1]))

    def backward(g):
        return (mul(sub(softmax(logits, axis=1), target), mul(g, 1.0 / b)),)

    return _node(np.asarray(data), "cross_entropy", (logits,), backward)


def mse(a, b):
    d = sub(a, b)
    return mean(mul(d, d))


def _bn_stats(x, axes, eps):
    with scope("batch_norm"):
        mu = mean(x, axes, keepdims=True)
        xc = sub(x, mu)
        inv = power(add(mean(mul(xc, xc), axes, keepdims=True), eps), -0.5)
        return mul(xc, inv), inv


def batch_norm(x, gamma, beta, eps=1e-5):
    """Normalize with the statistics of the current batch, per channel (last axis)."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(_label("batch_norm"), f"affine shapes {gamma.shape}, {beta.shape} vs input {x.shape}")
    axes = tuple(range(x.ndim - 1))
    d = x.data
    mu = d.mean(axis=axes, keepdims=True)
    xc = d - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=axes, keepdims=True) + eps)
    xhat = xc * inv
    red = tuple(range(x.ndim - 1))

    def backward(g):
        if is_grad_enabled():
            # differentiable path for higher-order gradients: rebuild x-hat from x
            xh, iv = _bn_stats(x, axes, eps)
            gm = mean(g, axes, keepdims=True)
            gxm = mean(mul(g, xh), axes, keepdims=True)
            dx = mul(mul(iv, gamma), sub(sub(g, gm), mul(xh, gxm)))
            return (
                dx if x.requires_grad else None,
                tsum(mul(g, xh), red) if gamma.requires_grad else None,
                tsum(g, red) if beta.requires_grad else None,
            )
        gd = g.data
        gm = gd.mean(axis=axes, keepdims=True)
        gxm = (gd * xhat).mean(axis=axes, keepdims=True)
        return (
            Tensor(inv * gamma.data * (gd - gm - xhat * gxm)) if x.requires_grad else None,
            Tensor((gd * xhat).sum(axis=red)) if gamma.requires_grad else None,
            Tensor(gd.sum(axis=red)) if beta.requires_grad else None,
        )

    return _node(xhat * gamma.data + beta.data, "batch_norm", (x, gamma, beta), backward)


def dropout(x, mask):
    """Multiply by an externally generated (already rescaled) constant mask."""
    return mul(x, Tensor(mask))


# ---------------------------------------------------------------- differentiation


def _topo(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def grad(output, inputs, create_graph=False, grad_output=None):
    """Gradients of ``output`` with respect to each tensor in ``inputs``.

    Inputs that the output does not depend on receive zeros. With
    ``create_graph`` the returned tensors are part of a new graph and can be
    differentiated again.
    """
    output = as_tensor(output)
    if grad_output is None:
        if output.size != 1:
            raise GradientError(f"gradient needs a scalar root, got shape {output.shape}")
        grad_output = Tensor(np.ones(output.shape))
    inputs = list(inputs)
    wanted = {id(t) for t in inputs}
    grads = {}
    if output.requires_grad:
        grads[id(output)] = as_tensor(grad_output)
        with set_grad_enabled(create_graph):
            for node in reversed(_topo(output)):
                g = grads.get(id(node))
                if g is None or node.backward_fn is None:
                    continue
                if id(node) not in wanted:
                    del grads[id(node)]
                for parent, pg in zip(node.parents, node.backward_fn(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    prev = grads.get(id(parent))
                    grads[id(parent)] = pg if prev is None else add(prev, pg)
    out = []
    for t in inputs:
        g = grads.get(id(t))
        if g is None:
            g = Tensor(np.zeros(t.shape))
        elif not create_graph:
            g = Tensor(g.data)
        out.append(g)
    return out
