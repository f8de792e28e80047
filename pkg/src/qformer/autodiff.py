"""Minimal reverse-mode differentiation over numpy arrays.

Values live in plain ``numpy.ndarray`` buffers. Operations executed while a
:class:`Tape` is active (``with Tape() as tape:``) and touching at least one
node with ``requires_grad`` are recorded in execution order; ``tape.backward``
replays them in reverse.

Broadcasting between two nodes is limited to leading batch axes. Constant
operands (numpy arrays or python scalars) may broadcast freely since no
gradient is propagated to them.
"""

from __future__ import annotations

import contextvars
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Node", "Tape", "BackwardError", "ShapeError",
    "const", "param", "active_tape", "record",
    "add", "sub", "mul", "neg", "scale", "matmul", "softmax",
    "leaky_relu", "gelu", "sin", "cos", "exp", "reciprocal", "safe_reciprocal",
    "sum", "mean", "reshape", "transpose", "swapaxes", "getitem", "pad",
    "concat", "stack", "take", "layer_norm", "mean_pool2d", "linear",
    "conv1x1", "depthwise_conv2d", "cross_entropy", "backward",
]


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's shape rule."""


class BackwardError(RuntimeError):
    """Raised on invalid use of :meth:`Tape.backward`."""


_ACTIVE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "qformer_tape", default=None)


def active_tape() -> "Tape | None":
    return _ACTIVE.get()


class Node:
    """A differentiable value handle."""

    __slots__ = ("value", "grad", "requires_grad", "tape", "tape_id", "name",
                 "__weakref__")

    def __init__(self, value, requires_grad=False, name=None):
        self.value = np.asarray(value)
        self.grad = None
        self.requires_grad = requires_grad
        self.tape = None
        self.tape_id = None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def dtype(self):
        return self.value.dtype

    def numpy(self):
        return self.value

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Node{tag}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


class _Op:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of executed operations.

    ``backward`` may be called once; call :meth:`reset` to clear gradients
    and allow another pass over the same record.
    """

    def __init__(self):
        self.ops: list[_Op] = []
        self._consumed = False
        self._touched: list[Node] = []
        self._token = None

    def __enter__(self):
        self._token = _ACTIVE.set(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.reset(self._token)
        self._token = None
        return False

    def __len__(self):
        return len(self.ops)

    def record(self, output: Node, inputs: Sequence[Node], backward_fn):
        output.tape = self
        output.tape_id = len(self.ops)
        self.ops.append(_Op(tuple(inputs), output, backward_fn))

    def backward(self, loss: Node):
        if loss.tape is not self:
            raise BackwardError("loss node is not recorded on this tape")
        if loss.value.size != 1:
            raise BackwardError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self._consumed:
            raise BackwardError("backward already ran on this tape; call reset() first")
        self._consumed = True
        grads = {id(loss): np.ones_like(loss.value)}
        touched = []
        for op in reversed(self.ops[: loss.tape_id + 1]):
            g = grads.pop(id(op.output), None)
            if g is None:
                continue
            op.output.grad = g
            touched.append(op.output)
            in_grads = op.backward(g)
            for node, ng in zip(op.inputs, in_grads):
                if ng is None or not node.requires_grad:
                    continue
                key = id(node)
                if key in grads:
                    grads[key] = grads[key] + ng
                else:
                    grads[key] = ng
        # whatever is left belongs to leaves
        leaves = {}
        for op in self.ops:
            for node in op.inputs:
                if node.tape is None and node.requires_grad:
                    leaves[id(node)] = node
        for key, g in grads.items():
            node = leaves.get(key)
            if node is not None:
                node.grad = g
                touched.append(node)
        self._touched = touched

    def reset(self):
        for node in self._touched:
            node.grad = None
        self._touched = []
        self._consumed = False


def backward(loss: Node):
    """Populate ``.grad`` on every node feeding ``loss``."""
    if loss.tape is None:
        raise BackwardError("loss is detached: it was not computed under an active tape")
    loss.tape.backward(loss)


def const(value, dtype=None) -> Node:
    return Node(np.asarray(value, dtype=dtype))


def param(value, name=None) -> Node:
    return Node(np.array(value), requires_grad=True, name=name)


def _as_node(x, like: Node | None = None) -> Node:
    if isinstance(x, Node):
        return x
    dtype = like.dtype if like is not None else None
    return Node(np.asarray(x, dtype=dtype))


def record(value, inputs: Sequence[Node], backward_fn: Callable) -> Node:
    """Wrap ``value`` as the output of an op; used by ops defined elsewhere."""
    rg = any(n.requires_grad for n in inputs)
    out = Node(value, requires_grad=rg)
    tape = _ACTIVE.get()
    if rg and tape is not None:
        tape.record(out, inputs, backward_fn)
    return out


def _check_leading(a: Node, b: Node):
    if a.shape == b.shape:
        return
    # constants broadcast freely
    if not (a.requires_grad and b.requires_grad):
        try:
            np.broadcast_shapes(a.shape, b.shape)
        except ValueError:
            raise ShapeError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None
        return
    short, long_ = (a.shape, b.shape) if len(a.shape) <= len(b.shape) else (b.shape, a.shape)
    if long_[len(long_) - len(short):] != short:
        raise ShapeError(
            f"only leading-batch broadcasting is supported, got {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- arithmetic

def add(a, b) -> Node:
    a = _as_node(a, b if isinstance(b, Node) else None)
    b = _as_node(b, a)
    _check_leading(a, b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return record(a.value + b.value, (a, b), bw)


def neg(a: Node) -> Node:
    return record(-a.value, (a,), lambda g: (-g,))


def sub(a, b) -> Node:
    return add(a, neg(_as_node(b, a if isinstance(a, Node) else None)))


def mul(a, b) -> Node:
    a = _as_node(a, b if isinstance(b, Node) else None)
    b = _as_node(b, a)
    _check_leading(a, b)
    av, bv = a.value, b.value

    def bw(g):
        ga = _unbroadcast(g * bv, av.shape) if a.requires_grad else None
        gb = _unbroadcast(g * av, bv.shape) if b.requires_grad else None
        return ga, gb

    return record(av * bv, (a, b), bw)


def scale(a: Node, c: float) -> Node:
    c = a.dtype.type(c)
    return record(a.value * c, (a,), lambda g: (g * c,))


def matmul(a: Node, b: Node) -> Node:
    """Batched matrix product over the last two axes."""
    a = _as_node(a)
    b = _as_node(b, a)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    _check_leading(Node(np.empty(a.shape[:-2]), a.requires_grad),
                   Node(np.empty(b.shape[:-2]), b.requires_grad))
    av, bv = a.value, b.value

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape) if b.requires_grad else None
        return ga, gb

    return record(av @ bv, (a, b), bw)


def softmax(x: Node, axis: int = -1) -> Node:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for shape {x.shape}")
    z = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return record(y, (x,), bw)


# --------------------------------------------------------------- elementwise

def leaky_relu(x: Node, slope: float = 0.01) -> Node:
    s = x.dtype.type(slope)
    pos = x.value > 0
    return record(np.where(pos, x.value, x.value * s), (x,),
                  lambda g: (np.where(pos, g, g * s),))


_SQRT1_2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def gelu(x: Node) -> Node:
    """Exact (erf) GELU."""
    v = x.value
    cdf = 0.5 * (1.0 + erf(v * _SQRT1_2))

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * v * v)
        return (g * (cdf + v * pdf),)

    return record((v * cdf).astype(v.dtype, copy=False), (x,), bw)


def sin(x: Node) -> Node:
    v = x.value
    return record(np.sin(v), (x,), lambda g: (g * np.cos(v),))


def cos(x: Node) -> Node:
    v = x.value
    return record(np.cos(v), (x,), lambda g: (-g * np.sin(v),))


def exp(x: Node) -> Node:
    y = np.exp(x.value)
    return record(y, (x,), lambda g: (g * y,))


def reciprocal(x: Node) -> Node:
    y = 1.0 / x.value
    return record(y, (x,), lambda g: (-g * y * y,))


def safe_reciprocal(x: Node, eps: float = 1e-4) -> Node:
    """1/x with |x| clamped to at least ``eps`` (sign of 0 taken as +1).

    The derivative is evaluated at the clamped value and passed straight
    through to ``x``.
    """
    v = x.value
    sign = np.where(v < 0, -1.0, 1.0).astype(v.dtype)
    clamped = np.where(np.abs(v) < eps, sign * v.dtype.type(eps), v)
    y = 1.0 / clamped
    return record(y, (x,), lambda g: (-g * y * y,))


# ---------------------------------------------------------------- reductions

def sum(x: Node, axis=None, keepdims=False) -> Node:  # noqa: A001
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return record(np.asarray(x.value.sum(axis=axis, keepdims=keepdims)), (x,), bw)


def mean(x: Node, axis=None, keepdims=False) -> Node:
    n = x.value.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


# ------------------------------------------------------------------- shaping

def reshape(x: Node, shape) -> Node:
    old = x.shape
    return record(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Node, axes) -> Node:
    inv = np.argsort(axes)
    return record(np.transpose(x.value, axes), (x,), lambda g: (np.transpose(g, inv),))


def swapaxes(x: Node, a: int, b: int) -> Node:
    return record(np.swapaxes(x.value, a, b), (x,), lambda g: (np.swapaxes(g, a, b),))


def getitem(x: Node, index) -> Node:
    """Basic (slice/integer) indexing."""
    shape, dtype = x.shape, x.dtype

    def bw(g):
        out = np.zeros(shape, dtype=dtype)
        out[index] = g
        return (out,)

    return record(x.value[index], (x,), bw)


def pad(x: Node, widths) -> Node:
    """Zero padding; ``widths`` as for ``numpy.pad``."""
    if all(lo == 0 and hi == 0 for lo, hi in widths):
        return x
    sl = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, x.shape))
    return record(np.pad(x.value, widths), (x,), lambda g: (g[sl],))


def concat(xs: Sequence[Node], axis: int = -1) -> Node:
    xs = [_as_node(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return record(np.concatenate([x.value for x in xs], axis=axis), xs, bw)


def stack(xs: Sequence, axis: int = -1) -> Node:
    """Stack nodes (or constants, broadcast to the node shape) along a new axis."""
    ref = next(x for x in xs if isinstance(x, Node))
    nodes = [x if isinstance(x, Node) else
             Node(np.broadcast_to(np.asarray(x, dtype=ref.dtype), ref.shape)) for x in xs]
    out = np.stack([n.value for n in nodes], axis=axis)
    ax = axis if axis >= 0 else out.ndim + axis

    def bw(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(nodes)))

    return record(out, nodes, bw)


def take(x: Node, indices, axis: int = 0) -> Node:
    """Gather along ``axis``; repeated indices accumulate in the backward pass."""
    idx = np.asarray(indices)
    shape = x.shape

    def bw(g):
        out = np.zeros(shape, dtype=g.dtype)
        gm = np.moveaxis(g, list(range(axis, axis + idx.ndim)), list(range(idx.ndim)))
        om = np.moveaxis(out, axis, 0)
        np.add.at(om, idx, gm)
        return (out,)

    return record(np.take(x.value, idx, axis=axis), (x,), bw)


# -------------------------------------------------------------------- layers

def layer_norm(x: Node, weight: Node | None = None, bias: Node | None = None,
               eps: float = 1e-5) -> Node:
    """Normalize over the last axis, then apply an optional affine map."""
    v = x.value
    mu = v.mean(axis=-1, keepdims=True)
    xc = v - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    w = weight.value if weight is not None else None
    y = xhat * w if w is not None else xhat
    if bias is not None:
        y = y + bias.value
    c = v.shape[-1]
    inputs = [x] + [n for n in (weight, bias) if n is not None]

    def bw(g):
        gx_hat = g * w if w is not None else g
        gx = rstd * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                     - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        out = [gx]
        if weight is not None:
            out.append((g * xhat).reshape(-1, c).sum(axis=0))
        if bias is not None:
            out.append(g.reshape(-1, c).sum(axis=0))
        return tuple(out)

    return record(y, inputs, bw)


def mean_pool2d(x: Node, kernel: int, stride: int | None = None) -> Node:
    """Average pooling over (B, H, W, C) maps, no padding."""
    stride = stride or kernel
    if x.ndim != 4:
        raise ShapeError(f"mean_pool2d expects (B, H, W, C), got {x.shape}")
    b, h, w, c = x.shape
    if h < kernel or w < kernel:
        raise ShapeError(f"pool kernel {kernel} larger than map {h}x{w}")
    oh, ow = (h - kernel) // stride + 1, (w - kernel) // stride + 1
    v = x.value
    out = np.zeros((b, oh, ow, c), dtype=v.dtype)
    for dy in range(kernel):
        for dx in range(kernel):
            out += v[:, dy:dy + stride * (oh - 1) + 1:stride, dx:dx + stride * (ow - 1) + 1:stride]
    inv = v.dtype.type(1.0 / (kernel * kernel))
    out *= inv

    def bw(g):
        gx = np.zeros_like(v)
        gs = g * inv
        for dy in range(kernel):
            for dx in range(kernel):
                gx[:, dy:dy + stride * (oh - 1) + 1:stride, dx:dx + stride * (ow - 1) + 1:stride] += gs
        return (gx,)

    return record(out, (x,), bw)


def linear(x: Node, weight: Node, bias: Node | None = None) -> Node:
    """``x @ weight + bias`` on the last axis; weight is (in, out)."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear expects last axis {weight.shape[0]}, got {x.shape}")
    lead = x.shape[:-1]
    x2 = x.value.reshape(-1, x.shape[-1])
    wv = weight.value
    y = x2 @ wv
    if bias is not None:
        y = y + bias.value
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.reshape(-1, wv.shape[1])
        gx = (g2 @ wv.T).reshape(x.shape) if x.requires_grad else None
        out = [gx, x2.T @ g2]
        if bias is not None:
            out.append(g2.sum(axis=0))
        return tuple(out)

    return record(y.reshape(lead + (wv.shape[1],)), inputs, bw)


def conv1x1(x: Node, weight: Node, bias: Node | None = None) -> Node:
    """Pointwise convolution on channel-last maps; weight is (out, in)."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"conv1x1 expects {weight.shape[1]} input channels, got {x.shape[-1]}")
    return linear(x, transpose(weight, (1, 0)), bias)


def depthwise_conv2d(x: Node, weight: Node, bias: Node | None = None) -> Node:
    """Per-channel k x k convolution with same (zero) padding.

    ``x`` is (B, H, W, C), ``weight`` is (k, k, C) with odd k.
    """
    k = weight.shape[0]
    if weight.ndim != 3 or weight.shape[1] != k or k % 2 == 0:
        raise ShapeError(f"depthwise weight must be (k, k, C) with odd k, got {weight.shape}")
    if x.ndim != 4 or x.shape[-1] != weight.shape[-1]:
        raise ShapeError(f"channel mismatch: input {x.shape}, weight {weight.shape}")
    b, h, w, c = x.shape
    r = k // 2
    xp = np.pad(x.value, ((0, 0), (r, r), (r, r), (0, 0)))
    wv = weight.value
    out = np.zeros(x.shape, dtype=x.dtype)
    for dy in range(k):
        for dx in range(k):
            out += xp[:, dy:dy + h, dx:dx + w] * wv[dy, dx]
    if bias is not None:
        out += bias.value
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(wv)
        for dy in range(k):
            for dx in range(k):
                gxp[:, dy:dy + h, dx:dx + w] += g * wv[dy, dx]
                gw[dy, dx] = (g * xp[:, dy:dy + h, dx:dx + w]).sum(axis=(0, 1, 2))
        out_g = [gxp[:, r:r + h, r:r + w], gw]
        if bias is not None:
            out_g.append(g.sum(axis=(0, 1, 2)))
        return tuple(out_g)

    return record(out, inputs, bw)


def cross_entropy(logits: Node, labels) -> Node:
    """Mean softmax cross-entropy of (B, K) logits against integer labels."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy expects (B, K) logits and (B,) labels, "
                         f"got {logits.shape} and {labels.shape}")
    z = logits.value - logits.value.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    n = labels.shape[0]
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def bw(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (g / n),)

    return record(np.asarray(loss, dtype=logits.dtype), (logits,), bw)
