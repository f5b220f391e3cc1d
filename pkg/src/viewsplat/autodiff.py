"""Reverse-mode automatic differentiation over dense float64 arrays.

A ``Tape`` records operations as they execute (define-by-run); ``backward``
replays the record in reverse, accumulating adjoints into every node that the
requested root depends on.  Values wrap numpy arrays, so a single recorded
operation covers a whole image or a whole batch of Gaussians, which keeps the
tape short even for dense pipelines.

Constants (``constant(x)`` or any raw scalar/array passed to an op) carry no
tape.  An operation whose inputs are all constants computes its forward result
and records nothing, so the same code path doubles as a plain numpy evaluator.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Tape",
    "Value",
    "constant",
    "as_value",
    "backward",
    "record",
    "finite_difference_check",
    "GradCheckResult",
    # op functions
    "add", "sub", "mul", "div", "neg", "exp", "log", "sqrt", "power",
    "relu", "absval", "sigmoid", "clamp", "matmul", "dot", "l2norm",
    "vsum", "vmean", "reduce_max", "cumsum", "reshape", "transpose",
    "broadcast_to", "concat", "stack", "getitem", "take", "take_along",
    "conv2d", "filter2d", "where_mask", "mask_values", "maximum",
    # extension hooks
    "custom_op", "accumulate",
]


class Tape:
    """Ordered operation record.  Creation order is already topological."""

    def __init__(self):
        self._nodes: list[_Node] = []
        self.leaves: list[Value] = []

    def __len__(self) -> int:
        return len(self._nodes)

    def leaf(self, data) -> "Value":
        """Register a trainable input.  Gradients accumulate on its .grad."""
        v = Value(np.asarray(data, dtype=np.float64), self)
        self._append(_Node(v, (), None))
        self.leaves.append(v)
        return v

    def zero_grad(self) -> None:
        for node in self._nodes:
            node.out.grad = None

    def release(self) -> None:
        """Drop the recorded graph so its arrays free immediately.

        Values and tape reference each other, so a discarded graph waits
        for the cycle collector; with large arrays that lag can exhaust
        memory.  Detaching every recorded value breaks the cycles and
        plain reference counting reclaims the arrays.  The tape cannot run
        backward afterwards; surviving values behave as constants.
        """
        for node in self._nodes:
            node.out.tape = None
            node.out.grad = None
        self._nodes.clear()
        self.leaves.clear()

    def _append(self, node: "_Node") -> None:
        node.out.nid = len(self._nodes)
        self._nodes.append(node)


class _Node:
    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out, inputs, backward_fn):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


class Value:
    """Array node.  ``tape is None`` marks a constant that records nothing."""

    __slots__ = ("data", "grad", "tape", "nid")

    def __init__(self, data: np.ndarray, tape: Tape | None = None):
        self.data = data
        self.grad: np.ndarray | None = None
        self.tape = tape
        self.nid = -1

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Value":
        """Constant copy sharing this node's current data."""
        return Value(self.data, None)

    def __repr__(self):
        kind = "const" if self.tape is None else f"node#{self.nid}"
        return f"Value({kind}, shape={self.data.shape})"

    # -- operator sugar ------------------------------------------------
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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return vsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return vmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def relu(self):
        return relu(self)


def constant(x) -> Value:
    """Wrap data as a gradient-free Value."""
    return Value(np.asarray(x, dtype=np.float64), None)


def as_value(x) -> Value:
    if isinstance(x, Value):
        return x
    return constant(x)


def _merge_tape(op: str, *vals: Value) -> Tape | None:
    tape = None
    for v in vals:
        if v.tape is not None:
            if tape is None:
                tape = v.tape
            elif tape is not v.tape:
                raise ValueError(f"{op}: inputs live on different tapes")
    return tape


def _make(op, tape, data, inputs, backward_fn) -> Value:
    out = Value(data, tape)
    if tape is not None:
        tape._append(_Node(out, inputs, backward_fn))
    return out


def _accum(v: Value, g: np.ndarray) -> None:
    """Add g into v.grad, summing over broadcast axes first."""
    if v.tape is None:
        return
    shape = v.data.shape
    if g.shape != shape:
        extra = g.ndim - len(shape)
        if extra > 0:
            g = g.sum(axis=tuple(range(extra)))
        axes = tuple(
            i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1
        )
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        g = g.reshape(shape)
    if v.grad is None:
        v.grad = np.zeros(shape, dtype=np.float64)
    v.grad += g


def backward(root: Value) -> dict[Value, np.ndarray]:
    """Seed the scalar root with grad 1 and sweep the tape in reverse.

    Every node the root depends on is visited exactly once.  Returns the
    gradient map over the tape's leaves.  Call ``tape.zero_grad()`` before
    re-running from the same root; without a reset adjoints accumulate.
    """
    if root.tape is None:
        raise ValueError("backward: root is a constant with no tape")
    if root.data.size != 1:
        raise ValueError(f"backward: root must be scalar, got shape {root.data.shape}")
    tape = root.tape
    nodes = tape._nodes
    needed = np.zeros(len(nodes), dtype=bool)
    needed[root.nid] = True
    for i in range(root.nid, -1, -1):
        if needed[i]:
            for v in nodes[i].inputs:
                if v.tape is tape:
                    needed[v.nid] = True
    if root.grad is None:
        root.grad = np.zeros_like(root.data)
    root.grad += np.ones_like(root.data)
    for i in range(root.nid, -1, -1):
        node = nodes[i]
        if needed[i] and node.backward_fn is not None and node.out.grad is not None:
            node.backward_fn(node.out.grad)
    return {leaf: leaf.grad for leaf in tape.leaves}


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError as e:
        raise ValueError(
            f"{op}: shapes {a.data.shape} and {b.data.shape} do not broadcast"
        ) from e


def add(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    _broadcast_shape("add", a, b)
    tape = _merge_tape("add", a, b)
    data = a.data + b.data
    if tape is None:
        return Value(data)

    def bwd(g):
        _accum(a, g)
        _accum(b, g)

    return _make("add", tape, data, (a, b), bwd)


def sub(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    _broadcast_shape("sub", a, b)
    tape = _merge_tape("sub", a, b)
    data = a.data - b.data
    if tape is None:
        return Value(data)

    def bwd(g):
        _accum(a, g)
        _accum(b, -g)

    return _make("sub", tape, data, (a, b), bwd)


def mul(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    _broadcast_shape("mul", a, b)
    tape = _merge_tape("mul", a, b)
    data = a.data * b.data
    if tape is None:
        return Value(data)

    def bwd(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _make("mul", tape, data, (a, b), bwd)


def div(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    _broadcast_shape("div", a, b)
    tape = _merge_tape("div", a, b)
    data = a.data / b.data
    if tape is None:
        return Value(data)

    def bwd(g):
        _accum(a, g / b.data)
        _accum(b, -g * a.data / (b.data * b.data))

    return _make("div", tape, data, (a, b), bwd)


def neg(a) -> Value:
    a = as_value(a)
    tape = _merge_tape("neg", a)
    data = -a.data
    if tape is None:
        return Value(data)

    def bwd(g):
        _accum(a, -g)

    return _make("neg", tape, data, (a,), bwd)


def exp(a) -> Value:
    a = as_value(a)
    tape = _merge_tape("exp", a)
    data = np.exp(a.data)
    if tape is None:
        return Value(data)

    def bwd(g):
        _accum(a, g * data)

    return _make("exp", tape, data, (a,), bwd)


def log(a) -> Value:
    a = as_value(a)
    tape = _merge_tape("log", a)
    data = np.log(a.data)
    if tape is None:
        return Value(data)

    def bwd(g):
        _accum(a, g / a.data)

    return _make("log", tape, data, (a,), bwd)


def sqrt(a) -> Value:
    a = as_value(a)
    tape = _merge_tape("sqrt", a)
    data = np.sqrt(a.data)
    if tape is None:
        return Value(data)

    def bwd(g):
        _accum(a, g * (0.5 / data))

    return _make("sqrt", tape, data, (a,), bwd)


def power(a, p) -> Value:
    """a ** p for a constant real exponent p."""
    a = as_value(a)
    if isinstance(p, Value):
        raise TypeError("power: exponent must be a plain number")
    p = float(p)
    tape = _merge_tape("pow", a)
    data = a.data ** p
    if tape is None:
        return Value(data)

    def bwd(g):
        _accum(a, g * p * a.data ** (p - 1.0))

    return _make("pow", tape, data, (a,), bwd)


def relu(a) -> Value:
    """max(x, 0); the subgradient at exactly 0 is 0."""
    a = as_value(a)
    tape = _merge_tape("relu", a)
    data = np.maximum(a.data, 0.0)
    if tape is None:
        return Value(data)
    mask = a.data > 0.0

    def bwd(g):
        _accum(a, g * mask)

    return _make("relu", tape, data, (a,), bwd)


def absval(a) -> Value:
    """|x| with subgradient 0 at x = 0."""
    a = as_value(a)
    tape = _merge_tape("abs", a)
    data = np.abs(a.data)
    if tape is None:
        return Value(data)
    sign = np.sign(a.data)

    def bwd(g):
        _accum(a, g * sign)

    return _make("abs", tape, data, (a,), bwd)


def sigmoid(a) -> Value:
    a = as_value(a)
    tape = _merge_tape("sigmoid", a)
    x = a.data
    data = np.empty_like(x)
    pos = x >= 0
    data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    data[~pos] = ex / (1.0 + ex)
    if tape is None:
        return Value(data)

    def bwd(g):
        _accum(a, g * data * (1.0 - data))

    return _make("sigmoid", tape, data, (a,), bwd)


def clamp(a, lo=None, hi=None) -> Value:
    """Clip to [lo, hi].  Gradient passes only strictly inside the interval."""
    a = as_value(a)
    tape = _merge_tape("clamp", a)
    data = np.clip(a.data, lo, hi)
    if tape is None:
        return Value(data)
    mask = np.ones(a.data.shape, dtype=bool)
    if lo is not None:
        mask &= a.data > lo
    if hi is not None:
        mask &= a.data < hi

    def bwd(g):
        _accum(a, g * mask)

    return _make("clamp", tape, data, (a,), bwd)


def maximum(a, b) -> Value:
    """Elementwise max; ties route the gradient to the first argument."""
    a, b = as_value(a), as_value(b)
    _broadcast_shape("maximum", a, b)
    tape = _merge_tape("maximum", a, b)
    data = np.maximum(a.data, b.data)
    if tape is None:
        return Value(data)
    b_wins = b.data > a.data

    def bwd(g):
        _accum(a, g * ~b_wins)
        _accum(b, g * b_wins)

    return _make("maximum", tape, data, (a, b), bwd)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b) -> Value:
    """np.matmul semantics on stacks of matrices (ndim >= 2 on both sides)."""
    a, b = as_value(a), as_value(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(
            f"matmul: operands must have ndim >= 2, got {a.data.shape} @ {b.data.shape}"
        )
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(
            f"matmul: inner dimensions differ, {a.data.shape} @ {b.data.shape}"
        )
    tape = _merge_tape("matmul", a, b)
    data = a.data @ b.data
    if tape is None:
        return Value(data)

    def bwd(g):
        _accum(a, g @ np.swapaxes(b.data, -1, -2))
        _accum(b, np.swapaxes(a.data, -1, -2) @ g)

    return _make("matmul", tape, data, (a, b), bwd)


def dot(a, b) -> Value:
    """Inner product of two 1-D vectors."""
    a, b = as_value(a), as_value(b)
    if a.ndim != 1 or b.ndim != 1 or a.data.shape != b.data.shape:
        raise ValueError(f"dot: need matching 1-D vectors, got {a.data.shape}, {b.data.shape}")
    tape = _merge_tape("dot", a, b)
    data = np.asarray(a.data @ b.data)
    if tape is None:
        return Value(data)

    def bwd(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _make("dot", tape, data, (a, b), bwd)


def l2norm(a, axis=None, keepdims=False) -> Value:
    """Euclidean norm along an axis.  Zero-norm slices get zero gradient."""
    a = as_value(a)
    tape = _merge_tape("norm", a)
    data = np.sqrt(np.sum(a.data * a.data, axis=axis, keepdims=keepdims))
    if tape is None:
        return Value(data)

    def bwd(g):
        n = data if keepdims or axis is None else np.expand_dims(data, axis)
        gg = g if keepdims or axis is None else np.expand_dims(g, axis)
        safe = np.where(n > 0.0, n, 1.0)
        _accum(a, gg * a.data / safe * (n > 0.0))

    return _make("norm", tape, data, (a,), bwd)


# ---------------------------------------------------------------------------
# reductions and scans
# ---------------------------------------------------------------------------


def vsum(a, axis=None, keepdims=False) -> Value:
    a = as_value(a)
    tape = _merge_tape("sum", a)
    data = np.sum(a.data, axis=axis, keepdims=keepdims)
    if tape is None:
        return Value(np.asarray(data))

    def bwd(g):
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(gg, a.data.shape))

    return _make("sum", tape, np.asarray(data), (a,), bwd)


def vmean(a, axis=None, keepdims=False) -> Value:
    a = as_value(a)
    tape = _merge_tape("mean", a)
    data = np.mean(a.data, axis=axis, keepdims=keepdims)
    count = a.data.size / max(data.size, 1)
    if tape is None:
        return Value(np.asarray(data))

    def bwd(g):
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(gg, a.data.shape) / count)

    return _make("mean", tape, np.asarray(data), (a,), bwd)


def reduce_max(a, axis: int, keepdims=False) -> Value:
    """Max-pool along one axis; ties send the gradient to the lowest index."""
    a = as_value(a)
    tape = _merge_tape("maxpool", a)
    data = np.max(a.data, axis=axis, keepdims=keepdims)
    if tape is None:
        return Value(data)
    idx = np.argmax(a.data, axis=axis)

    def bwd(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        gz = np.zeros_like(a.data)
        np.put_along_axis(gz, np.expand_dims(idx, axis), gg, axis)
        _accum(a, gz)

    return _make("maxpool", tape, data, (a,), bwd)


def cumsum(a, axis: int = 0, exclusive: bool = False) -> Value:
    """Running sum along an axis; ``exclusive`` shifts the result by one."""
    a = as_value(a)
    tape = _merge_tape("cumsum", a)
    inc = np.cumsum(a.data, axis=axis)
    if exclusive:
        data = np.zeros_like(a.data)
        src = [slice(None)] * a.ndim
        dst = [slice(None)] * a.ndim
        src[axis] = slice(None, -1)
        dst[axis] = slice(1, None)
        data[tuple(dst)] = inc[tuple(src)]
    else:
        data = inc
    if tape is None:
        return Value(data)

    def bwd(g):
        rev = [slice(None)] * a.ndim
        rev[axis] = slice(None, None, -1)
        rev = tuple(rev)
        suffix = np.cumsum(g[rev], axis=axis)[rev]  # suffix[i] = sum_{j >= i} g[j]
        if exclusive:
            gz = np.zeros_like(g)
            src = [slice(None)] * a.ndim
            dst = [slice(None)] * a.ndim
            src[axis] = slice(1, None)
            dst[axis] = slice(None, -1)
            gz[tuple(dst)] = suffix[tuple(src)]
            _accum(a, gz)
        else:
            _accum(a, suffix)

    return _make("cumsum", tape, data, (a,), bwd)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------


def reshape(a, shape) -> Value:
    a = as_value(a)
    tape = _merge_tape("reshape", a)
    data = a.data.reshape(shape)
    if tape is None:
        return Value(data)
    old = a.data.shape

    def bwd(g):
        _accum(a, g.reshape(old))

    return _make("reshape", tape, data, (a,), bwd)


def transpose(a, axes) -> Value:
    a = as_value(a)
    tape = _merge_tape("transpose", a)
    data = np.transpose(a.data, axes)
    if tape is None:
        return Value(data)
    inv = np.argsort(axes)

    def bwd(g):
        _accum(a, np.transpose(g, inv))

    return _make("transpose", tape, data, (a,), bwd)


def broadcast_to(a, shape) -> Value:
    a = as_value(a)
    tape = _merge_tape("broadcast", a)
    data = np.broadcast_to(a.data, shape)
    if tape is None:
        return Value(data)

    def bwd(g):
        _accum(a, g)

    return _make("broadcast", tape, np.ascontiguousarray(data), (a,), bwd)


def concat(parts, axis: int = 0) -> Value:
    parts = [as_value(p) for p in parts]
    if not parts:
        raise ValueError("concat: need at least one input")
    tape = _merge_tape("concat", *parts)
    data = np.concatenate([p.data for p in parts], axis=axis)
    if tape is None:
        return Value(data)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            key = [slice(None)] * g.ndim
            key[axis] = slice(lo, hi)
            _accum(p, g[tuple(key)])

    return _make("concat", tape, data, tuple(parts), bwd)


def stack(parts, axis: int = 0) -> Value:
    """Join along a fresh axis (reshape + concat)."""
    expanded = []
    for p in parts:
        p = as_value(p)
        shape = list(p.data.shape)
        shape.insert(axis if axis >= 0 else len(shape) + 1 + axis, 1)
        expanded.append(reshape(p, tuple(shape)))
    return concat(expanded, axis=axis)


def getitem(a, key) -> Value:
    """Basic indexing (ints, slices, ellipsis, None). No integer arrays."""
    a = as_value(a)
    tape = _merge_tape("slice", a)
    data = a.data[key]
    if tape is None:
        return Value(data)

    def bwd(g):
        gz = np.zeros_like(a.data)
        gz[key] += g
        _accum(a, gz)

    return _make("slice", tape, data, (a,), bwd)


def take(a, indices, axis: int = 0) -> Value:
    """Gather whole slices by integer index; duplicates accumulate in reverse."""
    a = as_value(a)
    idx = np.asarray(indices)
    if idx.dtype.kind not in "iu":
        raise ValueError("take: indices must be integers")
    tape = _merge_tape("take", a)
    data = np.take(a.data, idx, axis=axis)
    if tape is None:
        return Value(data)

    def bwd(g):
        gz = np.zeros_like(a.data)
        moved = np.moveaxis(gz, axis, 0)
        gm = np.moveaxis(g, tuple(range(axis, axis + idx.ndim)), tuple(range(idx.ndim)))
        np.add.at(moved, idx, gm)
        _accum(a, gz)

    return _make("take", tape, data, (a,), bwd)


def take_along(a, indices, axis: int) -> Value:
    """np.take_along_axis with scatter-add backward."""
    a = as_value(a)
    idx = np.asarray(indices)
    tape = _merge_tape("take_along", a)
    data = np.take_along_axis(a.data, idx, axis=axis)
    if tape is None:
        return Value(data)

    def bwd(g):
        gz = np.zeros_like(a.data)
        grids = np.ogrid[tuple(slice(s) for s in idx.shape)]
        key = tuple(grids[:axis]) + (idx,) + tuple(grids[axis + 1:])
        np.add.at(gz, key, g)
        _accum(a, gz)

    return _make("take_along", tape, data, (a,), bwd)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def conv2d(x, kernel, bias=None) -> Value:
    """2-D correlation with zero padding and stride 1.

    x: (H, W, Cin); kernel: (kh, kw, Cin, Cout) with odd kh, kw;
    bias: optional (Cout,).  Output (H, W, Cout).
    """
    x, kernel = as_value(x), as_value(kernel)
    if x.ndim != 3 or kernel.ndim != 4:
        raise ValueError(
            f"conv2d: expected x (H,W,Cin) and kernel (kh,kw,Cin,Cout), got {x.data.shape}, {kernel.data.shape}"
        )
    kh, kw, cin, cout = kernel.data.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d: kernel sides must be odd, got ({kh}, {kw})")
    if x.data.shape[2] != cin:
        raise ValueError(
            f"conv2d: input has {x.data.shape[2]} channels, kernel expects {cin}"
        )
    h, w = x.data.shape[:2]
    ph, pw = kh // 2, kw // 2
    inputs = [x, kernel]
    if bias is not None:
        bias = as_value(bias)
        inputs.append(bias)
    tape = _merge_tape("conv2d", *inputs)

    xp = np.pad(x.data, ((ph, ph), (pw, pw), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(0, 1))
    # win: (H, W, Cin, kh, kw) -> columns (H*W, kh*kw*Cin) in kh, kw, Cin order
    cols = np.ascontiguousarray(win.transpose(0, 1, 3, 4, 2)).reshape(h * w, kh * kw * cin)
    data = (cols @ kernel.data.reshape(kh * kw * cin, cout)).reshape(h, w, cout)
    if bias is not None:
        data = data + bias.data
    if tape is None:
        return Value(data)

    def bwd(g):
        g2 = g.reshape(h * w, cout)
        dk = (cols.T @ g2).reshape(kh, kw, cin, cout)
        _accum(kernel, dk)
        gx_pad = np.zeros_like(xp)
        kmat = kernel.data
        for a_ in range(kh):
            for b_ in range(kw):
                gx_pad[a_:a_ + h, b_:b_ + w] += (g2 @ kmat[a_, b_].T).reshape(h, w, cin)
        _accum(x, gx_pad[ph:ph + h, pw:pw + w])
        if bias is not None:
            _accum(bias, g.sum(axis=(0, 1)))

    return _make("conv2d", tape, data, tuple(inputs), bwd)


def filter2d(x, kernel2d: np.ndarray) -> Value:
    """Per-channel correlation with a fixed 2-D kernel, zero padded.

    The kernel is plain data (no gradient); x is (H, W, C) or (H, W).
    """
    x = as_value(x)
    k = np.asarray(kernel2d, dtype=np.float64)
    if k.ndim != 2 or k.shape[0] % 2 == 0 or k.shape[1] % 2 == 0:
        raise ValueError(f"filter2d: kernel must be 2-D with odd sides, got {k.shape}")
    squeeze = x.ndim == 2
    xd = x.data[..., None] if squeeze else x.data
    if xd.ndim != 3:
        raise ValueError(f"filter2d: expected (H,W) or (H,W,C) input, got {x.data.shape}")
    kh, kw = k.shape
    ph, pw = kh // 2, kw // 2
    h, w = xd.shape[:2]
    tape = _merge_tape("filter2d", x)

    def correlate(img, kern):
        pad = np.pad(img, ((ph, ph), (pw, pw), (0, 0)))
        out = np.zeros_like(img)
        for a_ in range(kh):
            for b_ in range(kw):
                kv = kern[a_, b_]
                if kv != 0.0:
                    out += kv * pad[a_:a_ + h, b_:b_ + w]
        return out

    data = correlate(xd, k)
    if squeeze:
        data = data[..., 0]
    if tape is None:
        return Value(data)
    kflip = k[::-1, ::-1]

    def bwd(g):
        gg = g[..., None] if squeeze else g
        gx = correlate(gg, kflip)
        _accum(x, gx[..., 0] if squeeze else gx)

    return _make("filter2d", tape, data, (x,), bwd)


# ---------------------------------------------------------------------------
# convenience compositions
# ---------------------------------------------------------------------------


def where_mask(mask, a, b) -> Value:
    """Select a where mask is truthy, else b.  The mask is fixed data."""
    m = np.asarray(mask, dtype=np.float64)
    return add(mul(as_value(a), m), mul(as_value(b), 1.0 - m))


def mask_values(mask, v) -> Value:
    """Zero rejected lanes of ``v`` by data-level selection.

    ``where_mask`` blends arithmetically, so a non-finite value in a rejected
    lane still poisons the output (NaN times zero is NaN).  Here the rejected
    lanes never touch the result at all: their value is replaced outright and
    their gradient is exactly zero.
    """
    v = as_value(v)
    m = np.asarray(mask, dtype=bool)
    data = np.where(m, v.data, 0.0)

    def bwd(g):
        accumulate(v, np.where(m, g, 0.0))

    return custom_op("mask_values", (v,), data, bwd)


def custom_op(name: str, inputs, data: np.ndarray, backward_fn) -> Value:
    """Register a fused operation with a hand-written gradient rule.

    ``backward_fn(g)`` receives the output adjoint and must push gradients
    into the inputs via ``accumulate``.  With constant-only inputs the node
    is not recorded and ``backward_fn`` is never called.
    """
    tape = _merge_tape(name, *inputs)
    if tape is None:
        return Value(data)
    return _make(name, tape, data, tuple(inputs), backward_fn)


def accumulate(v: Value, g: np.ndarray) -> None:
    """Public adjoint accumulation for custom_op backward rules."""
    _accum(v, g)


_OP_KINDS = None


def record(op_kind: str, *args, **kwargs) -> Value:
    """Apply a named op; the forward result and gradient rule match the kind."""
    global _OP_KINDS
    if _OP_KINDS is None:
        _OP_KINDS = {
            "add": add, "sub": sub, "mul": mul, "div": div, "neg": neg,
            "exp": exp, "log": log, "sqrt": sqrt, "pow": power, "relu": relu,
            "abs": absval, "sigmoid": sigmoid, "clamp": clamp,
            "matmul": matmul, "dot": dot, "norm": l2norm,
            "sum": vsum, "mean": vmean, "maxpool": reduce_max,
            "cumsum": cumsum, "reshape": reshape, "transpose": transpose,
            "broadcast": broadcast_to, "concat": concat, "slice": getitem,
            "take": take, "take_along": take_along,
            "conv2d": conv2d, "filter2d": filter2d, "maximum": maximum,
        }
    if op_kind not in _OP_KINDS:
        raise KeyError(f"record: unknown op-kind {op_kind!r}")
    return _OP_KINDS[op_kind](*args, **kwargs)


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------


@dataclass
class GradCheckResult:
    """Outcome of a central finite-difference sweep."""

    max_rel_error: float
    coords: np.ndarray
    errors: np.ndarray
    analytic: np.ndarray
    numeric: np.ndarray
    failed: list = field(default_factory=list)    # non-finite probes
    skipped: list = field(default_factory=list)   # below the noise floor

    def __repr__(self):
        return (
            f"GradCheckResult(max_rel_error={self.max_rel_error:.3e}, "
            f"checked={len(self.coords)}, failed={len(self.failed)}, "
            f"skipped={len(self.skipped)})"
        )


def finite_difference_check(
    f,
    theta: np.ndarray,
    step: float = 1e-5,
    coords=None,
    negligible_below: float = 0.0,
) -> GradCheckResult:
    """Compare reverse-mode gradients of ``f`` against central differences.

    ``f`` maps a Value (shaped like ``theta``) to a scalar Value; it is called
    once with a tape leaf to obtain the analytic gradient and twice per checked
    coordinate with perturbed constants.  The per-coordinate score is
    |analytic - central| / (|analytic| + |central| + 1e-12), and the result
    reports the max over checked coordinates.  A probe that produces a
    non-finite loss marks its coordinate as failed and scores infinity.
    Coordinates where both magnitudes fall below ``negligible_below`` sit
    under the finite-difference noise floor and are skipped (reported but not
    scored).
    """
    theta = np.asarray(theta, dtype=np.float64)
    tape = Tape()
    leaf = tape.leaf(theta)
    root = f(leaf)
    if root.data.size != 1:
        raise ValueError("finite_difference_check: f must return a scalar")
    if root.tape is None:
        # f ignored theta entirely; the analytic gradient is zero and the
        # probes below still get to confirm that numerically.
        analytic_full = np.zeros(theta.size)
    else:
        backward(root)
        analytic_full = (
            np.zeros(theta.size) if leaf.grad is None else leaf.grad.ravel().copy()
        )

    if coords is None:
        coords = np.arange(theta.size)
    else:
        coords = np.asarray(coords, dtype=int)

    flat = theta.ravel()
    errors = np.zeros(len(coords))
    numeric = np.zeros(len(coords))
    failed: list[int] = []
    skipped: list[int] = []
    checked_any = False
    max_err = 0.0
    for j, i in enumerate(coords):
        probe = flat.copy()
        with np.errstate(all="ignore"):  # non-finite probes are reported, not raised
            probe[i] = flat[i] + step
            fp = float(f(constant(probe.reshape(theta.shape))).data)
            probe[i] = flat[i] - step
            fm = float(f(constant(probe.reshape(theta.shape))).data)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            failed.append(int(i))
            errors[j] = np.inf
            numeric[j] = np.nan
            max_err = np.inf
            continue
        central = (fp - fm) / (2.0 * step)
        numeric[j] = central
        a = analytic_full[i]
        if negligible_below > 0 and abs(a) < negligible_below and abs(central) < negligible_below:
            skipped.append(int(i))
            continue
        err = abs(a - central) / (abs(a) + abs(central) + 1e-12)
        errors[j] = err
        checked_any = True
        max_err = max(max_err, err)
    if not checked_any and not failed:
        max_err = 0.0
    return GradCheckResult(
        max_rel_error=max_err,
        coords=coords,
        errors=errors,
        analytic=analytic_full[coords],
        numeric=numeric,
        failed=failed,
        skipped=skipped,
    )
