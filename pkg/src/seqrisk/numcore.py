"""Dense float64 tensors with reverse-mode automatic differentiation.

Define-by-run: while a Tape is active (``with Tape() as tape:``), every
operation on tensors that require gradients is recorded in execution
order. ``backward(loss)`` replays the records in reverse and accumulates
gradients into every reachable tensor with ``requires_grad=True``.

Scope is deliberately small: 2-D matmul, pointwise math, row softmax,
axis reductions, and the gather/segment ops needed by recurrent sequence
models. Broadcasting is restricted to scalar-with-tensor and adding a
row vector to a matrix; anything else is a ShapeError. Any op producing
NaN/Inf raises immediately instead of propagating.

A tape and the tensors recorded on it belong to one thread. Distinct
tapes may run on distinct threads; read-only tensors may be shared.
"""

from __future__ import annotations

import threading

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "NonFiniteError",
    "backward",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "sigmoid",
    "tanh",
    "relu",
    "exp",
    "log",
    "softplus",
    "softmax",
    "reduce_sum",
    "reduce_mean",
    "reduce_max",
    "reduce_min",
    "index_rows",
    "take_per_row",
    "segment_mean",
    "concat_cols",
    "slice_cols",
]


class ShapeError(ValueError):
    """Operand shapes do not satisfy an operation's contract."""


class NonFiniteError(FloatingPointError):
    """An operation produced (or received) NaN or Inf."""


_SIGMOID_LO = np.nextafter(0.0, 1.0)
_SIGMOID_HI = np.nextafter(1.0, 0.0)

_local = threading.local()


def _active_tape():
    return getattr(_local, "tape", None)


class Tape:
    """Execution-ordered record of ops for one forward graph.

    Execution order is a topological order by construction, so backward
    simply walks the entries in reverse. A tape supports exactly one
    backward pass.
    """

    def __init__(self):
        self._entries = []  # (output, [(input_tensor, grad_fn), ...])
        self._spent = False

    def __enter__(self):
        self._outer = _active_tape()
        _local.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _local.tape = self._outer
        return False

    def __len__(self):
        return len(self._entries)

    def _record(self, out, pairs):
        self._entries.append((out, pairs))


class Tensor:
    """Dense row-major float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad=False):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor initialized with non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; scalars are lifted to constants.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x):
    if isinstance(x, Tensor):
        return x
    if isinstance(x, (int, float, np.integer, np.floating)):
        return Tensor(float(x))
    raise TypeError(f"expected Tensor or scalar, got {type(x).__name__}")


def _emit(name, out_data, pairs):
    """Wrap an op result, check finiteness, record on the active tape."""
    if not np.all(np.isfinite(out_data)):
        raise NonFiniteError(f"{name} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out._tape = None
    live = [(t, fn) for t, fn in pairs if t.requires_grad]
    out.requires_grad = bool(live)
    tape = _active_tape()
    if live and tape is not None:
        if tape._spent:
            raise RuntimeError("tape already consumed by backward()")
        tape._record(out, live)
        out._tape = tape
    return out


def backward(loss):
    """Populate ``grad`` on every requires_grad tensor reachable from loss."""
    if not isinstance(loss, Tensor):
        raise TypeError("backward() expects a Tensor")
    if loss.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None or len(tape) == 0:
        raise RuntimeError("loss was not recorded on a tape (empty or inactive tape)")
    if tape._spent:
        raise RuntimeError("backward() already ran on this tape")
    tape._spent = True
    loss.grad = np.ones_like(loss.data)
    for out, pairs in reversed(tape._entries):
        g = out.grad
        if g is None:
            continue
        for t, fn in pairs:
            contrib = fn(g)
            t.grad = contrib if t.grad is None else t.grad + contrib


# ---------------------------------------------------------------------------
# binary pointwise ops (equal shapes, scalar, or matrix + row vector)


def _binary(name, a, b, fwd, da, db):
    a = _as_tensor(a)
    b = _as_tensor(b)
    sa, sb = a.data.shape, b.data.shape
    bias_b = a.data.ndim == 2 and (sb == (sa[1],) or sb == (1, sa[1]))
    bias_a = b.data.ndim == 2 and (sa == (sb[1],) or sa == (1, sb[1]))
    if not (sa == sb or a.size == 1 or b.size == 1 or bias_b or bias_a):
        raise ShapeError(f"{name}: incompatible shapes {sa} and {sb}")
    out = fwd(a.data, b.data)

    def _reduce_to(g, shape, size):
        if g.shape == shape:
            return g
        if size == 1:
            return np.sum(g).reshape(shape)
        return np.sum(g, axis=0).reshape(shape)  # row-vector operand

    pairs = [
        (a, lambda g: _reduce_to(da(g, a.data, b.data), sa, a.size)),
        (b, lambda g: _reduce_to(db(g, a.data, b.data), sb, b.size)),
    ]
    return _emit(name, out, pairs)


def add(a, b):
    return _binary("add", a, b, lambda x, y: x + y, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b):
    return _binary("sub", a, b, lambda x, y: x - y, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b):
    return _binary(
        "mul", a, b, lambda x, y: x * y, lambda g, x, y: g * y, lambda g, x, y: g * x
    )


def div(a, b):
    return _binary(
        "div",
        a,
        b,
        lambda x, y: x / y,
        lambda g, x, y: g / y,
        lambda g, x, y: -g * x / (y * y),
    )


def neg(a):
    a = _as_tensor(a)
    return _emit("neg", -a.data, [(a, lambda g: -g)])


# ---------------------------------------------------------------------------
# unary pointwise ops


def sigmoid(a):
    a = _as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    # strictly inside (0, 1) even where float64 saturates
    np.clip(out, _SIGMOID_LO, _SIGMOID_HI, out=out)
    return _emit("sigmoid", out, [(a, lambda g: g * out * (1.0 - out))])


def tanh(a):
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _emit("tanh", out, [(a, lambda g: g * (1.0 - out * out))])


def relu(a):
    a = _as_tensor(a)
    out = np.maximum(a.data, 0.0)
    return _emit("relu", out, [(a, lambda g: g * (a.data > 0.0))])


def exp(a):
    a = _as_tensor(a)
    with np.errstate(over="ignore"):  # overflow becomes NonFiniteError below
        out = np.exp(a.data)
    return _emit("exp", out, [(a, lambda g: g * out)])


def log(a):
    a = _as_tensor(a)
    if np.any(a.data <= 0.0):
        raise ValueError("log of non-positive value")
    return _emit("log", np.log(a.data), [(a, lambda g: g / a.data)])


def softplus(a):
    """ln(1 + e^x), computed stably for large |x|."""
    a = _as_tensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    sig = 1.0 / (1.0 + np.exp(-np.clip(x, -700, 700)))
    return _emit("softplus", out, [(a, lambda g: g * sig)])


# ---------------------------------------------------------------------------
# structured ops


def matmul(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner dimension mismatch: {a.shape} x {b.shape}")
    out = a.data @ b.data
    pairs = [
        (a, lambda g: g @ b.data.T),
        (b, lambda g: a.data.T @ g),
    ]
    return _emit("matmul", out, pairs)


def softmax(logits):
    """Row-wise softmax of an n x K matrix (K >= 2), max-subtracted."""
    t = _as_tensor(logits)
    if t.data.ndim != 2 or t.data.shape[1] < 2:
        raise ShapeError(f"softmax needs an n x K matrix with K >= 2, got {t.shape}")
    z = t.data - np.max(t.data, axis=1, keepdims=True)
    e = np.exp(z)
    out = e / np.sum(e, axis=1, keepdims=True)

    def grad(g):
        dot = np.sum(g * out, axis=1, keepdims=True)
        return out * (g - dot)

    return _emit("softmax", out, [(t, grad)])


def _reduce(name, a, axis, keepdims, fwd, make_grad):
    a = _as_tensor(a)
    if axis is not None and not (-a.data.ndim <= axis < a.data.ndim):
        raise ShapeError(f"{name}: axis {axis} invalid for shape {a.shape}")
    out = fwd(a.data, axis=axis, keepdims=keepdims)
    out = np.asarray(out, dtype=np.float64)
    return _emit(name, out, [(a, make_grad(a.data, axis, keepdims))])


def reduce_sum(a, axis=None, keepdims=False):
    def make(x, axis, keepdims):
        def grad(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return np.broadcast_to(g, x.shape).copy()

        return grad

    return _reduce("sum", a, axis, keepdims, np.sum, make)


def reduce_mean(a, axis=None, keepdims=False):
    def make(x, axis, keepdims):
        n = x.size if axis is None else x.shape[axis]

        def grad(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return np.broadcast_to(g / n, x.shape).copy()

        return grad

    return _reduce("mean", a, axis, keepdims, np.mean, make)


def _extreme_grad(argfn):
    # subgradient convention: all of g flows to the first extremal index
    def make(x, axis, keepdims):
        def grad(g):
            out = np.zeros_like(x)
            if axis is None:
                idx = np.unravel_index(argfn(x), x.shape)
                out[idx] = g.reshape(())
                return out
            sel = argfn(x, axis=axis)
            gg = g if keepdims else np.expand_dims(g, axis)
            np.put_along_axis(out, np.expand_dims(sel, axis), gg, axis=axis)
            return out

        return grad

    return make


def reduce_max(a, axis=None, keepdims=False):
    return _reduce("max", a, axis, keepdims, np.max, _extreme_grad(np.argmax))


def reduce_min(a, axis=None, keepdims=False):
    return _reduce("min", a, axis, keepdims, np.min, _extreme_grad(np.argmin))


def index_rows(a, indices):
    """Gather rows of a 2-D tensor; backward scatter-adds into the source."""
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"index_rows needs a 2-D tensor, got {a.shape}")
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError("index_rows indices must be 1-D")
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[0]):
        raise IndexError(f"row index out of range for {a.data.shape[0]} rows")
    out = a.data[idx]

    def grad(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return ga

    return _emit("index_rows", out, [(a, grad)])


def take_per_row(a, cols):
    """Pick one entry per row of an n x K tensor; result is n x 1."""
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"take_per_row needs a 2-D tensor, got {a.shape}")
    cols = np.asarray(cols, dtype=np.intp)
    n, k = a.data.shape
    if cols.shape != (n,):
        raise ShapeError(f"take_per_row needs {n} column indices, got {cols.shape}")
    if cols.size and (cols.min() < 0 or cols.max() >= k):
        raise IndexError(f"column index out of range for {k} columns")
    rows = np.arange(n)
    out = a.data[rows, cols].reshape(n, 1)

    def grad(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, (rows, cols), g[:, 0])
        return ga

    return _emit("take_per_row", out, [(a, grad)])


def segment_mean(values, segments, num_segments):
    """Mean of rows grouped by segment id; empty segments yield zero rows."""
    v = _as_tensor(values)
    if v.data.ndim != 2:
        raise ShapeError(f"segment_mean needs a 2-D tensor, got {v.shape}")
    seg = np.asarray(segments, dtype=np.intp)
    if seg.shape != (v.data.shape[0],):
        raise ShapeError("segment ids must map one id per row")
    if seg.size and (seg.min() < 0 or seg.max() >= num_segments):
        raise IndexError("segment id out of range")
    counts = np.bincount(seg, minlength=num_segments).astype(np.float64)
    out = np.zeros((num_segments, v.data.shape[1]))
    np.add.at(out, seg, v.data)
    nonzero = counts > 0
    out[nonzero] /= counts[nonzero, None]

    def grad(g):
        return g[seg] / counts[seg, None]

    return _emit("segment_mean", out, [(v, grad)])


def concat_cols(tensors):
    """Concatenate 2-D tensors with equal row counts along columns."""
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat_cols of nothing")
    n = ts[0].data.shape[0]
    for t in ts:
        if t.data.ndim != 2 or t.data.shape[0] != n:
            raise ShapeError("concat_cols needs 2-D tensors with equal row counts")
    out = np.concatenate([t.data for t in ts], axis=1)
    pairs = []
    start = 0
    for t in ts:
        stop = start + t.data.shape[1]
        pairs.append((t, lambda g, a=start, b=stop: g[:, a:b]))
        start = stop
    return _emit("concat_cols", out, pairs)


def slice_cols(a, start, stop):
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"slice_cols needs a 2-D tensor, got {a.shape}")
    if not (0 <= start < stop <= a.data.shape[1]):
        raise ShapeError(f"slice [{start}:{stop}] invalid for {a.shape}")
    out = a.data[:, start:stop].copy()

    def grad(g):
        ga = np.zeros_like(a.data)
        ga[:, start:stop] = g
        return ga

    return _emit("slice_cols", out, [(a, grad)])
