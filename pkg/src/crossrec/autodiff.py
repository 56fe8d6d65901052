"""Reverse-mode automatic differentiation on an explicit tape.

Gradients are themselves built out of recorded ops, so calling ``grad`` with
``create_graph=True`` leaves the gradient computation on the tape and a second
``grad`` call differentiates through it (grad-of-grad). Everything is double
precision; tapes are single-writer and thread-local.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager, nullcontext

import numpy as np
from scipy.special import expit


class Tensor:
    """Double-precision array value, optionally recorded on the active tape."""

    __slots__ = ("data",)

    def __init__(self, data):
        self.data = np.asarray(data, dtype=np.float64)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor({self.data!r})"


class Record:
    __slots__ = ("op", "inputs", "out", "vjp", "fwd")

    def __init__(self, op, inputs, out, vjp, fwd):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.vjp = vjp
        self.fwd = fwd


_tls = threading.local()


def _stack():
    try:
        return _tls.stack
    except AttributeError:
        _tls.stack = []
        return _tls.stack


def _active():
    s = _stack()
    return s[-1] if s else None


class Tape:
    """Ordered op records for one forward/backward pass.

    ``retain_graph`` controls whether gradient computations may themselves be
    recorded (required for second-order differentiation).
    """

    def __init__(self, retain_graph=True):
        self.records = []
        self.retain_graph = retain_graph

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False

    def replay(self):
        """Recompute every recorded op from its inputs.

        Returns True iff all recorded outputs are reproduced bit-exactly.
        """
        return all(np.array_equal(r.fwd(), r.out.data) for r in self.records)


@contextmanager
def no_record():
    s = _stack()
    s.append(None)
    try:
        yield
    finally:
        s.pop()


def _out(data, op, inputs, vjp, fwd):
    t = Tensor.__new__(Tensor)
    t.data = data
    tape = _active()
    if tape is not None:
        tape.records.append(Record(op, inputs, t, vjp, fwd))
    return t


def primitive(op, data, inputs, vjp, fwd):
    """Extension hook: record a custom op with a hand-written vjp."""
    return _out(np.asarray(data, dtype=np.float64), op, inputs, vjp, fwd)


def tensor(data):
    return Tensor(data)


def zeros_like(x):
    return Tensor(np.zeros_like(x.data))


def ones_like(x):
    return Tensor(np.ones_like(x.data))


def _check_same(a, b, op):
    if a.data.shape != b.data.shape:
        raise ValueError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    _check_same(a, b, "add")
    return _out(a.data + b.data, "add", (a, b),
                lambda g: (g, g), lambda: a.data + b.data)


def sub(a, b):
    _check_same(a, b, "sub")
    return _out(a.data - b.data, "sub", (a, b),
                lambda g: (g, scale(g, -1.0)), lambda: a.data - b.data)


def mul(a, b):
    _check_same(a, b, "mul")
    return _out(a.data * b.data, "mul", (a, b),
                lambda g: (mul(g, b), mul(g, a)), lambda: a.data * b.data)


def scale(x, c):
    c = float(c)
    return _out(x.data * c, "scale", (x,),
                lambda g: (scale(g, c),), lambda: x.data * c)


def add_scalar(x, c):
    c = float(c)
    return _out(x.data + c, "add_scalar", (x,),
                lambda g: (g,), lambda: x.data + c)


# ---------------------------------------------------------------------------
# linear algebra / structure


def matmul(a, b):
    if a.data.ndim != 2:
        raise ValueError(f"matmul: left operand must be 2-d, got {a.data.shape}")
    if b.data.ndim == 2:
        if a.data.shape[1] != b.data.shape[0]:
            raise ValueError(f"matmul: shape mismatch {a.data.shape} vs {b.data.shape}")

        def vjp(g):
            return (matmul(g, transpose(b)), matmul(transpose(a), g))

        return _out(a.data @ b.data, "matmul", (a, b), vjp, lambda: a.data @ b.data)
    if b.data.ndim == 1:
        if a.data.shape[1] != b.data.shape[0]:
            raise ValueError(f"matmul: shape mismatch {a.data.shape} vs {b.data.shape}")
        m, k = a.data.shape

        def vjp(g):
            return (matmul(reshape(g, (m, 1)), reshape(b, (1, k))),
                    matmul(transpose(a), g))

        return _out(a.data @ b.data, "matmul", (a, b), vjp, lambda: a.data @ b.data)
    raise ValueError(f"matmul: right operand must be 1-d or 2-d, got {b.data.shape}")


def transpose(x):
    if x.data.ndim != 2:
        raise ValueError(f"transpose: need 2-d tensor, got {x.data.shape}")
    return _out(np.ascontiguousarray(x.data.T), "transpose", (x,),
                lambda g: (transpose(g),), lambda: np.ascontiguousarray(x.data.T))


def reshape(x, shape):
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != x.size:
        raise ValueError(f"reshape: cannot reshape {x.data.shape} to {shape}")
    old = x.data.shape
    return _out(x.data.reshape(shape), "reshape", (x,),
                lambda g: (reshape(g, old),), lambda: x.data.reshape(shape))


def expand(x, shape):
    shape = tuple(int(s) for s in shape)
    if x.data.ndim != len(shape):
        raise ValueError(f"expand: rank mismatch {x.data.shape} vs {shape}")
    for d, s in zip(x.data.shape, shape):
        if d != s and d != 1:
            raise ValueError(f"expand: cannot expand {x.data.shape} to {shape}")
    axes = tuple(i for i, (d, s) in enumerate(zip(x.data.shape, shape)) if d == 1 and s != 1)

    def vjp(g):
        return (sum(g, axis=axes, keepdims=True) if axes else g,)

    return _out(np.ascontiguousarray(np.broadcast_to(x.data, shape)), "expand", (x,),
                vjp, lambda: np.ascontiguousarray(np.broadcast_to(x.data, shape)))


def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    if axis is not None and not isinstance(axis, tuple):
        axis = (int(axis),)
    in_shape = x.data.shape

    def vjp(g):
        g2 = g
        if axis is None:
            g2 = reshape(g2, (1,) * len(in_shape)) if in_shape else g2
        elif not keepdims:
            kshape = tuple(1 if i in axis else d for i, d in enumerate(in_shape))
            g2 = reshape(g2, kshape)
        return (expand(g2, in_shape) if in_shape else g2,)

    data = np.sum(x.data, axis=axis, keepdims=keepdims)

    return _out(data, "sum", (x,), vjp,
                lambda: np.sum(x.data, axis=axis, keepdims=keepdims))


def mean(x, axis=None, keepdims=False):
    total = sum(x, axis=axis, keepdims=keepdims)
    return scale(total, total.size / x.size)


def concat(tensors, axis):
    tensors = tuple(tensors)
    if not tensors:
        raise ValueError("concat: empty input list")
    axis = int(axis)
    rank = tensors[0].data.ndim
    for t in tensors:
        if t.data.ndim != rank:
            raise ValueError(f"concat: rank mismatch {t.data.shape} vs {tensors[0].data.shape}")
    offsets = np.cumsum([0] + [t.data.shape[axis] for t in tensors])

    def vjp(g):
        return tuple(slice_axis(g, axis, offsets[i], offsets[i + 1])
                     for i in range(len(tensors)))

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return _out(data, "concat", tensors, vjp,
                lambda: np.concatenate([t.data for t in tensors], axis=axis))


def slice_axis(x, axis, start, stop):
    axis = int(axis)
    start, stop = int(start), int(stop)
    dim = x.data.shape[axis]
    if not (0 <= start <= stop <= dim):
        raise ValueError(f"slice_axis: range [{start}, {stop}) out of bounds for dim {dim}")
    index = (slice(None),) * axis + (slice(start, stop),)

    def vjp(g):
        parts = []
        if start > 0:
            shape = list(x.data.shape)
            shape[axis] = start
            parts.append(Tensor(np.zeros(shape)))
        parts.append(g)
        if stop < dim:
            shape = list(x.data.shape)
            shape[axis] = dim - stop
            parts.append(Tensor(np.zeros(shape)))
        return (concat(parts, axis) if len(parts) > 1 else g,)

    return _out(x.data[index].copy(), "slice_axis", (x,), vjp,
                lambda: x.data[index].copy())


def gather(table, indices):
    if table.data.ndim != 2:
        raise ValueError(f"gather: table must be 2-d, got {table.data.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ValueError(f"gather: indices must be 1-d, got shape {idx.shape}")
    n = table.data.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"gather: index out of range for table with {n} rows")

    def vjp(g):
        return (scatter_rows(g, idx, n),)

    return _out(table.data[idx], "gather", (table,), vjp, lambda: table.data[idx])


def scatter_rows(src, indices, num_rows):
    idx = np.asarray(indices, dtype=np.int64)
    num_rows = int(num_rows)

    def fwd():
        out = np.zeros((num_rows, src.data.shape[1]))
        np.add.at(out, idx, src.data)
        return out

    def vjp(g):
        return (gather(g, idx),)

    return _out(fwd(), "scatter_rows", (src,), vjp, fwd)


def take_per_row(x, indices):
    if x.data.ndim != 2:
        raise ValueError(f"take_per_row: need 2-d tensor, got {x.data.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    rows, cols = x.data.shape
    if idx.shape != (rows,):
        raise ValueError(f"take_per_row: need {rows} indices, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= cols):
        raise IndexError(f"take_per_row: index out of range for {cols} columns")
    rng = np.arange(rows)

    def vjp(g):
        return (scatter_per_row(g, idx, cols),)

    return _out(x.data[rng, idx].copy(), "take_per_row", (x,), vjp,
                lambda: x.data[rng, idx].copy())


def scatter_per_row(src, indices, num_cols):
    idx = np.asarray(indices, dtype=np.int64)
    num_cols = int(num_cols)
    rows = src.data.shape[0]
    rng = np.arange(rows)

    def fwd():
        out = np.zeros((rows, num_cols))
        out[rng, idx] = src.data
        return out

    def vjp(g):
        return (take_per_row(g, idx),)

    return _out(fwd(), "scatter_per_row", (src,), vjp, fwd)


# ---------------------------------------------------------------------------
# nonlinearities


def sigmoid(x):
    out = _out(expit(x.data), "sigmoid", (x,), None, lambda: expit(x.data))
    _set_vjp(out, lambda g: (mul(g, mul(out, add_scalar(scale(out, -1.0), 1.0))),))
    return out


def tanh(x):
    y = np.tanh(x.data)
    out = _out(y, "tanh", (x,), None, lambda: np.tanh(x.data))
    _set_vjp(out, lambda g: (mul(g, add_scalar(scale(square(out), -1.0), 1.0)),))
    return out


def relu(x):
    mask = (x.data > 0).astype(np.float64)
    mask_t = Tensor(mask)
    return _out(x.data * mask, "relu", (x,),
                lambda g: (mul(g, mask_t),), lambda: x.data * (x.data > 0))


def log(x):
    return _out(np.log(x.data), "log", (x,),
                lambda g: (mul(g, reciprocal(x)),), lambda: np.log(x.data))


def exp(x):
    out = _out(np.exp(x.data), "exp", (x,), None, lambda: np.exp(x.data))
    _set_vjp(out, lambda g: (mul(g, out),))
    return out


def square(x):
    return _out(x.data * x.data, "square", (x,),
                lambda g: (scale(mul(g, x), 2.0),), lambda: x.data * x.data)


def sqrt(x):
    out = _out(np.sqrt(x.data), "sqrt", (x,), None, lambda: np.sqrt(x.data))
    _set_vjp(out, lambda g: (mul(g, scale(reciprocal(out), 0.5)),))
    return out


def reciprocal(x):
    out = _out(1.0 / x.data, "reciprocal", (x,), None, lambda: 1.0 / x.data)
    _set_vjp(out, lambda g: (scale(mul(g, square(out)), -1.0),))
    return out


def clip_min(x, c):
    c = float(c)
    mask_t = Tensor((x.data > c).astype(np.float64))
    return _out(np.maximum(x.data, c), "clip_min", (x,),
                lambda g: (mul(g, mask_t),), lambda: np.maximum(x.data, c))


def _set_vjp(out, vjp):
    tape = _active()
    if tape is not None and tape.records and tape.records[-1].out is out:
        tape.records[-1].vjp = vjp


# ---------------------------------------------------------------------------
# composed ops


def softmax(x, axis=None):
    if axis is None:
        axis = x.data.ndim - 1
    shift = Tensor(np.max(x.data, axis=axis, keepdims=True))
    z = sub(x, expand(shift, x.data.shape))
    e = exp(z)
    total = sum(e, axis=axis, keepdims=True)
    return mul(e, expand(reciprocal(total), x.data.shape))


def l2_norm(x, axis=None, keepdims=False):
    return sqrt(sum(square(x), axis=axis, keepdims=keepdims))


def dot(a, b):
    _check_same(a, b, "dot")
    return sum(mul(a, b))


def cosine_similarity(a, b, eps=1e-12):
    if a.data.ndim != 1 or b.data.ndim != 1 or a.data.shape != b.data.shape:
        raise ValueError(f"cosine_similarity: need equal-length vectors, "
                         f"got {a.data.shape} and {b.data.shape}")
    if eps <= 0:
        raise ValueError("cosine_similarity: eps must be positive")
    num = dot(a, b)
    na = clip_min(l2_norm(a), eps)
    nb = clip_min(l2_norm(b), eps)
    return mul(num, mul(reciprocal(na), reciprocal(nb)))


def stop_gradient(x):
    return _out(x.data.copy(), "stop_gradient", (x,), None, lambda: x.data.copy())


# ---------------------------------------------------------------------------
# differentiation


def grad(output, wrt, create_graph=False):
    """Reverse-mode gradients of a scalar ``output`` w.r.t. each tensor in ``wrt``.

    Tensors unreachable from ``output`` on the active tape get zero gradients of
    matching shape. With ``create_graph`` the returned gradients are themselves
    recorded, so a later ``grad`` call differentiates through them.
    """
    if output.size != 1:
        raise ValueError(f"grad: output must be scalar, got shape {output.data.shape}")
    tape = _active()
    if tape is None:
        raise RuntimeError("grad: no active tape")
    if create_graph and not tape.retain_graph:
        raise RuntimeError("grad: create_graph requires a retain_graph tape")
    records = tape.records
    stop = len(records)
    grads = {id(output): ones_like(output)}
    ctx = nullcontext() if create_graph else no_record()
    with ctx:
        for i in range(stop - 1, -1, -1):
            rec = records[i]
            g = grads.get(id(rec.out))
            if g is None or rec.vjp is None:
                continue
            for t, gi in zip(rec.inputs, rec.vjp(g)):
                if gi is None:
                    continue
                prev = grads.get(id(t))
                grads[id(t)] = gi if prev is None else add(prev, gi)
    return [grads[id(w)] if id(w) in grads else zeros_like(w) for w in wrt]
