"""Minimal reverse-mode differentiation over dense float64 arrays.

Only the kernels needed by belief propagation and the energy networks are
provided. Arrays registered with :meth:`Tape.watch` become leaves; every op
applied to a taped tensor is recorded and can be replayed backward with
:func:`backward`. Tensors without a tape are plain immutable values.

Broadcasting is limited to scalar operands. Use :func:`gather` to repeat
rows or columns explicitly when a wider broadcast is needed.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tape",
    "Tensor",
    "backward",
    "elementwise",
    "add",
    "sub",
    "mul",
    "div",
    "exp",
    "neg",
    "scale",
    "reduce_logsumexp",
    "reduce_sum",
    "matmul",
    "relu",
    "permute",
    "gather",
    "reshape",
    "logsumexp_array",
]


class Tensor:
    """Dense real array, optionally attached to a tape node."""

    __slots__ = ("data", "node_id", "tape")

    def __init__(self, data, tape=None, node_id=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node_id = node_id

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
        return float(self.data)

    def numpy(self):
        return self.data

    def __repr__(self):
        tag = "" if self.node_id is None else f", node={self.node_id}"
        return f"Tensor({self.data!r}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)


class Tape:
    """Ordered record of differentiable operations.

    Node ids are positions in the record, so reverse order is a valid
    reverse topological order. A tape belongs to one thread.
    """

    def __init__(self):
        self._records = []  # (parents, backward_fn, shape); leaves have parents None

    def __len__(self):
        return len(self._records)

    def watch(self, data):
        """Register ``data`` as a differentiable leaf and return it as a Tensor."""
        if isinstance(data, Tensor):
            data = data.data
        t = Tensor(np.array(data, dtype=np.float64), self, len(self._records))
        self._records.append((None, None, t.shape))
        return t

    def _record(self, out, parents, fn):
        out.tape = self
        out.node_id = len(self._records)
        self._records.append((parents, fn, out.shape))
        return out

    def is_leaf(self, node_id):
        return self._records[node_id][0] is None


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(*tensors):
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ValueError("tensors belong to different tapes")
            tape = t.tape
    return tape


def _make(value, inputs, fn):
    """Wrap ``value`` and record it if any input is on a tape.

    ``fn(grad)`` returns one gradient (or None) per input.
    """
    out = Tensor(value)
    tape = _tape_of(*inputs)
    if tape is not None:
        parents = tuple(t.node_id for t in inputs)
        tape._record(out, parents, fn)
    return out


def _unbroadcast(grad, shape):
    # scalar operand against a full tensor
    if shape == grad.shape:
        return grad
    return np.asarray(grad.sum()).reshape(shape)


def _check_binary(a, b):
    if a.shape == b.shape or b.size == 1 and b.ndim == 0 or a.size == 1 and a.ndim == 0:
        return
    raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a, b)
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a, b)
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a, b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a, b)
    if np.any(b.data == 0):
        raise ZeroDivisionError("division by a zero entry")
    out = a.data / b.data

    def fn(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _make(out, (a, b), fn)


def exp(a):
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def neg(a):
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def scale(a, c):
    """Multiply by a plain (non-differentiable) constant."""
    a = _as_tensor(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "div": div}
_UNARY = {"exp": exp, "neg": neg}


def elementwise(kind, a, b=None):
    """Dispatch by name; ``scale`` takes a float as ``b``."""
    if kind in _ELEMENTWISE:
        if b is None:
            raise ValueError(f"{kind} needs two operands")
        return _ELEMENTWISE[kind](a, b)
    if kind in _UNARY:
        return _UNARY[kind](a)
    if kind == "scale":
        return scale(a, b)
    raise ValueError(f"unknown elementwise kind {kind!r}")


def logsumexp_array(x, axis=None):
    """Max-shifted log-sum-exp on a plain array."""
    x = np.asarray(x, dtype=np.float64)
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True)) + m
    if axis is None:
        return out.reshape(())
    return np.squeeze(out, axis=axis)


def reduce_logsumexp(a, axis):
    a = _as_tensor(a)
    if not 0 <= axis < a.ndim:
        raise ValueError(f"axis {axis} out of range for rank {a.ndim}")
    if a.shape[axis] == 0:
        raise ValueError("logsumexp over an empty axis")
    out = logsumexp_array(a.data, axis=axis)

    def fn(g):
        soft = np.exp(a.data - np.expand_dims(out, axis))
        return (np.expand_dims(g, axis) * soft,)

    return _make(out, (a,), fn)


def reduce_sum(a, axis=None):
    a = _as_tensor(a)
    out = np.sum(a.data, axis=axis)

    def fn(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _make(out, (a,), fn)


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul expects rank-2 operands")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def relu(a):
    # subgradient at exactly 0 is 0
    a = _as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def permute(a, axes):
    a = _as_tensor(a)
    axes = tuple(int(i) for i in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ValueError(f"{axes} is not a permutation of range({a.ndim})")
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes).copy(), (a,), lambda g: (np.transpose(g, inverse),))


def gather(a, axis, indices):
    a = _as_tensor(a)
    if not 0 <= axis < a.ndim:
        raise ValueError(f"axis {axis} out of range for rank {a.ndim}")
    idx = np.asarray(indices, dtype=np.intp).reshape(-1)
    n = a.shape[axis]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"gather index out of range for extent {n}")
    out = np.take(a.data, idx, axis=axis)

    def fn(g):
        grad = np.zeros(a.shape)
        moved = np.moveaxis(grad, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (grad,)

    return _make(out, (a,), fn)


def reshape(a, shape):
    a = _as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def backward(root):
    """Gradients of a scalar ``root`` with respect to every tape leaf.

    Returns a dict mapping leaf node id to a gradient Tensor. Leaves that
    the root does not depend on get zero gradients.
    """
    if root.tape is None or root.node_id is None:
        raise ValueError("root is not on a tape")
    if root.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    tape = root.tape
    grads = {root.node_id: np.ones(root.shape)}
    for nid in range(root.node_id, -1, -1):
        parents, fn, _ = tape._records[nid]
        if parents is None or nid not in grads:
            continue
        g = grads.pop(nid)
        for pid, pg in zip(parents, fn(g)):
            if pid is None or pg is None:
                continue
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg
    out = {}
    for nid, (parents, _, shape) in enumerate(tape._records):
        if parents is None:
            g = grads.get(nid)
            out[nid] = Tensor(np.zeros(shape) if g is None else g)
    return out
