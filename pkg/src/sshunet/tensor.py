"""Dense float tensors with a reverse-mode gradient tape.

Ops record themselves on the innermost active :class:`Tape` (if any input
requires a gradient). Outside a tape nothing is recorded, which is how
inference runs.

    with Tape() as tape:
        loss = (x * x).sum()
    tape.backward(loss)
    x.grad  # 2 * x
"""

import threading

import numpy as np

from .errors import ArgumentError, NonFiniteError

DEFAULT_DTYPE = np.float32

_local = threading.local()


def _stack():
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def current_tape():
    stack = _stack()
    return stack[-1] if stack else None


def _check_finite(arr):
    # a float64 sum is NaN/Inf iff some element is (finite float32 values cannot overflow it)
    if arr.size and not np.isfinite(arr.sum(dtype=np.float64)):
        raise NonFiniteError(f"non-finite values in tensor of shape {arr.shape}")


class Tensor:
    """N-d float array plus optional gradient.

    Data is float32 unless ``dtype`` says otherwise; float64 is used by the
    finite-difference checker only.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.array(data, dtype=dtype or DEFAULT_DTYPE, copy=True)
        _check_finite(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name

    @classmethod
    def _wrap(cls, arr):
        t = cls.__new__(cls)
        _check_finite(arr)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.name = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self):
        return Tensor._wrap(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # arithmetic sugar; all of these are tape-aware
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *order):
        if len(order) == 1 and isinstance(order[0], (tuple, list)):
            order = tuple(order[0])
        return permute(self, order)


class Tape:
    """Ordered record of executed ops, replayed backwards by :meth:`backward`.

    One forward/backward in flight per tape. Tapes are thread-local when
    entered as context managers.
    """

    def __init__(self):
        self.records = []
        self._produced = set()
        self._leaves = {}

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False

    def __len__(self):
        return len(self.records)

    def record(self, out, inputs, vjp):
        self.records.append((out, inputs, vjp))
        self._produced.add(id(out))
        for t in inputs:
            if t.requires_grad and id(t) not in self._produced:
                self._leaves[id(t)] = t

    def reset(self):
        self.records.clear()
        self._produced.clear()
        self._leaves.clear()

    def backward(self, loss, grad=None):
        """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf on the tape."""
        if loss.size != 1:
            raise ArgumentError(f"backward needs a scalar loss, got shape {loss.shape}")
        seed = np.ones_like(loss.data) if grad is None else np.asarray(grad, dtype=loss.dtype)
        grads = {id(loss): seed}
        leaf_grads = {}
        if id(loss) not in self._produced and loss.requires_grad:
            self._leaves[id(loss)] = loss
            leaf_grads[id(loss)] = seed
        for out, inputs, vjp in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for t, gi in zip(inputs, vjp(g)):
                if gi is None or not t.requires_grad:
                    continue
                store = grads if id(t) in self._produced else leaf_grads
                key = id(t)
                store[key] = gi if key not in store else store[key] + gi
        for key, t in self._leaves.items():
            g = leaf_grads.get(key)
            if g is None:
                g = np.zeros_like(t.data)
            g = np.asarray(g, dtype=t.dtype).reshape(t.shape)
            t.grad = g.copy() if t.grad is None else t.grad + g


def backward(tape, loss):
    """Functional alias for :meth:`Tape.backward`."""
    tape.backward(loss)


def apply_op(data, inputs, vjp):
    """Wrap ``data`` as an op output and record it on the active tape.

    ``vjp(g)`` must return one gradient (or None) per input.
    """
    out = Tensor._wrap(data)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, tuple(inputs), vjp)
    return out


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise ArgumentError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b):
    if not isinstance(b, Tensor):
        return apply_op(a.data + np.asarray(b, dtype=a.dtype), (a,), lambda g: (g,))
    _same_shape(a, b, "add")
    return apply_op(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    if not isinstance(b, Tensor):
        return apply_op(a.data - np.asarray(b, dtype=a.dtype), (a,), lambda g: (g,))
    _same_shape(a, b, "sub")
    return apply_op(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    if not isinstance(b, Tensor):
        s = np.asarray(b, dtype=a.dtype)
        return apply_op(a.data * s, (a,), lambda g: (g * s,))
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return apply_op(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def tsum(t):
    data = np.asarray(t.data.sum(dtype=np.float64), dtype=t.dtype)
    shape = t.shape
    return apply_op(data, (t,), lambda g: (np.broadcast_to(g, shape).copy(),))


def tmean(t):
    n = t.size
    data = np.asarray(t.data.mean(dtype=np.float64), dtype=t.dtype)
    shape = t.shape
    return apply_op(data, (t,), lambda g: (np.full(shape, g / n, dtype=t.dtype),))


def reshape(t, shape):
    old = t.shape
    return apply_op(t.data.reshape(shape), (t,), lambda g: (g.reshape(old),))


def _check_perm(order, ndim):
    order = tuple(int(i) for i in order)
    if sorted(order) != list(range(ndim)):
        raise ArgumentError(f"{order} is not a permutation of 0..{ndim - 1}")
    return order


def inverse_permutation(order):
    inv = [0] * len(order)
    for i, o in enumerate(order):
        inv[o] = i
    return tuple(inv)


def permute(t, order):
    """Reorder axes: ``out.shape[i] == t.shape[order[i]]``."""
    order = _check_perm(order, t.ndim)
    inv = inverse_permutation(order)
    out = np.ascontiguousarray(t.data.transpose(order))
    return apply_op(out, (t,), lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def pad(t, widths):
    """Zero padding; ``widths`` is one (before, after) pair per axis."""
    widths = tuple((int(a), int(b)) for a, b in widths)
    if len(widths) != t.ndim or any(a < 0 or b < 0 for a, b in widths):
        raise ArgumentError(f"bad pad widths {widths} for rank {t.ndim}")
    index = tuple(slice(a, a + n) for (a, _), n in zip(widths, t.shape))
    return apply_op(np.pad(t.data, widths), (t,), lambda g: (g[index],))


def narrow(t, axis, start, stop):
    """Slice ``[start, stop)`` along one axis."""
    if not 0 <= start <= stop <= t.shape[axis]:
        raise ArgumentError(f"narrow [{start}, {stop}) out of range for extent {t.shape[axis]}")
    index = [slice(None)] * t.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    shape, dtype = t.shape, t.dtype

    def vjp(g):
        full = np.zeros(shape, dtype=dtype)
        full[index] = g
        return (full,)

    return apply_op(np.ascontiguousarray(t.data[index]), (t,), vjp)


def concat(tensors, axis):
    tensors = tuple(tensors)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])
    data = np.concatenate([t.data for t in tensors], axis=axis)

    def vjp(g):
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            out.append(np.ascontiguousarray(g[tuple(index)]))
        return out

    return apply_op(data, tensors, vjp)
