"""Reverse-mode automatic differentiation on numpy arrays.

A :class:`Tensor` wraps an ndarray.  Every operation applied to tensors that
require gradients records its parents and a backward closure; calling
:meth:`Tensor.backward` on a scalar walks the recorded nodes in reverse
creation order (a valid reverse topological order, because a node is always
created after its inputs) and accumulates gradients into the leaves.

The default float type is float32.  :func:`check_mode` switches newly
created tensors to float64 for finite-difference testing.
"""

import contextlib
import itertools

import numpy as np

_counter = itertools.count()
_grad_enabled = True
_default_dtype = np.dtype(np.float32)


def default_dtype():
    return _default_dtype


@contextlib.contextmanager
def check_mode():
    """Create float64 tensors inside the block (gradient-check precision)."""
    global _default_dtype
    previous = _default_dtype
    _default_dtype = np.dtype(np.float64)
    try:
        yield
    finally:
        _default_dtype = previous


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled():
    return _grad_enabled


class Tensor:
    """N-dimensional float array that can take part in the gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "op", "stamp", "name", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=dtype or _default_dtype, copy=True)
        if not np.all(np.isfinite(self.data)):
            raise ValueError("tensor data must be finite")
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = "leaf"
        self.stamp = next(_counter)
        self.name = name
        self._parents = ()
        self._backward = None

    # -- basic properties -------------------------------------------------

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

    @property
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op!r}{flag})"

    def __len__(self):
        return self.data.shape[0]

    # -- graph ------------------------------------------------------------

    def graph(self):
        """Nodes reachable from this tensor, in topological (creation) order."""
        seen = {}
        stack = [self]
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen[id(node)] = node
            stack.extend(node._parents)
        return sorted(seen.values(), key=lambda t: t.stamp)

    def backward(self):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar tensor, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("backward() called on a tensor that does not require grad")
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(self.graph()):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    g = np.asarray(g, dtype=node.data.dtype).reshape(node.data.shape)
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar ---------------------------------------------------

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def make_node(data, parents, backward, op):
    """Wrap ``data`` as the output of ``op`` applied to ``parents``."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.stamp = next(_counter)
    out.name = None
    if _grad_enabled:
        out.requires_grad = any(p.requires_grad for p in parents)
        out._parents = tuple(parents)
        out._backward = backward if out.requires_grad else None
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _coerce(a, b):
    if not isinstance(a, Tensor):
        a = Tensor(a, dtype=b.dtype if isinstance(b, Tensor) else None)
    if not isinstance(b, Tensor):
        b = Tensor(b, dtype=a.dtype)
    return a, b


def add(a, b):
    a, b = _coerce(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_node(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    a, b = _coerce(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_node(a.data - b.data, (a, b), backward, "sub")


def mul(a, b):
    a, b = _coerce(a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_node(a.data * b.data, (a, b), backward, "mul")


def div(a, b):
    a, b = _coerce(a, b)
    out = a.data / b.data

    def backward(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return make_node(out, (a, b), backward, "div")


def matmul(a, b):
    a, b = _coerce(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shapes {a.shape} and {b.shape} are incompatible")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return make_node(a.data @ b.data, (a, b), backward, "matmul")


def tsum(a, axis=None, keepdims=False):
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)

    return make_node(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward, "sum")


def mean(a, axis=None, keepdims=False):
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[i] for i in axes]))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).astype(a.dtype),)

    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims), dtype=a.dtype)
    return make_node(out, (a,), backward, "mean")


def reshape(a, shape):
    def backward(g):
        return (g.reshape(a.shape),)

    return make_node(a.data.reshape(shape), (a,), backward, "reshape")


def transpose(a):
    def backward(g):
        return (g.T,)

    return make_node(a.data.T, (a,), backward, "transpose")


def tanh(a):
    out = np.tanh(a.data)

    def backward(g):
        return (g * (1 - out * out),)

    return make_node(out, (a,), backward, "tanh")


def exp(a):
    out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return make_node(out, (a,), backward, "exp")


def log(a):
    def backward(g):
        return (g / a.data,)

    return make_node(np.log(a.data), (a,), backward, "log")


def square(a):
    def backward(g):
        return (2 * g * a.data,)

    return make_node(a.data * a.data, (a,), backward, "square")
