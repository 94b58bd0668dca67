"""Define-by-run reverse-mode differentiation over float64 numpy arrays.

Every op builds its output eagerly and, when gradients are enabled and an
input requires them, records a closure that pushes the output gradient back
to its inputs. ``backward`` walks the recorded graph in reverse topological
order. The graph is rebuilt on every forward pass.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "DomainError",
    "no_grad",
    "is_grad_enabled",
    "tensor",
    "concat",
    "stack",
    "minimum",
    "softmax",
    "layer_norm",
    "forward_op",
]


class ShapeError(ValueError):
    """Raised when operand shapes do not conform to an op's rules."""


class DomainError(ValueError):
    """Raised when an op is evaluated outside its mathematical domain."""


_GRAD_ENABLED = True
_ids = itertools.count()


def is_grad_enabled():
    return _GRAD_ENABLED


@contextmanager
def no_grad():
    """Evaluate ops without recording anything on the tape."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _accum(t, g):
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


class Tensor:
    """A node in the computation graph.

    ``data`` holds the value, ``grad`` the accumulated gradient (``None``
    until something flows into it). Leaf tensors created with
    ``requires_grad=True`` are the trainable parameters.
    """

    __slots__ = ("data", "grad", "requires_grad", "tape_id", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), op=""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.tape_id = next(_ids)
        self.op = op
        self._parents = _parents
        self._backward = None

    # -- bookkeeping -------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    @staticmethod
    def _make(data, parents, op, backward):
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out = Tensor(data, True, parents, op)
            out._backward = backward
            return out
        return Tensor(data, op=op)

    # -- reverse pass --------------------------------------------------------
    def backward(self):
        """Populate ``grad`` on every node reachable from this scalar."""
        if self.data.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {self.shape}")
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node)
        for node in order:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)

    # -- elementwise arithmetic -------------------------------------------
    def __add__(self, other):
        other = _lift(other)
        _broadcast_shape("add", self, other)
        a, b = self, other

        def bw(out):
            _accum(a, _unbroadcast(out.grad, a.shape))
            _accum(b, _unbroadcast(out.grad, b.shape))

        return Tensor._make(a.data + b.data, (a, b), "add", bw)

    __radd__ = __add__

    def __sub__(self, other):
        other = _lift(other)
        _broadcast_shape("sub", self, other)
        a, b = self, other

        def bw(out):
            _accum(a, _unbroadcast(out.grad, a.shape))
            _accum(b, _unbroadcast(-out.grad, b.shape))

        return Tensor._make(a.data - b.data, (a, b), "sub", bw)

    def __rsub__(self, other):
        return _lift(other) - self

    def __neg__(self):
        a = self

        def bw(out):
            _accum(a, -out.grad)

        return Tensor._make(-a.data, (a,), "neg", bw)

    def __mul__(self, other):
        if not isinstance(other, Tensor) and np.ndim(other) == 0:
            return self.scale(float(other))
        other = _lift(other)
        _broadcast_shape("mul", self, other)
        a, b = self, other

        def bw(out):
            if a.requires_grad:
                _accum(a, _unbroadcast(out.grad * b.data, a.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(out.grad * a.data, b.shape))

        return Tensor._make(a.data * b.data, (a, b), "mul", bw)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not isinstance(other, Tensor) and np.ndim(other) == 0:
            if other == 0:
                raise DomainError("div: division by zero")
            return self.scale(1.0 / float(other))
        other = _lift(other)
        _broadcast_shape("div", self, other)
        if np.any(other.data == 0):
            raise DomainError("div: division by zero")
        a, b = self, other

        def bw(out):
            if a.requires_grad:
                _accum(a, _unbroadcast(out.grad / b.data, a.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(-out.grad * a.data / (b.data * b.data), b.shape))

        return Tensor._make(a.data / b.data, (a, b), "div", bw)

    def __rtruediv__(self, other):
        return _lift(other) / self

    def scale(self, c):
        """Multiply by a python scalar."""
        a = self

        def bw(out):
            _accum(a, out.grad * c)

        return Tensor._make(a.data * c, (a,), "scale", bw)

    def square(self):
        a = self

        def bw(out):
            _accum(a, out.grad * 2.0 * a.data)

        return Tensor._make(a.data * a.data, (a,), "square", bw)

    def __pow__(self, p):
        if p == 2:
            return self.square()
        a = self
        p = float(p)

        def bw(out):
            _accum(a, out.grad * p * a.data ** (p - 1.0))

        return Tensor._make(a.data**p, (a,), "pow", bw)

    # -- nonlinearities ----------------------------------------------------
    def relu(self):
        a = self
        mask = a.data > 0

        def bw(out):
            _accum(a, out.grad * mask)

        return Tensor._make(a.data * mask, (a,), "relu", bw)

    def tanh(self):
        a = self
        y = np.tanh(a.data)

        def bw(out):
            _accum(a, out.grad * (1.0 - y * y))

        return Tensor._make(y, (a,), "tanh", bw)

    def exp(self):
        a = self
        y = np.exp(a.data)

        def bw(out):
            _accum(a, out.grad * y)

        return Tensor._make(y, (a,), "exp", bw)

    def log(self):
        a = self
        if np.any(a.data <= 0):
            raise DomainError(f"log: non-positive input (min {a.data.min()!r})")

        def bw(out):
            _accum(a, out.grad / a.data)

        return Tensor._make(np.log(a.data), (a,), "log", bw)

    def softplus(self):
        a = self
        y = np.logaddexp(0.0, a.data)

        def bw(out):
            _accum(a, out.grad * (0.5 * (1.0 + np.tanh(0.5 * a.data))))

        return Tensor._make(y, (a,), "softplus", bw)

    def clip(self, lo, hi):
        """Clamp values; the gradient is zero where clamping is active."""
        a = self
        mask = (a.data >= lo) & (a.data <= hi)

        def bw(out):
            _accum(a, out.grad * mask)

        return Tensor._make(np.clip(a.data, lo, hi), (a,), "clip", bw)

    # -- reductions ----------------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        a = self

        def bw(out):
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(g, a.shape).copy())

        return Tensor._make(a.data.sum(axis=axis, keepdims=keepdims), (a,), "sum", bw)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod([self.shape[i] for i in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims).scale(1.0 / float(n))

    # -- shape ops -----------------------------------------------------------
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        try:
            y = a.data.reshape(shape)
        except ValueError:
            raise ShapeError(f"reshape: cannot reshape {a.shape} into {shape}") from None

        def bw(out):
            _accum(a, out.grad.reshape(a.shape))

        return Tensor._make(y, (a,), "reshape", bw)

    def __getitem__(self, idx):
        a = self

        def bw(out):
            g = np.zeros_like(a.data)
            np.add.at(g, idx, out.grad)
            _accum(a, g)

        return Tensor._make(a.data[idx], (a,), "getitem", bw)

    def swapaxes(self, i, j):
        a = self

        def bw(out):
            _accum(a, out.grad.swapaxes(i, j))

        return Tensor._make(a.data.swapaxes(i, j), (a,), "swapaxes", bw)

    # -- linear algebra ------------------------------------------------------
    def __matmul__(self, other):
        other = _lift(other)
        a, b = self, other
        if a.ndim == 0 or b.ndim == 0:
            raise ShapeError(f"matmul: scalar operands not allowed ({a.shape} @ {b.shape})")
        if a.shape[-1] != (b.shape[0] if b.ndim == 1 else b.shape[-2]):
            raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
        if b.ndim != 2 and a.ndim != b.ndim:
            raise ShapeError(f"matmul: unsupported operand ranks {a.shape} @ {b.shape}")

        flat = a.ndim > 2 and b.ndim == 2

        def bw(out):
            g = out.grad
            if a.requires_grad:
                if b.ndim == 1:
                    ga = np.multiply.outer(g, b.data)
                elif flat:
                    ga = (g.reshape(-1, g.shape[-1]) @ b.data.T).reshape(a.shape)
                else:
                    ga = g @ np.swapaxes(b.data, -1, -2)
                _accum(a, _unbroadcast(ga, a.shape))
            if b.requires_grad:
                if a.ndim == 1:
                    gb = np.multiply.outer(a.data, g)
                elif b.ndim == 1:
                    gb = (a.data * g[..., None]).reshape(-1, a.shape[-1]).sum(axis=0)
                elif b.ndim == 2:
                    gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
                else:
                    gb = np.swapaxes(a.data, -1, -2) @ g
                _accum(b, gb)

        if flat:
            y = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))
        else:
            y = a.data @ b.data
        return Tensor._make(y, (a, b), "matmul", bw)

    def __rmatmul__(self, other):
        return _lift(other) @ self


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def concat(tensors, axis=0):
    tensors = [_lift(t) for t in tensors]
    try:
        y = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {e} (shapes {[t.shape for t in tensors]})") from None
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(out):
        for t, g in zip(tensors, np.split(out.grad, splits, axis=axis)):
            _accum(t, g)

    return Tensor._make(y, tuple(tensors), "concat", bw)


def stack(tensors, axis=0):
    tensors = [_lift(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack: shapes differ {sorted(shapes)}")
    return concat([t.reshape(t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors], axis=axis)


def minimum(a, b):
    """Elementwise minimum; ties route the gradient to ``a``."""
    a, b = _lift(a), _lift(b)
    if a.shape != b.shape:
        raise ShapeError(f"minimum: shapes differ {a.shape} vs {b.shape}")
    pick_a = a.data <= b.data

    def bw(out):
        _accum(a, out.grad * pick_a)
        _accum(b, out.grad * ~pick_a)

    return Tensor._make(np.where(pick_a, a.data, b.data), (a, b), "minimum", bw)


def softmax(x, axis=-1):
    """Numerically stable softmax along ``axis``."""
    x = _lift(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(out):
        g = out.grad
        _accum(x, y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return Tensor._make(y, (x,), "softmax", bw)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then apply gain and bias."""
    x, gain, bias = _lift(x), _lift(gain), _lift(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match feature size {d}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    y = xhat * gain.data + bias.data

    def bw(out):
        g = out.grad
        if x.requires_grad:
            gx = g * gain.data
            gx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
            _accum(x, gx)
        if gain.requires_grad:
            _accum(gain, (g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            _accum(bias, g.reshape(-1, d).sum(axis=0))

    return Tensor._make(y, (x, gain, bias), "layer_norm", bw)


_UNARY = {
    "relu": Tensor.relu,
    "tanh": Tensor.tanh,
    "exp": Tensor.exp,
    "log": Tensor.log,
    "square": Tensor.square,
    "softplus": Tensor.softplus,
}


def forward_op(op, inputs, **kwargs):
    """Apply a named primitive to a list of tensors.

    This is the table-driven entry point used by the gradient checker; the
    methods and free functions above are the everyday interface.
    """
    inputs = [_lift(t) for t in inputs]
    if op in _UNARY:
        (a,) = inputs
        return _UNARY[op](a)
    if op == "matmul":
        a, b = inputs
        return a @ b
    if op == "add":
        a, b = inputs
        return a + b
    if op in ("mul", "elementwise-mul"):
        a, b = inputs
        if a.shape != b.shape:
            raise ShapeError(f"elementwise-mul: shapes differ {a.shape} vs {b.shape}")
        return a * b
    if op == "sum":
        (a,) = inputs
        return a.sum(**kwargs)
    if op == "mean":
        (a,) = inputs
        return a.mean(**kwargs)
    if op in ("softmax", "softmax-over-last-axis"):
        (a,) = inputs
        return softmax(a, axis=-1)
    if op == "layer-norm":
        x, gain, bias = inputs
        return layer_norm(x, gain, bias, **kwargs)
    if op == "scalar-scale":
        (a,) = inputs
        return a.scale(float(kwargs["c"]))
    raise ValueError(f"unknown op {op!r}")

