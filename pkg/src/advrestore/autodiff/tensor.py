"""Dynamic-tape reverse-mode tensors.

A :class:`Tensor` is an immutable float64 value together with the graph node
that produced it: its parent tensors and a closure mapping the upstream
gradient to one gradient per parent. The tape is rebuilt on every forward pass.
"""
from __future__ import annotations

import contextlib

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled():
    return _GRAD_ENABLED


def as_array(value):
    arr = np.asarray(value, dtype=np.float64)
    if arr.dtype != np.float64:
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    """Float64 array with an optional backward rule."""

    __slots__ = ("data", "requires_grad", "grad", "parents", "backward_rule", "op", "__weakref__")
    # make numpy defer to our reflected operators (array - tensor -> Tensor)
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, parents=(), backward_rule=None, op="leaf"):
        self.data = as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.parents = tuple(parents)
        self.backward_rule = backward_rule
        self.op = op

    # ------------------------------------------------------------------ basics
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
        return self.data.copy()

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}, op={self.op}{flag})"

    def __len__(self):
        return self.data.shape[0]

    def backward(self):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf that requires grad."""
        return backward(self)

    # -------------------------------------------------------------- operators
    def __add__(self, other):
        from . import ops

        other = _lift(other)
        if isinstance(other, Tensor):
            return ops.add(self, other)
        return ops.add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops

        other = _lift(other)
        if isinstance(other, Tensor):
            return ops.sub(self, other)
        return ops.add_scalar(self, -float(other))

    def __rsub__(self, other):
        from . import ops

        other = _lift(other)
        if isinstance(other, Tensor):
            return ops.sub(other, self)
        return ops.add_scalar(ops.scale(self, -1.0), other)

    def __mul__(self, other):
        from . import ops

        other = _lift(other)
        if isinstance(other, Tensor):
            return ops.mul(self, other)
        return ops.scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops

        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported; divide by a scalar")
        return ops.scale(self, 1.0 / float(other))

    def __neg__(self):
        from . import ops

        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)


def _lift(value):
    """Wrap non-scalar arrays as constant tensors; leave scalars alone."""
    if isinstance(value, np.ndarray) and value.ndim > 0:
        return Tensor(value)
    return value


class Parameter(Tensor):
    """Leaf tensor owned by a model.

    ``grad`` is always allocated so it doubles as the gradient accumulator.
    Frozen parameters (``trainable=False``) are treated as constants by the tape.
    """

    __slots__ = ("name", "_trainable")

    def __init__(self, data, name="param", trainable=True):
        super().__init__(data, requires_grad=trainable)
        self.name = name
        self._trainable = bool(trainable)
        self.grad = np.zeros_like(self.data)

    @property
    def trainable(self):
        return self._trainable

    @trainable.setter
    def trainable(self, flag):
        self._trainable = bool(flag)
        self.requires_grad = self._trainable

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name}, shape={list(self.shape)}, trainable={self.trainable})"


def make_node(data, parents, backward_rule, op):
    """Create an op output, recording the tape entry only when needed."""
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=parents, backward_rule=backward_rule, op=op)
    return Tensor(data, op=op)


def _topological_order(root):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def _backprop(loss):
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {list(loss.shape)}")
    grads = {id(loss): np.ones_like(loss.data)}
    nodes = {}
    for node in reversed(_topological_order(loss)):
        nodes[id(node)] = node
        g = grads.get(id(node))
        if g is None or node.backward_rule is None:
            continue
        parent_grads = node.backward_rule(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.data.shape:
                raise RuntimeError(
                    f"{node.op}: gradient shape {list(pg.shape)} != value shape {list(parent.data.shape)}"
                )
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return grads, nodes


def backward(loss):
    """Backpropagate a scalar ``loss``.

    Leaves that require grad get the gradient added to ``.grad``. Returns a map
    from leaf tensor to its gradient for this call.
    """
    grads, nodes = _backprop(loss)
    out = {}
    for key, node in nodes.items():
        if node.parents or not node.requires_grad:
            continue
        g = grads.get(key)
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
        out[node] = g
    return out


def grad(loss, wrt):
    """Gradients of ``loss`` with respect to each tensor in ``wrt``.

    Does not touch ``.grad``. Tensors the loss does not depend on get zeros.
    """
    grads, _ = _backprop(loss)
    return [grads[id(t)].copy() if id(t) in grads else np.zeros_like(t.data) for t in wrt]
