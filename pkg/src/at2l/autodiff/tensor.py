"""Tensor values and reverse-mode differentiation over the recorded graph."""

import itertools
from contextlib import contextmanager

import numpy as np

_ids = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    """An operation received inputs whose shapes it cannot combine."""


class GraphError(ValueError):
    """Misuse of the graph (non-scalar loss, tensor not part of the graph)."""


@contextmanager
def no_grad():
    """Evaluate without recording parents or backward closures."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled():
    return _grad_enabled


class Tensor:
    """An n-d float array plus the record of the op that produced it.

    Leaves are created directly; interior nodes are created by the functions
    in :mod:`at2l.autodiff.ops`. Equality is identity so tensors can key the
    gradient map returned by :func:`backward`.
    """

    __slots__ = ("data", "requires_grad", "grad", "parents", "backward_fn", "op", "id")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.parents = ()
        self.backward_fn = None
        self.op = "leaf"
        self.id = next(_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(self, other)

    def __sub__(self, other):
        from . import ops
        return ops.subtract(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.add(ops.neg(self), other)

    def __mul__(self, other):
        from . import ops
        if isinstance(other, (int, float)):
            return ops.scale(self, other)
        return ops.multiply(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


def make_node(data, op, parents, backward_fn):
    """Wrap an op result; record parents only if some input needs a gradient."""
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    out.op = op
    if needs:
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
    return out


class Graph:
    """Nodes reachable from a loss, in topological order (inputs first)."""

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def from_loss(cls, loss):
        order = []
        seen = set()
        stack = [(loss, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if node.id in seen:
                continue
            seen.add(node.id)
            stack.append((node, True))
            for p in node.parents:
                if p.requires_grad and p.id not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self):
        return len(self.nodes)

    def __contains__(self, tensor):
        return any(n is tensor for n in self.nodes)

    def backward(self, loss):
        grads = {loss.id: np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.get(node.id)
            if g is None or node.backward_fn is None:
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.id in grads:
                    grads[parent.id] = grads[parent.id] + pg
                else:
                    grads[parent.id] = pg
        return {n: grads[n.id] for n in self.nodes if n.id in grads}


def backward(loss):
    """Reverse pass from a scalar loss.

    Returns a dict mapping every reachable tensor (interior nodes and leaves)
    to its gradient array; leaves also get ``.grad`` set.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor that requires a gradient")
    graph = Graph.from_loss(loss)
    grads = graph.backward(loss)
    for node, g in grads.items():
        if not node.parents:
            node.grad = g
    return grads
