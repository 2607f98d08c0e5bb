"""Minimal reverse-mode autodiff over numpy arrays."""

import numpy as np

from . import ops
from .ops import forward_op
from .tensor import Graph, GraphError, ShapeError, Tensor, backward, grad_enabled, no_grad


def gradient_wrt_input(model, x, loss):
    """d(loss)/d(x) for an input leaf ``x``.

    ``loss`` is either an already-built scalar tensor that depends on ``x``,
    or a callable ``loss(logits) -> scalar tensor``; in the latter case the
    model is run in eval mode on ``x`` first.
    """
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x, dtype=model.dtype), requires_grad=True)
    if callable(loss) and not isinstance(loss, Tensor):
        if not x.requires_grad:
            x.requires_grad = True
        loss = loss(model.forward(x, train=False))
    if x.parents or not x.requires_grad:
        raise GraphError("x must be a differentiable leaf")
    grads = backward(loss)
    if x not in grads:
        raise GraphError("x is not part of the graph that produced the loss")
    return grads[x]


__all__ = [
    "Graph", "GraphError", "ShapeError", "Tensor", "backward", "forward_op",
    "grad_enabled", "gradient_wrt_input", "no_grad", "ops",
]
