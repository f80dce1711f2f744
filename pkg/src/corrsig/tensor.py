"""Dense float tensors with reverse-mode automatic differentiation.

A small numpy-backed engine: each differentiable operation is a Function
subclass that records its tensor inputs and whatever intermediate state the
backward pass needs.  Calling ``backward`` on a scalar tensor walks the
recorded graph once in reverse topological order, freeing intermediate
gradients as they are consumed and accumulating into leaf ``grad`` fields.

Tensors are float32 by default.  Arrays passed in as float64 are kept at
float64, which lets the same kernels be exercised at higher precision when
verifying gradients; production code never constructs float64 tensors.
"""

import numpy as np

from .errors import UsageError

_grad_enabled = True


def is_grad_enabled():
    return _grad_enabled


class no_grad:
    """Context manager that disables graph recording (inference mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, exc_type, exc, tb):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_ctx")

    def __init__(self, data, requires_grad=False):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype != np.float64:
            arr = np.ascontiguousarray(arr, dtype=np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._ctx = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        grad_flag = ", requires_grad=True" if self.requires_grad else ""
        return "Tensor(shape=%r%s)" % (tuple(self.shape), grad_flag)

    def __len__(self):
        return len(self.data)


class Function:
    """Base class for differentiable ops.

    ``forward`` receives raw numpy arrays (tensor args unwrapped, in call
    order) plus keyword parameters, returns the output array, and stashes on
    ``self`` whatever ``backward`` needs.  ``backward`` receives the gradient
    of the loss w.r.t. the output and returns one gradient array (or None)
    per tensor input, in order.
    """

    kind = "op"

    @classmethod
    def apply(cls, *args, **kwargs):
        ctx = cls()
        tensor_args = tuple(a for a in args if isinstance(a, Tensor))
        raw = [a.data if isinstance(a, Tensor) else a for a in args]
        out_data = ctx.forward(*raw, **kwargs)
        needs = _grad_enabled and any(t.requires_grad for t in tensor_args)
        out = Tensor(out_data, requires_grad=needs)
        if needs:
            ctx.inputs = tensor_args
            out._ctx = ctx
        return out

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def backward(self, grad_out):
        raise NotImplementedError


def _toposort(root):
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        if node._ctx is not None:
            for t in node._ctx.inputs:
                if t.requires_grad and id(t) not in visited:
                    stack.append((t, False))
    return order


def backward(root):
    """Populate ``grad`` on every requires_grad leaf reachable from root.

    Repeated calls accumulate.  Intermediate gradients are released as soon
    as the node that owns them has been processed, so peak memory is the
    graph's activations plus the current gradient frontier.
    """
    if not isinstance(root, Tensor):
        raise UsageError("backward root must be a Tensor")
    if root.size != 1:
        raise UsageError(
            "backward requires a scalar root, got shape %r" % (tuple(root.shape),))
    order = _toposort(root)
    grads = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        ctx = node._ctx
        if ctx is None:
            if node.requires_grad:
                if node.grad is None:
                    node.grad = g.copy()
                else:
                    node.grad += g
            continue
        in_grads = ctx.backward(g)
        for t, ig in zip(ctx.inputs, in_grads):
            if ig is None or not t.requires_grad:
                continue
            if t._ctx is None:
                if t.grad is None:
                    t.grad = ig.copy()
                else:
                    t.grad += ig
            elif id(t) in grads:
                # out of place: ig may be a view or read-only broadcast
                grads[id(t)] = grads[id(t)] + ig
            else:
                grads[id(t)] = ig
