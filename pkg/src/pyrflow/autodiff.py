"""Reverse-mode automatic differentiation on numpy arrays.

A Tensor wraps one ndarray and remembers how it was produced. Calling
``backward()`` on a scalar walks the tape in reverse topological order and
accumulates gradients into every leaf that has ``requires_grad`` set.

The tape is single-use: ``backward()`` releases the graph as it goes so a
training step builds a fresh graph per sample. There is no batch axis; ops
act on one sample's arrays and callers accumulate gradients across samples.
"""

from __future__ import annotations

import contextlib

import numpy as np

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype.kind in "iub":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._vjp = None

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

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Backpropagate from this node. ``grad`` defaults to ones."""
        if grad is None:
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
            if grad.shape != self.data.shape:
                raise ValueError(
                    f"seed gradient shape {grad.shape} != tensor shape {self.data.shape}"
                )

        order = _toposort(self)
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is not None:
                parent_grads = node._vjp(g)
                for parent, pg in zip(node._parents, parent_grads):
                    if pg is None:
                        continue
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
                # single-use tape: free closures and intermediate buffers
                node._vjp = None
                node._parents = ()
            elif node.requires_grad:
                if node.grad is None:
                    node.grad = g.copy()
                else:
                    node.grad += g

    # minimal operator sugar; the op library in ops.py is the real API
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops

        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops

        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops

        return ops.mul(other, self)

    def __neg__(self):
        from . import ops

        return ops.mul(self, -1.0)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"


class Parameter(Tensor):
    """Trainable leaf tensor."""

    def __init__(self, data):
        super().__init__(np.array(data, copy=True), requires_grad=True)


def astensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def make_node(data, parents, vjp) -> Tensor:
    """Create a graph node. ``vjp(g)`` returns one gradient per parent.

    When grad mode is off or no parent needs gradients the node is a plain
    constant and the closure is dropped immediately.
    """
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _toposort(root: Tensor) -> list[Tensor]:
    """Reverse topological order via iterative post-order DFS."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order
