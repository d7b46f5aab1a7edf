"""Dense float64 tensors with reverse-mode automatic differentiation."""
import contextlib
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = ["Tensor", "OpNode", "no_grad", "is_grad_enabled", "as_tensor"]

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled():
    return _GRAD_ENABLED


@dataclass(eq=False)
class OpNode:
    """One recorded operation: its kind, its inputs and the vector-Jacobian product.

    ``backward`` maps the output gradient to a tuple with one entry (array or
    None) per input. Saved context lives in the closure.
    """

    kind: str
    inputs: Sequence["Tensor"]
    backward: Callable[[np.ndarray], tuple]
    meta: dict = field(default_factory=dict)


class Tensor:
    """N-dimensional float64 array that can record the ops applied to it.

    Parameters
    ----------
    data : array_like
        Values; copied to a contiguous float64 array.
    requires_grad : bool
        Whether gradients flow into this tensor.
    """

    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, _node=None):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[OpNode] = _node

    # -- construction helpers -------------------------------------------------
    @classmethod
    def _from_op(cls, data, kind, inputs, backward, **meta):
        needs = _GRAD_ENABLED and any(t.requires_grad for t in inputs)
        node = OpNode(kind, tuple(inputs), backward, meta) if needs else None
        return cls(data, requires_grad=needs, _node=node)

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
    def is_leaf(self):
        return self._node is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- autodiff ---------------------------------------------------------------
    def backward(self):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        if self.data.size != 1:
            raise ValueError(
                f"backward() needs a scalar loss, got shape {self.shape}"
            )
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t._node is not None:
                for p in t._node.inputs:
                    if p.requires_grad and id(p) not in seen:
                        stack.append((p, False))

        grads = {id(self): np.ones_like(self.data)}
        for t in reversed(order):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            if t._node is None:
                t.grad = g if t.grad is None else t.grad + g
                continue
            node = t._node
            in_grads = node.backward(g)
            for p, pg in zip(node.inputs, in_grads):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg
            # the graph is single-use; release saved context
            t._node = None

    # -- operator sugar -------------------------------------------------------
    def __add__(self, other):
        from . import functional as F

        return F.add(self, as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        from . import functional as F

        return F.add(self, F.neg(as_tensor(other)))

    def __rsub__(self, other):
        from . import functional as F

        return F.add(as_tensor(other), F.neg(self))

    def __mul__(self, other):
        from . import functional as F

        return F.mul(self, as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        from . import functional as F

        return F.neg(self)

    def sum(self):
        from . import functional as F

        return F.sum(self)

    def mean(self):
        from . import functional as F

        return F.mean(self)

    def reshape(self, *shape):
        from . import functional as F

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)
