"""Tensor container and the reverse-mode tape that differentiates it."""

import threading
from contextlib import contextmanager

import numpy as np

from ..errors import ContractError, StateError

_state = threading.local()


def grad_enabled():
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording for the current thread."""
    previous = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


class Partial:
    """Gradient contribution that only touches ``index`` of an input."""

    __slots__ = ("index", "value")

    def __init__(self, index, value):
        self.index = index
        self.value = value


class Node:
    """One recorded operation: its inputs and the rule mapping output grads to input grads."""

    __slots__ = ("op", "inputs", "backward", "consumed")

    def __init__(self, op, inputs, backward):
        self.op = op
        self.inputs = inputs
        self.backward = backward
        self.consumed = False


class Tensor:
    """Dense float64 array that may take part in differentiation.

    Data is treated as immutable once the tensor exists; only ``grad`` is
    written to, and only by :func:`backpropagate`.
    """

    __slots__ = ("data", "requires_grad", "grad", "_node", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None
        self.name = name

    @classmethod
    def _wrap(cls, data):
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = False
        t.grad = None
        t._node = None
        t.name = None
        return t

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")

    def detach(self):
        return Tensor._wrap(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar; the op implementations live in ops.py
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

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.slice(self, index)


def as_tensor(value):
    if isinstance(value, Tensor):
        return value
    return Tensor._wrap(np.asarray(value, dtype=np.float64))


def record(op, data, inputs, backward):
    """Wrap ``data`` as the output of ``op``; record a node when any input needs grad."""
    out = Tensor._wrap(data)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = Node(op, inputs, backward)
    return out


class ComputationTape:
    """Topologically ordered record of the nodes that produced ``output``.

    Every tensor appears after the producers of all of its inputs, and each
    node is replayed exactly once by :meth:`run`.
    """

    def __init__(self, output):
        self.output = output
        self.entries = self._topological(output)

    @staticmethod
    def _topological(output):
        order = []
        seen = set()
        stack = [(output, False)]
        while stack:
            t, expanded = stack.pop()
            if t._node is None:
                continue
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for parent in t._node.inputs:
                if parent._node is not None and id(parent) not in seen:
                    stack.append((parent, False))
        return order

    def __len__(self):
        return len(self.entries)

    def run(self, seed):
        grads = {id(self.output): seed}
        owned = set()
        leaves = {}
        for t in reversed(self.entries):
            node = t._node
            if node.consumed:
                raise StateError(f"tape node '{node.op}' was already consumed by a previous backward pass")
            g = grads.pop(id(t), None)
            owned.discard(id(t))
            if g is None:
                continue
            input_grads = node.backward(g)
            for parent, pg in zip(node.inputs, input_grads):
                if pg is None or not parent.requires_grad:
                    continue
                _accumulate(grads, owned, parent, pg)
                if parent._node is None:
                    leaves[id(parent)] = parent
        for t in self.entries:
            t._node.consumed = True
            t._node.backward = None
        touched = []
        for key, leaf in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            g = np.array(g, dtype=np.float64)
            leaf.grad = g if leaf.grad is None else leaf.grad + g
            touched.append(leaf)
        return touched


def _accumulate(grads, owned, t, g):
    key = id(t)
    cur = grads.get(key)
    if isinstance(g, Partial):
        if cur is None:
            cur = np.zeros(t.shape)
            grads[key] = cur
            owned.add(key)
        elif key not in owned:
            cur = np.array(cur, dtype=np.float64)
            grads[key] = cur
            owned.add(key)
        cur[g.index] += g.value
        return
    if cur is None:
        grads[key] = g
    elif key in owned:
        cur += g
    else:
        grads[key] = cur + g
        owned.add(key)


def backpropagate(output):
    """Populate ``grad`` on every leaf that ``output`` depends on.

    Returns the list of leaves that received a gradient. A constant output
    is a no-op and returns an empty list. The tape is consumed: calling this
    twice on the same graph raises :class:`StateError`.
    """
    if output.size != 1:
        raise ContractError(f"backpropagate needs a scalar output, got shape {output.shape}")
    seed = np.ones(output.shape)
    if output._node is None:
        if output.requires_grad:
            output.grad = seed if output.grad is None else output.grad + seed
            return [output]
        return []
    if output._node.consumed:
        raise StateError("backward already ran on this output; the tape is consumed")
    return ComputationTape(output).run(seed)
