"""Dense float64 tensors recorded on an insertion-ordered tape.

Every op whose inputs require gradients appends a :class:`Node` to the active
:class:`Graph`. Because a node can only be appended after its parents exist,
insertion order is already a topological order and :func:`backward` is a single
reverse sweep.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Optional, Sequence

import numpy as np

from vtar.errors import FrozenTensorError, NonFiniteError, ShapeError

_state = threading.local()


def _stack() -> list:
    stack = getattr(_state, "graphs", None)
    if stack is None:
        stack = _state.graphs = [Graph()]
        _state.grad_enabled = True
    return stack


def current_graph() -> "Graph":
    return _stack()[-1]


def grad_enabled() -> bool:
    _stack()
    return _state.grad_enabled


@contextmanager
def no_grad():
    _stack()
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        bad = int(np.size(arr) - np.count_nonzero(np.isfinite(arr)))
        raise NonFiniteError(f"{what}: {bad} non-finite value(s)")


class Tensor:
    """A float64 array with an optional gradient.

    Constructors copy their input and reject NaN/Inf. Dimensions must be
    positive; a 0-d tensor is a scalar.
    """

    __slots__ = ("data", "grad", "name", "_requires_grad", "_frozen", "_node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=np.float64)
        if any(d <= 0 for d in arr.shape):
            raise ShapeError("Tensor", arr.shape)
        check_finite(arr, name or "Tensor")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._requires_grad = False
        self._frozen = False
        self._node: Optional[Node] = None
        self.requires_grad = requires_grad

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.name = None
        t._requires_grad = False
        t._frozen = False
        t._node = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def requires_grad(self) -> bool:
        return self._requires_grad

    @requires_grad.setter
    def requires_grad(self, value: bool) -> None:
        if value and self._frozen:
            raise FrozenTensorError(f"tensor {self.name or '<unnamed>'} is frozen")
        self._requires_grad = bool(value)

    @property
    def frozen(self) -> bool:
        return self._frozen

    def freeze(self) -> "Tensor":
        self._requires_grad = False
        self._frozen = True
        self.grad = None
        self.data.flags.writeable = False
        return self

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", self.shape)
        return float(self.data.reshape(()))

    def _accumulate(self, g: np.ndarray) -> None:
        if self._frozen:
            raise FrozenTensorError(
                f"gradient routed to frozen tensor {self.name or '<unnamed>'}"
            )
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self._requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # Operator sugar; the implementations live in ops.py.
    def __add__(self, other):
        from vtar.numerics import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from vtar.numerics import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from vtar.numerics import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from vtar.numerics import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from vtar.numerics import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from vtar.numerics import ops
        return ops.mul(other, self)

    def __neg__(self):
        from vtar.numerics import ops
        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from vtar.numerics import ops
        return ops.matmul(self, other)


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Node:
    __slots__ = ("graph", "index", "op", "parents", "output", "backward")

    def __init__(self, graph, index, op, parents, output, backward):
        self.graph = graph
        self.index = index
        self.op = op
        self.parents = parents
        self.output = output
        self.backward = backward

    @property
    def parent_indices(self) -> list:
        """Tape indices of parents recorded on the same graph (leaves are omitted)."""
        return [
            p._node.index
            for p in self.parents
            if p._node is not None and p._node.graph is self.graph
        ]


class Graph:
    """Insertion-ordered tape of operation records.

    Used as a context manager to scope a computation::

        with Graph():
            loss = model(x)
            backward(loss)
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, parents: Sequence[Tensor], output: Tensor, backward: BackwardFn) -> Node:
        node = Node(self, len(self.nodes), op, tuple(parents), output, backward)
        self.nodes.append(node)
        output._node = node
        return node

    def clear(self) -> None:
        for node in self.nodes:
            node.output._node = None
        self.nodes = []

    def __enter__(self) -> "Graph":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _stack()
        stack.pop()
        self.clear()


def make_result(op: str, data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn) -> Tensor:
    check_finite(data, op)
    out = Tensor._wrap(data)
    if grad_enabled() and any(p._requires_grad for p in parents):
        out._requires_grad = True
        current_graph().record(op, parents, out, backward)
    return out


def backward(root: Tensor, retain_graph: bool = False) -> None:
    """Accumulate d(root)/d(t) into ``t.grad`` for every reachable tensor."""
    if root.data.size != 1:
        raise ShapeError("backward: root must be scalar", root.shape)
    seed = np.ones_like(root.data)
    node = root._node
    if node is None:
        if not root.requires_grad:
            raise ValueError("backward: root does not require grad")
        root._accumulate(seed)
        return
    graph = node.graph
    pending: dict[int, np.ndarray] = {node.index: seed}
    for rec in reversed(graph.nodes[: node.index + 1]):
        g = pending.pop(rec.index, None)
        if g is None:
            continue
        out = rec.output
        out.grad = g if out.grad is None else out.grad + g
        for parent, pg in zip(rec.parents, rec.backward(g)):
            if pg is None or not parent._requires_grad:
                continue
            pnode = parent._node
            if pnode is not None and pnode.graph is graph:
                prev = pending.get(pnode.index)
                pending[pnode.index] = pg if prev is None else prev + pg
            else:
                parent._accumulate(pg)
    if not retain_graph:
        graph.clear()
