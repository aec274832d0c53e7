"""Dense float64 tensors recorded on an explicit differentiation tape.

A :class:`Tape` is activated with ``with Tape() as tape:``; every
differentiable operation executed inside the block whose inputs require a
gradient is appended to the tape in execution order, which is therefore a
valid topological order.  Outside an active tape operations are evaluated
eagerly and nothing is recorded.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import NamedTuple, Optional, Sequence

import numpy as np

from ..exceptions import InvalidArgumentError

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextmanager
def no_tape():
    """Evaluate operations without recording them on any active tape."""
    stack = _tape_stack()
    saved = stack[:]
    stack.clear()
    try:
        yield
    finally:
        stack[:] = saved


class Record(NamedTuple):
    op: str
    fn: "Function"
    inputs: tuple
    input_ids: tuple
    output: "Tensor"
    output_id: int


class Tape:
    """Ordered log of executed operations.

    Confined to the thread that created it; independent tapes may live in
    different threads.
    """

    def __init__(self):
        self.records: list[Record] = []
        self._ids: dict[int, int] = {}
        self._produced: set[int] = set()
        self._next_id = 0

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        assert stack and stack[-1] is self
        stack.pop()
        return False

    def __len__(self):
        return len(self.records)

    def node_id(self, t: "Tensor") -> int:
        key = id(t)
        nid = self._ids.get(key)
        if nid is None:
            nid = self._ids[key] = self._next_id
            self._next_id += 1
            t.node_id = nid
        return nid

    def record(self, fn: "Function", inputs: Sequence["Tensor"], output: "Tensor"):
        in_ids = tuple(self.node_id(t) for t in inputs)
        out_id = self.node_id(output)
        self._produced.add(id(output))
        self.records.append(
            Record(type(fn).__name__, fn, tuple(inputs), in_ids, output, out_id)
        )

    def is_leaf(self, t: "Tensor") -> bool:
        return id(t) not in self._produced

    def leaves(self) -> list["Tensor"]:
        seen, out = set(), []
        for rec in self.records:
            for t in rec.inputs:
                if self.is_leaf(t) and id(t) not in seen:
                    seen.add(id(t))
                    out.append(t)
        return out

    def replay(self) -> list[int]:
        """Re-run every recorded forward from the current leaf values.

        Outputs and saved values are refreshed in place.  Returns the node ids
        whose recomputed value differs bitwise from the stored one (empty when
        the replay reproduces the tape exactly).
        """
        changed = []
        for rec in self.records:
            new = rec.fn.forward(*(t.data for t in rec.inputs))
            new = np.asarray(new, dtype=np.float64)
            old = rec.output.data
            if new.shape != old.shape or new.tobytes() != old.tobytes():
                changed.append(rec.output_id)
            rec.output.data = new
        return changed

    def backward(self, loss: "Tensor") -> None:
        backward(self, loss)


def backward(tape: Tape, loss: "Tensor") -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it."""
    if loss.data.size != 1:
        raise InvalidArgumentError(
            f"backward needs a scalar loss, got shape {loss.shape}"
        )
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaf_grads: dict[int, tuple] = {}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        in_grads = rec.fn.backward(g)
        for t, gi in zip(rec.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if tape.is_leaf(t):
                prev = leaf_grads.get(id(t))
                leaf_grads[id(t)] = (t, gi if prev is None else prev[1] + gi)
            else:
                prev = grads.get(id(t))
                grads[id(t)] = gi if prev is None else prev + gi
    if id(loss) in grads and tape.is_leaf(loss) and loss.requires_grad:
        leaf_grads[id(loss)] = (loss, grads[id(loss)])
    for t, g in leaf_grads.values():
        g = np.asarray(g, dtype=np.float64).reshape(t.data.shape)
        t.grad = g.copy() if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


class Function:
    """A differentiable operation: ``forward`` on arrays, ``backward`` on the
    upstream gradient returning one gradient (or None) per input."""

    needs_input_grad: tuple = ()

    def forward(self, *arrays):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs, **kwargs) -> "Tensor":
        fn = cls(**kwargs)
        tensors = [as_tensor(x) for x in inputs]
        fn.needs_input_grad = tuple(t.requires_grad for t in tensors)
        out = Tensor(fn.forward(*(t.data for t in tensors)))
        tape = active_tape()
        if tape is not None and any(fn.needs_input_grad):
            out.requires_grad = True
            tape.record(fn, tensors, out)
        return out

    def __init__(self, **kwargs):
        for k, v in kwargs.items():
            setattr(self, k, v)


class Tensor:
    """Row-major float64 array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "node_id", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node_id: Optional[int] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return self.data.shape[0]

    # elementwise arithmetic with numpy broadcasting
    def __add__(self, other):
        return Add.apply(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return Sub.apply(self, other)

    def __rsub__(self, other):
        return Sub.apply(other, self)

    def __mul__(self, other):
        return Mul.apply(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return Div.apply(self, other)

    def __rtruediv__(self, other):
        return Div.apply(other, self)

    def __neg__(self):
        return Mul.apply(self, -1.0)

    def __pow__(self, exponent: float):
        return Pow.apply(self, exponent=float(exponent))

    def __getitem__(self, key):
        return Index.apply(self, key=key)

    def sum(self, axis=None, keepdims: bool = False):
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else int(
            np.prod([self.data.shape[a] for a in np.atleast_1d(axis)])
        )
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Add(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, g):
        return _unbroadcast(g, self.shapes[0]), _unbroadcast(g, self.shapes[1])


class Sub(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, g):
        return _unbroadcast(g, self.shapes[0]), _unbroadcast(-g, self.shapes[1])


class Mul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, g):
        ga = _unbroadcast(g * self.b, self.a.shape) if self.needs_input_grad[0] else None
        gb = _unbroadcast(g * self.a, self.b.shape) if self.needs_input_grad[1] else None
        return ga, gb


class Div(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a / b

    def backward(self, g):
        ga = _unbroadcast(g / self.b, self.a.shape) if self.needs_input_grad[0] else None
        gb = None
        if self.needs_input_grad[1]:
            gb = _unbroadcast(-g * self.a / (self.b * self.b), self.b.shape)
        return ga, gb


class Pow(Function):
    exponent: float

    def forward(self, x):
        self.x = x
        return x**self.exponent

    def backward(self, g):
        p = self.exponent
        if p == 2.0:
            return (2.0 * g * self.x,)
        return (g * p * self.x ** (p - 1.0),)


class Sum(Function):
    axis = None
    keepdims = False

    def forward(self, x):
        self.in_shape = x.shape
        return np.sum(x, axis=self.axis, keepdims=self.keepdims)

    def backward(self, g):
        if self.axis is not None and not self.keepdims:
            g = np.expand_dims(g, self.axis)
        return (np.broadcast_to(g, self.in_shape).copy(),)


class Reshape(Function):
    shape: tuple

    def forward(self, x):
        self.in_shape = x.shape
        return x.reshape(self.shape)

    def backward(self, g):
        return (g.reshape(self.in_shape),)


class Index(Function):
    key = None

    def forward(self, x):
        self.in_shape = x.shape
        return x[self.key]

    def backward(self, g):
        out = np.zeros(self.in_shape)
        np.add.at(out, self.key, g)
        return (out,)


class Stack(Function):
    axis = 0

    def forward(self, *arrays):
        self.n = len(arrays)
        return np.stack(arrays, axis=self.axis)

    def backward(self, g):
        return tuple(np.take(g, i, axis=self.axis) for i in range(self.n))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    return Stack.apply(*tensors, axis=axis)
