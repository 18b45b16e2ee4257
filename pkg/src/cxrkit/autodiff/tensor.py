"""Tensor type and reverse-mode graph machinery."""

from __future__ import annotations

import contextlib

import numpy as np

from ..exceptions import NumericsError, ShapeError

_grad_enabled = True


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    saved = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = saved


class OpRecord:
    """One recorded operation: kind, input tensors, output tensor, backward closure.

    ``grad_fn(grad_out)`` returns one gradient array (or None) per input, in order.
    """

    __slots__ = ("kind", "inputs", "output", "grad_fn")

    def __init__(self, kind, inputs, output, grad_fn):
        self.kind = kind
        self.inputs = tuple(inputs)
        self.output = output
        self.grad_fn = grad_fn

    def __repr__(self):
        return f"OpRecord({self.kind}, inputs={len(self.inputs)})"


class Tensor:
    """A float64 numpy array plus gradient bookkeeping.

    ``data`` is kept read-only; replace it wholesale (``t.data = arr``) rather
    than mutating in place, so recorded graphs never see silent edits.
    """

    __slots__ = ("_data", "requires_grad", "grad", "record")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, copy=True)
        if not np.all(np.isfinite(arr)):
            raise NumericsError("tensor data must be finite")
        arr.setflags(write=False)
        self._data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.record = None

    @property
    def data(self) -> np.ndarray:
        return self._data

    @data.setter
    def data(self, value):
        arr = np.array(value, dtype=np.float64, copy=True)
        if arr.shape != self._data.shape:
            raise ShapeError(
                f"cannot replace data of shape {self._data.shape} with {arr.shape}"
            )
        if not np.all(np.isfinite(arr)):
            raise NumericsError("tensor data must be finite")
        arr.setflags(write=False)
        self._data = arr

    @classmethod
    def _from_op(cls, data: np.ndarray) -> "Tensor":
        """Wrap a freshly computed array without copying; internal use."""
        t = cls.__new__(cls)
        data = np.asarray(data, dtype=np.float64)
        if data.ndim and not data.flags.c_contiguous:
            data = np.ascontiguousarray(data)  # keep 0-d shape; ascontiguousarray would promote it
        data.setflags(write=False)
        t._data = data
        t.requires_grad = False
        t.grad = None
        t.record = None
        return t

    @property
    def shape(self):
        return self._data.shape

    @property
    def ndim(self):
        return self._data.ndim

    @property
    def size(self):
        return self._data.size

    def item(self) -> float:
        if self._data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self._data.reshape(()))

    def numpy(self) -> np.ndarray:
        """A writable copy of the data."""
        return self._data.copy()

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # Arithmetic conveniences; the ops module holds the real implementations.
    def __add__(self, other):
        from .ops import add

        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from .ops import sub

        return sub(self, other)

    def __rsub__(self, other):
        from .ops import sub

        return sub(other, self)

    def __mul__(self, other):
        from .ops import mul

        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from .ops import mul

        return mul(self, -1.0)

    def __truediv__(self, other):
        from .ops import mul

        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not part of the op set")
        return mul(self, 1.0 / float(other))


def _toposort(root: Tensor, follow_all_inputs: bool) -> list[Tensor]:
    """Tensors reachable from root through op records, children before parents."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.record is not None:
            for inp in t.record.inputs:
                if id(inp) in seen:
                    continue
                if follow_all_inputs or inp.requires_grad or inp.record is not None:
                    stack.append((inp, False))
    return order


def graph_nodes(root: Tensor) -> list[OpRecord]:
    """Op records reachable from ``root``, in forward topological order."""
    return [t.record for t in _toposort(root, follow_all_inputs=True) if t.record is not None]


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(tensor) into ``.grad`` of every requires_grad tensor.

    ``root`` must be a scalar. Repeated calls without zeroing add gradients.
    """
    if not isinstance(root, Tensor):
        raise TypeError("backward expects a Tensor")
    if root.data.size != 1:
        raise ShapeError(f"backward root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        raise ValueError("backward root does not require grad; nothing to differentiate")

    order = _toposort(root, follow_all_inputs=False)
    # Per-call flow map, merged into .grad at each node: a second backward call
    # must add a fresh full pass, not double-count previously stored grads.
    flows: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for t in reversed(order):
        g = flows.pop(id(t), None)
        if g is None:
            continue
        if t.requires_grad:
            t.grad = g.copy() if t.grad is None else t.grad + g
        rec = t.record
        if rec is None:
            continue
        input_grads = rec.grad_fn(g)
        if len(input_grads) != len(rec.inputs):
            raise RuntimeError(f"{rec.kind}: grad_fn returned {len(input_grads)} grads "
                               f"for {len(rec.inputs)} inputs")
        for inp, gi in zip(rec.inputs, input_grads):
            if gi is None or not (inp.requires_grad or inp.record is not None):
                continue
            if gi.shape != inp.data.shape:
                raise ShapeError(f"{rec.kind}: gradient shape {gi.shape} does not match "
                                 f"input shape {inp.data.shape}")
            prev = flows.get(id(inp))
            flows[id(inp)] = gi if prev is None else prev + gi
