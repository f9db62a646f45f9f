"""Dense float64 tensors and the define-by-run tape used for reverse-mode AD.

Every differentiable op appends one node to the active :class:`Tape`. Node ids
increase monotonically, so a reverse sweep in id order is a valid topological
traversal. Leaf tensors created with ``requires_grad=True`` are the parameters;
their ``.grad`` buffers accumulate across ``backward`` calls until
:func:`zero_grad` is called.
"""

from __future__ import annotations

import contextlib
import io
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import NonScalarLoss, ShapeMismatch

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Node:
    id: int
    kind: str
    inputs: tuple
    backward: BackwardFn


@dataclass
class Tape:
    nodes: list = field(default_factory=list)
    next_id: int = 0

    def record(self, kind: str, inputs: tuple, backward: BackwardFn) -> Node:
        for t in inputs:
            if t._node is not None and t._tape is self and t._node.id >= self.next_id:
                raise RuntimeError("tape ordering violated")
        node = Node(self.next_id, kind, inputs, backward)
        self.nodes.append(node)
        self.next_id += 1
        return node

    def reset(self) -> None:
        self.nodes.clear()
        self.next_id = 0

    def __len__(self) -> int:
        return len(self.nodes)


_default_tape = Tape()
_tape_stack: list[Tape] = [_default_tape]
_grad_enabled = [True]


def active_tape() -> Tape:
    return _tape_stack[-1]


@contextlib.contextmanager
def recording(tape: Optional[Tape] = None):
    """Make ``tape`` (a fresh one by default) the active tape for the block."""
    tape = Tape() if tape is None else tape
    _tape_stack.append(tape)
    try:
        yield tape
    finally:
        _tape_stack.pop()


@contextlib.contextmanager
def no_grad():
    _grad_enabled.append(False)
    try:
        yield
    finally:
        _grad_enabled.pop()


def grad_enabled() -> bool:
    return _grad_enabled[-1]


class Tensor:
    """An n-dimensional float64 array that may sit on the active tape."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if any(s <= 0 for s in arr.shape):
            raise ShapeMismatch(f"zero-extent dimension in shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._node: Optional[Node] = None
        self._tape: Optional[Tape] = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.name = None
        t._node = None
        t._tape = None
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
    def node_id(self) -> Optional[int]:
        return None if self._node is None else self._node.id

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeMismatch(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # operator sugar; implementations live in ops.py
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(as_tensor(other), self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    @property
    def T(self):
        from . import ops
        return ops.transpose(self)

    def sum(self, axes=None):
        from . import ops
        return ops.sum(self, axes)

    def mean(self, axes=None):
        from . import ops
        return ops.mean(self, axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_result(arr: np.ndarray, kind: str, inputs: tuple, backward: BackwardFn) -> Tensor:
    """Wrap an op output and record it on the active tape if any input needs grad."""
    out = Tensor._wrap(arr)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        tape = active_tape()
        out.requires_grad = True
        out._node = tape.record(kind, inputs, backward)
        out._tape = tape
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    The tape is left intact; call ``Tape.reset`` (or use a fresh
    :func:`recording` block) between steps.
    """
    if loss.size != 1:
        raise NonScalarLoss(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        if loss.requires_grad:
            _accumulate_leaf(loss, np.ones_like(loss.data))
        return
    tape = loss._tape
    pending: dict[int, np.ndarray] = {loss._node.id: np.ones_like(loss.data)}
    for node in reversed(tape.nodes[: loss._node.id + 1]):
        g = pending.pop(node.id, None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if t._node is not None and t._tape is tape:
                prev = pending.get(t._node.id)
                pending[t._node.id] = gi if prev is None else prev + gi
            elif t._node is None:
                _accumulate_leaf(t, gi)


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    if g.shape != t.data.shape:
        g = g.reshape(t.data.shape)
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = np.zeros_like(p.data)


# --- serialization ------------------------------------------------------------
#
# Layout (all little-endian):
#   uint32 rank | rank x uint64 extents | prod(extents) x float64, row-major

_RANK = struct.Struct("<I")
_EXTENT = struct.Struct("<Q")


def tensor_to_bytes(t) -> bytes:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    buf = io.BytesIO()
    buf.write(_RANK.pack(arr.ndim))
    for s in arr.shape:
        buf.write(_EXTENT.pack(s))
    buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


def read_tensor(stream) -> np.ndarray:
    head = stream.read(_RANK.size)
    if len(head) != _RANK.size:
        raise EOFError("truncated tensor header")
    (rank,) = _RANK.unpack(head)
    ext = stream.read(_EXTENT.size * rank)
    if len(ext) != _EXTENT.size * rank:
        raise EOFError("truncated tensor extents")
    shape = struct.unpack(f"<{rank}Q", ext)
    count = int(np.prod(shape)) if shape else 1
    payload = stream.read(8 * count)
    if len(payload) != 8 * count:
        raise EOFError("truncated tensor payload")
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)


def tensor_from_bytes(blob: bytes) -> np.ndarray:
    return read_tensor(io.BytesIO(blob))
