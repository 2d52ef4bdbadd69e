"""Immutable tensors and the reverse-mode tape that records operations on them."""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform to an operation's rule."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


_state = threading.local()


def default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype used for newly created tensors.

    Gradient checks run under ``precision(np.float64)``.
    """
    prev = default_dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = prev


class Tensor:
    """A read-only n-d array, optionally a differentiable leaf."""

    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            is_float_array = isinstance(data, np.ndarray) and data.dtype.kind == "f"
            dtype = data.dtype if is_float_array else default_dtype()
        # always copy: the caller may keep mutating its array
        arr = np.array(data, dtype=dtype)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # ops own their fresh output arrays, so no copy is needed
        t = cls.__new__(cls)
        if not isinstance(arr, np.ndarray):
            arr = np.asarray(arr)
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = False
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    # operator sugar; the primitives live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        if isinstance(other, (int, float)):
            return ops.scale(self, other)
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other: float):
        from . import ops
        return ops.scale(self, 1.0 / other)

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


def _not_scalar(t: Tensor) -> float:
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class _Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op: str, inputs: tuple[Tensor, ...], output: Tensor, backward: BackwardFn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of primitive operations for reverse-mode differentiation.

    Use as a context manager; every primitive evaluated inside the block whose
    inputs depend on a ``requires_grad`` leaf is appended to ``nodes``.
    A tape belongs to the thread that entered it.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._tracked: set[int] = set()

    def __enter__(self) -> "Tape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def is_tracked(self, t: Tensor) -> bool:
        return t.requires_grad or id(t) in self._tracked

    def record(self, op: str, inputs: tuple[Tensor, ...], output: Tensor, backward: BackwardFn) -> None:
        self.nodes.append(_Node(op, inputs, output, backward))
        self._tracked.add(id(output))

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Gradient of a scalar ``loss`` with respect to every recorded leaf."""
        if loss.size != 1:
            raise ShapeError(f"backprop needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        if loss.requires_grad:
            leaves[id(loss)] = loss
        for node in reversed(self.nodes):
            g_out = grads.pop(id(node.output), None)
            if g_out is None:
                continue
            in_grads = node.backward(g_out)
            for inp, g in zip(node.inputs, in_grads):
                if g is None or not self.is_tracked(inp):
                    continue
                if g.shape != inp.shape:
                    raise ShapeError(f"{node.op}: gradient shape {g.shape} != input shape {inp.shape}")
                key = id(inp)
                prev = grads.get(key)
                grads[key] = g if prev is None else prev + g
                if inp.requires_grad:
                    leaves[key] = inp
        return {t: grads.get(k, np.zeros_like(t.data)) for k, t in leaves.items()}

    def gradient(self, loss: Tensor, params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
        """Like :meth:`backward` but keyed by parameter name; unused parameters get zeros."""
        by_tensor = self.backward(loss)
        return {k: by_tensor.get(p, np.zeros_like(p.data)) for k, p in params.items()}


def _tape_stack() -> list[Tape]:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def backprop(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    return tape.backward(loss)
