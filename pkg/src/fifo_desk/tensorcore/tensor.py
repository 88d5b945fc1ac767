"""Tensor and tape types for reverse-mode differentiation.

A Tensor wraps a float64 numpy array. Operations executed while a Tape is
active, and with at least one input that requires gradients, are appended to
that tape together with their backward rule. Tape.backward() then walks the
recorded operations in reverse order, which is a reverse topological order
because an operation can only consume tensors recorded before it.
"""

from __future__ import annotations

import contextvars
import logging
from collections.abc import Callable, Iterator, Sequence
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Any

import numpy as np
from numpy.typing import ArrayLike, NDArray

from fifo_desk.errors import ShapeError

logger = logging.getLogger(__name__)

Array = NDArray[np.float64]
BackwardRule = Callable[[Array], Sequence[Array | None]]

_ACTIVE_TAPE: contextvars.ContextVar[Tape | None] = contextvars.ContextVar(
    "fifo_desk_active_tape", default=None
)


class Tensor:
    """Dense float64 array that can take part in a recorded computation.

    Attributes:
        data: Row-major float64 values
        requires_grad: Whether gradients are accumulated for this tensor
        grad: Gradient accumulator, same shape as data (None until a backward pass)
        node_id: Identifier in the tape that last recorded this tensor
        name: Optional label used in diagnostics and checkpoints
    """

    __slots__ = ("data", "requires_grad", "grad", "node_id", "name")

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        name: str | None = None,
    ) -> None:
        self.data: Array = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Array | None = None
        self.node_id: int | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        """Return the value of a single-element tensor as a float."""
        if self.data.size != 1:
            msg = f"item() needs a single-element tensor, got shape {self.shape}"
            raise ShapeError(msg)
        return float(self.data.reshape(()))

    def numpy(self) -> Array:
        """Return a copy of the underlying values."""
        return self.data.copy()

    def detach(self) -> Tensor:
        """Return a tensor with the same values that is cut from the tape."""
        return Tensor(self.data, requires_grad=False, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    # Operator sugar; the implementations live in tensorcore.ops.

    def __add__(self, other: Tensor | float) -> Tensor:
        from fifo_desk.tensorcore import ops

        return ops.add(self, ops.as_tensor(other))

    def __radd__(self, other: float) -> Tensor:
        from fifo_desk.tensorcore import ops

        return ops.add(ops.as_tensor(other), self)

    def __sub__(self, other: Tensor | float) -> Tensor:
        from fifo_desk.tensorcore import ops

        return ops.sub(self, ops.as_tensor(other))

    def __rsub__(self, other: float) -> Tensor:
        from fifo_desk.tensorcore import ops

        return ops.sub(ops.as_tensor(other), self)

    def __mul__(self, other: Tensor | float) -> Tensor:
        from fifo_desk.tensorcore import ops

        if isinstance(other, Tensor):
            return ops.mul(self, other)
        return ops.scale(self, float(other))

    def __rmul__(self, other: float) -> Tensor:
        from fifo_desk.tensorcore import ops

        return ops.scale(self, float(other))

    def __truediv__(self, other: Tensor | float) -> Tensor:
        from fifo_desk.tensorcore import ops

        if isinstance(other, Tensor):
            return ops.div(self, other)
        return ops.scale(self, 1.0 / float(other))

    def __neg__(self) -> Tensor:
        from fifo_desk.tensorcore import ops

        return ops.scale(self, -1.0)

    def __matmul__(self, other: Tensor) -> Tensor:
        from fifo_desk.tensorcore import ops

        return ops.matmul(self, other)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"


@dataclass
class TapeEntry:
    """One recorded operation.

    Attributes:
        op: Operation name
        input_ids: Node ids of the inputs (None for inputs that need no gradient)
        output_id: Node id of the produced tensor
        backward: Maps the output gradient to one gradient per input
        kink_margin: Distance of the nearest input value to a non-differentiable
            point of the operation, for piecewise operations
    """

    op: str
    input_ids: tuple[int | None, ...]
    output_id: int
    backward: BackwardRule
    kink_margin: float | None = None


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; operations run inside the block are recorded.
    Node ids are assigned in recording order and are strictly increasing.
    """

    def __init__(self) -> None:
        self._entries: list[TapeEntry] = []
        self._nodes: dict[int, Tensor] = {}
        self._ids_by_object: dict[int, int] = {}
        self._next_id = 0
        self._token: contextvars.Token[Tape | None] | None = None

    def __enter__(self) -> Tape:
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc: Any) -> None:
        if self._token is not None:
            _ACTIVE_TAPE.reset(self._token)
            self._token = None

    @property
    def entries(self) -> list[TapeEntry]:
        return list(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def _register(self, tensor: Tensor) -> int:
        key = id(tensor)
        node_id = self._ids_by_object.get(key)
        if node_id is None:
            node_id = self._next_id
            self._next_id += 1
            self._ids_by_object[key] = node_id
            self._nodes[node_id] = tensor
        tensor.node_id = node_id
        return node_id

    def record(
        self,
        op: str,
        inputs: Sequence[Tensor],
        output: Tensor,
        backward: BackwardRule,
        kink_margin: float | None = None,
    ) -> None:
        input_ids = tuple(self._register(t) if t.requires_grad else None for t in inputs)
        output_id = self._register(output)
        self._entries.append(TapeEntry(op, input_ids, output_id, backward, kink_margin))

    def min_kink_margin(self) -> float:
        """Smallest recorded distance to a kink, or +inf when none was recorded."""
        margins = [e.kink_margin for e in self._entries if e.kink_margin is not None]
        return min(margins) if margins else float("inf")

    def backward(self, root: Tensor) -> None:
        """Accumulate d(root)/d(tensor) into the grad field of every recorded tensor.

        Args:
            root: Scalar tensor recorded on this tape

        Raises:
            ShapeError: If root is not a single-element tensor
            ValueError: If root was not recorded on this tape
        """
        if root.data.size != 1:
            msg = f"backward() needs a scalar root, got shape {root.shape}"
            raise ShapeError(msg)
        root_id = self._ids_by_object.get(id(root))
        if root_id is None:
            msg = "backward() root was not recorded on this tape"
            raise ValueError(msg)

        grads: dict[int, Array] = {root_id: np.ones_like(root.data)}
        for entry in reversed(self._entries):
            grad_out = grads.get(entry.output_id)
            if grad_out is None:
                continue
            for input_id, grad_in in zip(entry.input_ids, entry.backward(grad_out), strict=True):
                if input_id is None or grad_in is None:
                    continue
                if input_id in grads:
                    grads[input_id] = grads[input_id] + grad_in
                else:
                    grads[input_id] = grad_in

        for node_id, tensor in self._nodes.items():
            if not tensor.requires_grad:
                continue
            grad = grads.get(node_id)
            if grad is None:
                grad = np.zeros_like(tensor.data)
            tensor.grad = grad.copy() if tensor.grad is None else tensor.grad + grad
        logger.debug("Backward pass over %d tape entries", len(self._entries))

    def clear(self) -> None:
        """Drop all entries and invalidate the grad field of every recorded tensor."""
        for tensor in self._nodes.values():
            tensor.grad = None
            tensor.node_id = None
        self._entries.clear()
        self._nodes.clear()
        self._ids_by_object.clear()


def active_tape() -> Tape | None:
    """Return the tape operations are currently recorded on, if any."""
    return _ACTIVE_TAPE.get()


@contextmanager
def no_record() -> Iterator[None]:
    """Temporarily suspend recording on the active tape."""
    token = _ACTIVE_TAPE.set(None)
    try:
        yield
    finally:
        _ACTIVE_TAPE.reset(token)


@contextmanager
def frozen(params: Sequence[Tensor]) -> Iterator[None]:
    """Mark parameters as not requiring gradients for the duration of the block.

    Operations still record when another input requires gradients, so
    gradients keep flowing through frozen parameters to their other inputs.
    """
    previous = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, flag in zip(params, previous, strict=True):
            p.requires_grad = flag
