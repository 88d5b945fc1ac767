"""Differentiable primitives.

Every function takes Tensors, computes the forward value with numpy and, when
a tape is active and an input requires gradients, records a backward rule.
Convolution uses a direct sliding-window formulation on channel-first
(C, H, W) feature maps.
"""

from __future__ import annotations

from collections.abc import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from numpy.typing import ArrayLike

from fifo_desk.errors import DomainValueError, ShapeError
from fifo_desk.tensorcore.tensor import Array, BackwardRule, Tensor, active_tape

Axis = int | tuple[int, ...] | None


def as_tensor(value: Tensor | ArrayLike) -> Tensor:
    """Wrap a constant as a tensor that needs no gradient."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _emit(
    op: str,
    inputs: Sequence[Tensor],
    out: Array,
    backward: BackwardRule,
    kink_margin: float | None = None,
) -> Tensor:
    tape = active_tape()
    needs_grad = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=needs_grad)
    if needs_grad and tape is not None:
        tape.record(op, inputs, result, backward, kink_margin)
    return result


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum a broadcast gradient back down to the given shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        msg = f"{op}: shapes {a.shape} and {b.shape} do not broadcast"
        raise ShapeError(msg) from e


# Element-wise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("add", a, b)

    def backward(g: Array) -> list[Array | None]:
        return [_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)]

    return _emit("add", (a, b), a.data + b.data, backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("sub", a, b)

    def backward(g: Array) -> list[Array | None]:
        return [_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)]

    return _emit("sub", (a, b), a.data - b.data, backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("mul", a, b)
    a_data, b_data = a.data, b.data

    def backward(g: Array) -> list[Array | None]:
        return [_unbroadcast(g * b_data, a.shape), _unbroadcast(g * a_data, b.shape)]

    return _emit("mul", (a, b), a_data * b_data, backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("div", a, b)
    a_data, b_data = a.data, b.data

    def backward(g: Array) -> list[Array | None]:
        return [
            _unbroadcast(g / b_data, a.shape),
            _unbroadcast(-g * a_data / (b_data * b_data), b.shape),
        ]

    return _emit("div", (a, b), a_data / b_data, backward)


def scale(x: Tensor, factor: float) -> Tensor:
    def backward(g: Array) -> list[Array | None]:
        return [g * factor]

    return _emit("scale", (x,), x.data * factor, backward)


def square(x: Tensor) -> Tensor:
    x_data = x.data

    def backward(g: Array) -> list[Array | None]:
        return [2.0 * x_data * g]

    return _emit("square", (x,), x_data * x_data, backward)


def sqrt(x: Tensor) -> Tensor:
    if np.any(x.data < 0):
        msg = f"sqrt: negative input (min {x.data.min()!r})"
        raise DomainValueError(msg)
    out = np.sqrt(x.data)

    def backward(g: Array) -> list[Array | None]:
        return [g / (2.0 * out)]

    return _emit("sqrt", (x,), out, backward)


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        msg = f"log: non-positive input (min {x.data.min()!r})"
        raise DomainValueError(msg)
    x_data = x.data

    def backward(g: Array) -> list[Array | None]:
        return [g / x_data]

    return _emit("log", (x,), np.log(x_data), backward)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def backward(g: Array) -> list[Array | None]:
        return [g * out]

    return _emit("exp", (x,), out, backward)


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    x_data = x.data
    positive = x_data > 0

    def backward(g: Array) -> list[Array | None]:
        return [np.where(positive, g, slope * g)]

    margin = float(np.abs(x_data).min()) if x_data.size else None
    return _emit("leaky_relu", (x,), np.where(positive, x_data, slope * x_data), backward, margin)


def clamp_min(x: Tensor, floor: float) -> Tensor:
    """max(x, floor) with subgradient 0 at and below the floor.

    Serves as the hinge [.]_+ (floor 0) and as the probability floor inside logs.
    """
    x_data = x.data
    above = x_data > floor

    def backward(g: Array) -> list[Array | None]:
        return [np.where(above, g, 0.0)]

    margin = float(np.abs(x_data - floor).min()) if x_data.size else None
    return _emit("clamp_min", (x,), np.where(above, x_data, floor), backward, margin)


# Linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        msg = f"matmul: incompatible shapes {a.shape} and {b.shape}"
        raise ShapeError(msg)
    a_data, b_data = a.data, b.data

    def backward(g: Array) -> list[Array | None]:
        return [g @ b_data.T, a_data.T @ g]

    return _emit("matmul", (a, b), a_data @ b_data, backward)


def dot(a: Tensor, b: Tensor) -> Tensor:
    """Inner product of two vectors of equal length."""
    if a.data.ndim != 1 or a.shape != b.shape:
        msg = f"dot: expected two equal-length vectors, got {a.shape} and {b.shape}"
        raise ShapeError(msg)
    a_data, b_data = a.data, b.data

    def backward(g: Array) -> list[Array | None]:
        return [g * b_data, g * a_data]

    return _emit("dot", (a, b), np.asarray(a_data @ b_data), backward)


def l2_norm(x: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:
    out = np.sqrt(np.sum(x.data * x.data, axis=axis, keepdims=keepdims))
    x_data = x.data

    def backward(g: Array) -> list[Array | None]:
        g_full = g if keepdims or axis is None else np.expand_dims(g, axis)
        n_full = out if keepdims or axis is None else np.expand_dims(out, axis)
        return [g_full * x_data / n_full]

    return _emit("l2_norm", (x,), out, backward)


# Reductions


def sum(x: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape

    def backward(g: Array) -> list[Array | None]:
        g_full = g if keepdims or axis is None else np.expand_dims(g, axis)
        return [np.broadcast_to(g_full, shape).copy()]

    return _emit("sum", (x,), np.sum(x.data, axis=axis, keepdims=keepdims), backward)


def mean(x: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g: Array) -> list[Array | None]:
        return [out * (g - np.sum(g * out, axis=axis, keepdims=True))]

    return _emit("softmax", (x,), out, backward)


# Shape manipulation


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    if int(np.prod(shape)) != x.size:
        msg = f"reshape: cannot view shape {x.shape} as {shape}"
        raise ShapeError(msg)
    original = x.shape

    def backward(g: Array) -> list[Array | None]:
        return [g.reshape(original)]

    return _emit("reshape", (x,), x.data.reshape(shape), backward)


def transpose(x: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    order = tuple(reversed(range(x.data.ndim))) if axes is None else axes
    if sorted(order) != list(range(x.data.ndim)):
        msg = f"transpose: axes {order} do not permute shape {x.shape}"
        raise ShapeError(msg)
    inverse = tuple(int(i) for i in np.argsort(order))

    def backward(g: Array) -> list[Array | None]:
        return [g.transpose(inverse)]

    return _emit("transpose", (x,), x.data.transpose(order), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        msg = "concat: empty input"
        raise ShapeError(msg)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        shapes = [t.shape for t in tensors]
        msg = f"concat: shapes {shapes} cannot be joined on axis {axis}"
        raise ShapeError(msg) from e
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g: Array) -> list[Array | None]:
        return list(np.split(g, bounds, axis=axis))

    return _emit("concat", tuple(tensors), out, backward)


def take(x: Tensor, indices: ArrayLike) -> Tensor:
    """Gather entries of the flattened tensor at the given flat indices."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= x.size):
        msg = f"take: indices out of range for shape {x.shape}"
        raise ShapeError(msg)
    shape = x.shape
    size = x.size

    def backward(g: Array) -> list[Array | None]:
        full = np.zeros(size)
        np.add.at(full, idx.ravel(), g.ravel())
        return [full.reshape(shape)]

    return _emit("take", (x,), x.data.reshape(-1)[idx], backward)


# Convolution and resampling


def conv2d(
    x: Tensor, weight: Tensor, bias: Tensor | None, stride: int = 1, padding: int = 0
) -> Tensor:
    """2-D cross-correlation of a (C, H, W) map with (O, C, k, k) kernels.

    Args:
        x: Input feature map, channel-first
        weight: Kernels
        bias: Per-output-channel bias of shape (O,), or None
        stride: Step between windows (1 or 2)
        padding: Zero padding added on every side

    Returns:
        Output map of shape (O, H_out, W_out)
    """
    if x.data.ndim != 3 or weight.data.ndim != 4 or weight.shape[1] != x.shape[0]:
        msg = f"conv2d: input {x.shape} does not match kernel {weight.shape}"
        raise ShapeError(msg)
    if weight.shape[2] != weight.shape[3]:
        msg = f"conv2d: kernel {weight.shape} is not square"
        raise ShapeError(msg)
    if bias is not None and bias.shape != (weight.shape[0],):
        msg = f"conv2d: bias {bias.shape} does not match kernel {weight.shape}"
        raise ShapeError(msg)
    if stride not in (1, 2):
        msg = f"conv2d: unsupported stride {stride}"
        raise ShapeError(msg)
    channels, height, width = x.shape
    k = weight.shape[2]
    if height + 2 * padding < k or width + 2 * padding < k:
        msg = f"conv2d: input {x.shape} smaller than kernel {weight.shape} with padding {padding}"
        raise ShapeError(msg)

    padded = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(padded, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    out_h, out_w = windows.shape[1], windows.shape[2]
    w_data = weight.data
    out = np.tensordot(w_data, windows, axes=([1, 2, 3], [0, 3, 4]))
    if bias is not None:
        out = out + bias.data[:, None, None]

    def backward(g: Array) -> list[Array | None]:
        grad_w = np.tensordot(g, windows, axes=([1, 2], [1, 2]))
        grad_windows = np.tensordot(w_data, g, axes=([0], [0]))  # (C, k, k, H_out, W_out)
        grad_padded = np.zeros_like(padded)
        for i in range(k):
            for j in range(k):
                grad_padded[
                    :,
                    i : i + stride * (out_h - 1) + 1 : stride,
                    j : j + stride * (out_w - 1) + 1 : stride,
                ] += grad_windows[:, i, j]
        grad_x = grad_padded[:, padding : padding + height, padding : padding + width]
        grads: list[Array | None] = [grad_x, grad_w]
        if bias is not None:
            grads.append(g.sum(axis=(1, 2)))
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit("conv2d", inputs, out, backward)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x upsampling of a (C, H, W) map."""
    if x.data.ndim != 3:
        msg = f"upsample2x: expected (C, H, W), got {x.shape}"
        raise ShapeError(msg)
    channels, height, width = x.shape
    out = x.data.repeat(2, axis=1).repeat(2, axis=2)

    def backward(g: Array) -> list[Array | None]:
        return [g.reshape(channels, height, 2, width, 2).sum(axis=(2, 4))]

    return _emit("upsample2x", (x,), out, backward)
