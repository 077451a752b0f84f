"""Dense tensors with reverse-mode automatic differentiation.

A Tensor wraps a numpy array (float32 for compute, float64 for
verification).  Operations on tensors append records to a thread-local
ComputationTape; ``backward(loss)`` replays the records in reverse to
populate ``grad`` on every leaf created with ``requires_grad=True``.
A tape is consumed by backward and cannot be replayed (no double
backward).
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class TapeError(RuntimeError):
    """Raised on invalid tape use (non-scalar loss, consumed tape)."""


class TapeRecord:
    __slots__ = ("op", "out", "inputs", "fn")

    def __init__(self, op, out, inputs, fn):
        self.op = op          # operation id (name)
        self.out = out        # output Tensor
        self.inputs = inputs  # input Tensors, order matches fn's outputs
        self.fn = fn          # grad_out -> tuple of grads (or None) per input


class ComputationTape:
    """Ordered record of operations for one backward pass."""

    def __init__(self):
        self.records: list[TapeRecord] = []
        self.consumed = False

    def append(self, record):
        if self.consumed:
            raise TapeError("cannot record onto a consumed tape")
        self.records.append(record)


_STATE = threading.local()


def _state():
    if not hasattr(_STATE, "tape"):
        _STATE.tape = None
        _STATE.grad_enabled = True
    return _STATE


def active_tape() -> ComputationTape:
    st = _state()
    if st.tape is None or st.tape.consumed:
        st.tape = ComputationTape()
    return st.tape


class no_grad:
    """Context manager disabling tape recording (inference mode)."""

    def __enter__(self):
        st = _state()
        self._prev = st.grad_enabled
        st.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state().grad_enabled = self._prev
        return False


def grad_enabled() -> bool:
    return _state().grad_enabled


class Tensor:
    """N-dimensional dense array with optional gradient accumulation."""

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._tape: Optional[ComputationTape] = None

    # -- basic introspection ------------------------------------------------

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

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(as_tensor(other, like=self), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, like=self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(as_tensor(other, like=self), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other, like=self), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def moveaxis(self, src, dst):
        return moveaxis(self, src, dst)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)

    def backward(self):
        backward(self)


def as_tensor(value, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(value), dtype=dtype)


# -- recording machinery ----------------------------------------------------


def _record(op: str, out_data: np.ndarray, inputs: Sequence[Tensor],
            fn: Callable) -> Tensor:
    """Wrap op output; append a tape record if gradients are being traced."""
    out = Tensor(out_data)
    if grad_enabled() and any(t.requires_grad or t._tape is not None for t in inputs):
        tape = active_tape()
        out._tape = tape
        tape.append(TapeRecord(op, out, tuple(inputs), fn))
    return out


def backward(loss: Tensor):
    """Populate leaf gradients of everything ``loss`` depends on.

    ``loss`` must be a scalar recorded on the active tape.  The tape is
    consumed: records are dropped and a second backward raises TapeError.
    """
    if loss.data.size != 1:
        raise TapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise TapeError("loss is not attached to a tape (no recorded operations)")
    if tape.consumed:
        raise TapeError("tape already consumed by a previous backward")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.out), None)
        if g is None:
            continue
        parts = rec.fn(g)
        for t, gi in zip(rec.inputs, parts):
            if gi is None:
                continue
            if t.requires_grad:
                t.grad = gi.copy() if t.grad is None else t.grad + gi
            if t._tape is tape:
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
    tape.consumed = True
    tape.records.clear()
    st = _state()
    if st.tape is tape:
        st.tape = None


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise arithmetic --------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b, like=a)
    out = a.data + b.data

    def fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record("add", out, (a, b), fn)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b, like=a)
    out = a.data - b.data

    def fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record("sub", out, (a, b), fn)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b, like=a)
    out = a.data * b.data

    def fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record("mul", out, (a, b), fn)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b, like=a)
    out = a.data / b.data

    def fn(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _record("div", out, (a, b), fn)


def neg(a: Tensor) -> Tensor:
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    out = a.data ** exponent

    def fn(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return _record("pow", out, (a,), fn)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _record("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _record("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _record("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def maximum(a: Tensor, floor: float) -> Tensor:
    """Elementwise max with a scalar; gradient flows where a > floor."""
    out = np.maximum(a.data, floor)

    def fn(g):
        return (g * (a.data > floor),)

    return _record("maximum", out, (a,), fn)


# -- activations -------------------------------------------------------------

_GELU_C = float(np.sqrt(2.0 / np.pi))


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)

    def fn(g):
        return (g * (a.data > 0),)

    return _record("relu", out, (a,), fn)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5*x*(1 + tanh(c*(x + 0.044715*x^3)))."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def fn(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        dout = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
        return (g * dout,)

    return _record("gelu", out, (a,), fn)


def activation(a: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(a)
    if kind == "gelu":
        return gelu(a)
    raise ValueError(f"unknown activation kind {kind!r}")


def softmax(a: Tensor, axis: int) -> Tensor:
    """Numerically stable softmax along ``axis`` (max-subtracted)."""
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        gy = g * out
        return (gy - out * gy.sum(axis=axis, keepdims=True),)

    return _record("softmax", out, (a,), fn)


# -- matmul ------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; supports stacked (batched) operands like np.matmul."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1:
        raise ShapeError(f"matmul needs at least 1-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else -1]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    out = np.matmul(a.data, b.data)

    def fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record("matmul", out, (a, b), fn)


# -- reductions ---------------------------------------------------------------


def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.data.dtype, copy=False),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, a.shape).astype(a.data.dtype, copy=False),)

    return _record("sum", out, (a,), fn)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / count)


# -- shape manipulation --------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = a.data.reshape(shape)
    return _record("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def moveaxis(a: Tensor, src, dst) -> Tensor:
    out = np.moveaxis(a.data, src, dst)
    return _record("moveaxis", out, (a,), lambda g: (np.moveaxis(g, dst, src),))


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    out = np.swapaxes(a.data, ax1, ax2)
    return _record("swapaxes", out, (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


def pad(a: Tensor, pad_width) -> Tensor:
    """Zero padding; pad_width as for np.pad (per-axis (lo, hi) pairs)."""
    pad_width = tuple((int(lo), int(hi)) for lo, hi in pad_width)
    out = np.pad(a.data, pad_width)
    sl = tuple(slice(lo, lo + n) for (lo, _hi), n in zip(pad_width, a.shape))

    def fn(g):
        return (g[sl],)

    return _record("pad", out, (a,), fn)


def crop(a: Tensor, slices) -> Tensor:
    """Slice ``a`` with per-axis slices; adjoint zero-pads back."""
    slices = tuple(slices)
    out = a.data[slices]

    def fn(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[slices] = g
        return (full,)

    return _record("crop", out, (a,), fn)


def concat(tensors, axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def fn(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(tensors)))

    return _record("concat", out, tuple(tensors), fn)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def fn(g):
        moved = np.moveaxis(g, axis, 0)
        return tuple(moved[i] for i in range(len(tensors)))

    return _record("stack", out, tuple(tensors), fn)


def take_rows(a: Tensor, indices: np.ndarray) -> Tensor:
    """Gather rows of a 2-d tensor [R, c]; output shape indices.shape + (c,).

    The adjoint scatter-adds, so repeated indices accumulate correctly.
    """
    if a.ndim != 2:
        raise ShapeError(f"take_rows expects a 2-d tensor, got shape {a.shape}")
    idx = np.asarray(indices)
    out = a.data[idx.reshape(-1)].reshape(idx.shape + (a.shape[1],))

    def fn(g):
        acc = np.zeros(a.shape, dtype=g.dtype)
        np.add.at(acc, idx.reshape(-1), g.reshape(-1, a.shape[1]))
        return (acc,)

    return _record("take_rows", out, (a,), fn)


def roll(a: Tensor, shifts, axes) -> Tensor:
    """Cyclic roll along the given axes; adjoint rolls back."""
    shifts = tuple(int(s) for s in shifts)
    axes = tuple(int(ax) for ax in axes)
    out = np.roll(a.data, shifts, axis=axes)

    def fn(g):
        return (np.roll(g, tuple(-s for s in shifts), axis=axes),)

    return _record("roll", out, (a,), fn)
