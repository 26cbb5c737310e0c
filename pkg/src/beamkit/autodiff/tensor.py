"""Tape-based reverse-mode differentiation over real and complex arrays.

Complex tensors are differentiated with respect to their real and imaginary
parts as independent reals.  A gradient buffer for a complex tensor ``z``
holds ``dL/dRe(z) + 1j * dL/dIm(z)``; for a real tensor it holds ``dL/dz``.
With that convention the pullback of ``y = a * b`` is ``g * conj(b)`` for
``a`` and the pullback of ``y = a @ b`` is ``g @ b^H`` for ``a``.

Operations only build tape records while a :class:`Tape` is active and at
least one input is tracked; outside a tape they are plain numpy calls.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np

from ..errors import LifecycleError, ShapeError

LN2 = np.log(2.0)

_state = threading.local()


def _tape_stack() -> list:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


_NATIVE = (np.dtype(np.float64), np.dtype(np.complex128))


class Tensor:
    """A real or complex array, optionally tracked on a tape."""

    __array_priority__ = 100

    __slots__ = ("data", "requires_grad", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data)
        if arr.dtype not in _NATIVE:
            arr = arr.astype(np.complex128 if arr.dtype.kind == "c" else np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self._tape = None

    # views ---------------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def is_complex(self) -> bool:
        return self.data.dtype.kind == "c"

    @property
    def re(self) -> np.ndarray:
        return self.data.real

    @property
    def im(self) -> np.ndarray:
        return self.data.imag if self.is_complex else np.zeros_like(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"

    # operators -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; operations executed inside it are recorded.  A
    tape supports a single :func:`backward` pass; call :meth:`reset` to reuse.
    """

    def __init__(self):
        self.records: List[tuple] = []
        self.consumed = False

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().remove(self)
        return False

    def __len__(self):
        return len(self.records)

    def reset(self):
        for out, _, _, _ in self.records:
            out._tape = None
        self.records = []
        self.consumed = False

    def tracks(self, t: Tensor) -> bool:
        return t.requires_grad or t._tape is self

    def record(self, kind: str, out: Tensor, inputs: Sequence[Tensor], pullback: Callable):
        out._tape = self
        self.records.append((out, kind, tuple(inputs), pullback))


def _make(kind: str, out_data, inputs: Sequence[Tensor], pullback: Callable) -> Tensor:
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and not tape.consumed and any(tape.tracks(t) for t in inputs):
        tape.record(kind, out, inputs, pullback)
    return out


def backward(tape: Tape, loss: Tensor, params: Optional[Iterable[Tensor]] = None) -> Dict[Tensor, np.ndarray]:
    """Gradients of the real scalar ``loss`` for every tracked leaf.

    When ``params`` is given the result has an entry for each of them; leaves
    the loss does not depend on get exact zeros.
    """
    if tape.consumed:
        raise LifecycleError("tape already used for a backward pass; call reset() first")
    if loss._tape is not tape:
        raise LifecycleError("loss was not produced by a forward pass recorded on this tape")
    if loss.data.size != 1 or loss.is_complex:
        raise ShapeError(f"backward needs a real scalar loss, got {loss.data.dtype} {loss.shape}")
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: Dict[int, Tensor] = {}
    for out, _, inputs, pullback in reversed(tape.records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for t, gi in zip(inputs, pullback(g)):
            if gi is None or not tape.tracks(t):
                continue
            if t.requires_grad:
                leaves[id(t)] = t
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    tape.consumed = True
    result = {leaves[k]: grads[k] for k in leaves if k in grads}
    if params is not None:
        full = {}
        for p in params:
            full[p] = result.get(p, np.zeros_like(p.data))
        return full
    return result


# gradient helpers ----------------------------------------------------------

def _unbroadcast(g: np.ndarray, like: Tensor) -> np.ndarray:
    shape = like.shape
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, size in enumerate(shape):
        if size == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    if not like.is_complex and np.iscomplexobj(g):
        g = g.real
    return g


def _check_broadcast(a: Tensor, b: Tensor, kind: str):
    if a.data.shape == b.data.shape:
        return
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from None


# kink bookkeeping for the finite-difference harness -----------------------

_kinks = threading.local()


@contextmanager
def record_kinks():
    """Collect the branch pattern of every non-smooth op evaluated inside."""
    log: list = []
    prev = getattr(_kinks, "log", None)
    _kinks.log = log
    try:
        yield log
    finally:
        _kinks.log = prev


def _note_kink(mask: np.ndarray):
    log = getattr(_kinks, "log", None)
    if log is not None:
        log.append(np.packbits(mask.ravel()).tobytes())


# elementwise arithmetic ----------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _make("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * np.conj(b.data), a),
                            _unbroadcast(g * np.conj(a.data), b)))


def scale(a, s: float) -> Tensor:
    """Multiply by a Python scalar."""
    return mul(a, Tensor(s))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    y = a.data / b.data

    def pullback(g):
        ga = g / np.conj(b.data)
        gb = -ga * np.conj(y)
        return _unbroadcast(ga, a), _unbroadcast(gb, b)

    return _make("div", y, (a, b), pullback)


def conj(a) -> Tensor:
    a = as_tensor(a)
    return _make("conj", np.conj(a.data), (a,), lambda g: (np.conj(g),))


# linear algebra and structure ---------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands with ndim >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    try:
        y = a.data @ b.data
    except ValueError:
        raise ShapeError(f"matmul: cannot broadcast {a.shape} @ {b.shape}") from None

    def pullback(g):
        ga = g @ np.conj(np.swapaxes(b.data, -1, -2))
        gb = np.conj(np.swapaxes(a.data, -1, -2)) @ g
        return _unbroadcast(ga, a), _unbroadcast(gb, b)

    return _make("matmul", y, (a, b), pullback)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        y = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise ShapeError(f"concat along axis {axis}: incompatible shapes {shapes}") from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def pullback(g):
        parts = np.split(g, sizes, axis=axis)
        return tuple(_unbroadcast(p, t) for p, t in zip(parts, tensors))

    return _make("concat", y, tensors, pullback)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        y = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}") from None
    return _make("reshape", y, (a,), lambda g: (g.reshape(a.shape),))


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    return _make("swapaxes", np.swapaxes(a.data, ax1, ax2), (a,),
                 lambda g: (np.swapaxes(g, ax1, ax2),))


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)

    def pullback(g):
        out = np.zeros_like(a.data, dtype=np.result_type(a.data, g))
        np.add.at(out, idx, g)
        return (_unbroadcast(out, a),)

    return _make("getitem", a.data[idx], (a,), pullback)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    y = a.data.sum(axis=axis, keepdims=keepdims)

    def pullback(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make("reduce_sum", y, (a,), pullback)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(reduce_sum(a, axis, keepdims), 1.0 / n)


def batch_norm(a, axes, eps: float):
    """Fused ``(a - mean) / sqrt(var + eps)`` with biased statistics over ``axes`` (real input).

    Returns ``(normalized, mean, var)``; the statistics are plain arrays.
    """
    a = as_tensor(a)
    if a.is_complex:
        raise ShapeError("batch_norm takes real input; normalize Re and Im separately")
    axes = tuple(axes)
    x = a.data
    mean = x.mean(axis=axes, keepdims=True)
    xc = x - mean
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def pullback(g):
        gm = g.mean(axis=axes, keepdims=True)
        gx = (g * xhat).mean(axis=axes, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _make("batch_norm", xhat, (a,), pullback), mean, var


# complex <-> real -----------------------------------------------------------

def real(a) -> Tensor:
    a = as_tensor(a)
    return _make("real", a.data.real.copy(), (a,), lambda g: (g.astype(a.data.dtype),))


def imag(a) -> Tensor:
    a = as_tensor(a)
    return _make("imag", a.data.imag.copy() if a.is_complex else np.zeros_like(a.data), (a,),
                 lambda g: (1j * g if a.is_complex else None,))


def modulus(a) -> Tensor:
    """``|z|`` elementwise; for real input this is the absolute value."""
    a = as_tensor(a)
    y = np.abs(a.data)
    if not a.is_complex:
        _note_kink(a.data > 0)

    def pullback(g):
        with np.errstate(invalid="ignore", divide="ignore"):
            unit = np.where(y > 0, a.data / np.where(y > 0, y, 1.0), 0.0)
        return (g * unit,)

    return _make("modulus", y, (a,), pullback)


def abs2(a) -> Tensor:
    """``|z|^2`` elementwise, smooth everywhere."""
    a = as_tensor(a)
    y = a.data.real ** 2 + (a.data.imag ** 2 if a.is_complex else 0.0)
    return _make("abs2", y, (a,), lambda g: (2.0 * g * a.data,))


# activations ----------------------------------------------------------------

def _leaky(x: np.ndarray, slope: float):
    mask = x > 0
    _note_kink(mask)
    return np.where(mask, x, slope * x), np.where(mask, 1.0, slope)


def leaky_relu(a, slope: float = 0.01) -> Tensor:
    a = as_tensor(a)
    if a.is_complex:
        raise ShapeError("leaky_relu expects a real tensor; use c_leaky_relu")
    y, d = _leaky(a.data, slope)
    return _make("leaky_relu", y, (a,), lambda g: (g * d,))


def relu(a) -> Tensor:
    return leaky_relu(a, 0.0)


def c_leaky_relu(a, slope: float = 0.01) -> Tensor:
    """Split activation: leaky ReLU on the real and imaginary parts separately."""
    a = as_tensor(a)
    if not a.is_complex:
        return leaky_relu(a, slope)
    yr, dr = _leaky(a.data.real, slope)
    yi, di = _leaky(a.data.imag, slope)
    return _make("c_leaky_relu", yr + 1j * yi, (a,),
                 lambda g: (g.real * dr + 1j * (g.imag * di),))


def c_relu(a) -> Tensor:
    return c_leaky_relu(a, 0.0)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    return _make("exp", y, (a,), lambda g: (g * np.conj(y),))


def log2(a) -> Tensor:
    a = as_tensor(a)
    if a.is_complex:
        raise ShapeError("log2 expects a real tensor")
    return _make("log2", np.log2(a.data), (a,), lambda g: (g / (a.data * LN2),))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if a.is_complex:
        raise ShapeError("sqrt expects a real tensor")
    y = np.sqrt(a.data)
    return _make("sqrt", y, (a,), lambda g: (g / (2.0 * y),))


def maximum(a, c: float) -> Tensor:
    """``max(a, c)`` against a constant; the gradient passes only where ``a > c``."""
    a = as_tensor(a)
    mask = a.data > c
    _note_kink(mask)
    return _make("maximum", np.where(mask, a.data, c), (a,), lambda g: (g * mask,))


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if a.is_complex:
        raise ShapeError("softmax is defined over real scores")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _make("softmax", y, (a,),
                 lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))
