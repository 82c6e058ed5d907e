"""Minimal reverse-mode automatic differentiation over numpy arrays.

Operations are recorded on the active :class:`Tape` whenever at least one
input requires a gradient.  Without an active tape nothing is recorded, which
doubles as a ``no_grad`` mode.

    >>> x = Tensor([3.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = (x * x).sum()
    ...     tape.backward(loss)
    >>> x.grad
    array([6.])
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "DomainError",
    "as_tensor",
    "backward",
    "no_grad",
    "active_tape",
    "elementwise",
    "matmul",
    "reduce",
    "concat",
    "clip",
    "minimum",
    "grad_check",
    "grad_check_params",
    "set_default_dtype",
    "get_default_dtype",
]


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


_DTYPE = np.float64
_local = threading.local()


def set_default_dtype(dtype) -> None:
    """Opt into single precision with ``set_default_dtype(np.float32)``."""
    global _DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DTYPE = dtype


def get_default_dtype():
    return _DTYPE


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextlib.contextmanager
def no_grad():
    """Suspend recording on this thread."""
    stack = _tape_stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


class _Node:
    __slots__ = ("inputs", "output", "rule")

    def __init__(self, inputs, output, rule):
        self.inputs = inputs
        self.output = output
        self.rule = rule


class Tape:
    """Ordered record of operations; one per training step."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape stack corrupted")
        stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, inputs, output, rule) -> None:
        self.nodes.append(_Node(inputs, output, rule))

    def clear(self) -> None:
        self.nodes.clear()

    def backward(self, loss: "Tensor") -> None:
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            return
        if loss.is_leaf:
            loss._accumulate(np.ones_like(loss.data))
            return
        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.rule(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                gi = _unbroadcast(gi, t.shape)
                if t.is_leaf:
                    t._accumulate(gi)
                else:
                    prev = grads.get(id(t))
                    grads[id(t)] = gi if prev is None else prev + gi


def backward(loss: "Tensor") -> None:
    """Backpropagate ``loss`` over the active tape."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    tape = active_tape()
    if tape is None:
        raise RuntimeError("loss requires grad but no tape is active")
    tape.backward(loss)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "is_leaf", "__weakref__")
    __array_ufunc__ = None  # make numpy defer to our reflected operators

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype or _DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.is_leaf = True

    # -- basics -----------------------------------------------------------
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
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad = self.grad + g

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return elementwise("add", self, other)

    def __radd__(self, other):
        return elementwise("add", other, self)

    def __sub__(self, other):
        return elementwise("sub", self, other)

    def __rsub__(self, other):
        return elementwise("sub", other, self)

    def __mul__(self, other):
        return elementwise("mul", self, other)

    def __rmul__(self, other):
        return elementwise("mul", other, self)

    def __truediv__(self, other):
        return elementwise("div", self, other)

    def __rtruediv__(self, other):
        return elementwise("div", other, self)

    def __neg__(self):
        return elementwise("neg", self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return _getitem(self, idx)

    def exp(self):
        return elementwise("exp", self)

    def log(self):
        return elementwise("log", self)

    def tanh(self):
        return elementwise("tanh", self)

    def square(self):
        return elementwise("square", self)

    def sqrt(self):
        return elementwise("sqrt", self)

    def sum(self, axis=None, keepdims=False):
        return reduce("sum", self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce("mean", self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _reshape(self, shape)

    @property
    def T(self):
        return _transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, inputs: Sequence[Tensor], rule: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.is_leaf = True
    out.requires_grad = False
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.is_leaf = False
        tape.record(tuple(inputs), out, rule)
    return out


_BINARY = ("add", "sub", "mul", "div")
_UNARY = ("exp", "log", "tanh", "square", "sqrt", "neg")


def elementwise(kind: str, a, b=None) -> Tensor:
    """Broadcasting elementwise op; ``kind`` is one of add/sub/mul/div or a
    unary exp/log/tanh/square/sqrt/neg."""
    a = as_tensor(a)
    if kind in _BINARY:
        if b is None:
            raise ValueError(f"{kind} needs two operands")
        b = as_tensor(b)
        try:
            np.broadcast_shapes(a.shape, b.shape)
        except ValueError:
            raise ShapeError(
                f"cannot broadcast shapes {a.shape} and {b.shape} for {kind}"
            ) from None
        x, y = a.data, b.data
        if kind == "add":
            return _result(x + y, (a, b), lambda g: (g, g))
        if kind == "sub":
            return _result(x - y, (a, b), lambda g: (g, -g))
        if kind == "mul":
            return _result(x * y, (a, b), lambda g: (g * y, g * x))
        out = x / y
        return _result(out, (a, b), lambda g: (g / y, -g * out / y))
    if kind not in _UNARY:
        raise ValueError(f"unknown elementwise op {kind!r}")
    x = a.data
    if kind == "neg":
        return _result(-x, (a,), lambda g: (-g,))
    if kind == "exp":
        out = np.exp(x)
        return _result(out, (a,), lambda g: (g * out,))
    if kind == "log":
        if np.any(x < 0):
            raise DomainError("log of negative input")
        with np.errstate(divide="ignore"):
            out = np.log(x)
        return _result(out, (a,), lambda g: (g / x,))
    if kind == "tanh":
        out = np.tanh(x)
        return _result(out, (a,), lambda g: (g * (1.0 - out * out),))
    if kind == "square":
        return _result(x * x, (a,), lambda g: (2.0 * g * x,))
    if np.any(x < 0):
        raise DomainError("sqrt of negative input")
    out = np.sqrt(x)
    return _result(out, (a,), lambda g: (0.5 * g / out,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    x, y = a.data, b.data
    return _result(x @ y, (a, b), lambda g: (g @ y.T, x.T @ g))


def _norm_axes(axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for {ndim}-D tensor")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def reduce(kind: str, a, axis=None, keepdims: bool = False) -> Tensor:
    """Sum or mean over ``axis``; an empty axis list returns the input."""
    a = as_tensor(a)
    if kind not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {kind!r}")
    axes = _norm_axes(axis, a.ndim)
    if not axes and axis is not None:
        return a
    out = a.data.sum(axis=axes, keepdims=keepdims)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    if kind == "mean":
        out = out / count
    scale = 1.0 / count if kind == "mean" else 1.0
    shape = a.shape

    def rule(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g * scale, shape),)

    return _result(np.asarray(out), (a,), rule)


def _reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def _transpose(a: Tensor) -> Tensor:
    return _result(a.data.T, (a,), lambda g: (g.T,))


def _getitem(a: Tensor, idx) -> Tensor:
    shape = a.shape

    def rule(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _result(np.array(a.data[idx]), (a,), rule)


def concat(tensors: Iterable, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in ts], axis=axis)
    ax = axis % data.ndim
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def rule(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _result(data, ts, rule)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values; the gradient is zero where clamping is active."""
    a = as_tensor(a)
    x = a.data
    mask = (x >= lo) & (x <= hi)
    return _result(np.clip(x, lo, hi), (a,), lambda g: (g * mask,))


def minimum(a, b) -> Tensor:
    """Elementwise minimum; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast shapes {a.shape} and {b.shape} for minimum") from None
    pick_a = a.data <= b.data
    return _result(np.minimum(a.data, b.data), (a, b),
                   lambda g: (g * pick_a, g * ~pick_a))


def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5) -> float:
    """Max over coordinates of |autodiff - central difference| / max(1, |cd|)."""
    x0 = np.array(as_tensor(x).data, dtype=np.float64)
    leaf = Tensor(x0.copy(), requires_grad=True)
    with Tape() as tape:
        y = f(leaf)
        tape.backward(y)
    auto = leaf.grad if leaf.grad is not None else np.zeros_like(x0)
    num = np.empty_like(x0)
    flat = num.reshape(-1)
    with no_grad():
        for i in range(x0.size):
            xp = x0.copy().reshape(-1)
            xm = x0.copy().reshape(-1)
            xp[i] += h
            xm[i] -= h
            fp = f(Tensor(xp.reshape(x0.shape))).data.sum()
            fm = f(Tensor(xm.reshape(x0.shape))).data.sum()
            flat[i] = (fp - fm) / (2.0 * h)
    err = np.abs(auto - num) / np.maximum(1.0, np.abs(num))
    return float(np.max(err)) if err.size else 0.0


def grad_check_params(
    loss_fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5
) -> float:
    """Like :func:`grad_check` but over tensors ``loss_fn`` closes over.

    Parameter data is perturbed in place outside any tape and restored.
    """
    for p in params:
        p.grad = None
    with Tape() as tape:
        tape.backward(loss_fn())
    worst = 0.0
    with no_grad():
        for p in params:
            auto = p.grad if p.grad is not None else np.zeros_like(p.data)
            flat = p.data.reshape(-1)
            num = np.empty(flat.size)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = float(loss_fn().data.sum())
                flat[i] = orig - h
                fm = float(loss_fn().data.sum())
                flat[i] = orig
                num[i] = (fp - fm) / (2.0 * h)
            err = np.abs(auto.reshape(-1) - num) / np.maximum(1.0, np.abs(num))
            if err.size:
                worst = max(worst, float(np.max(err)))
            if np.isnan(err).any():
                return float("nan")
    return worst
