"""Dense f32 tensors with a tape-based reverse-mode autodiff.

Every op computes its result eagerly with numpy. When a :class:`Tape` is
active and at least one input requires a gradient, the op appends a node
holding its backward rule. ``Tape.backward(loss)`` then walks the nodes in
reverse recording order, which is a valid reverse topological order because
an op can only consume tensors that already exist.

Broadcasting follows numpy's trailing-axis alignment: two shapes are
compatible when, axis by axis, the sizes agree or one of them is 1 (a missing
leading axis counts as 1). Gradients are summed back over expanded axes.

ReLU uses the subgradient 0 at exactly 0.
"""
from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterator, Sequence

import numpy as np

DTYPE = np.float32

_id_counter = itertools.count()
_active_tapes: list["Tape"] = []
_mac_log: list[list[tuple[str, int]]] = []


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "name", "__weakref__")

    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim > 0 and 0 in arr.shape:
            raise ValueError(f"zero-sized dimension in shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id: int | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
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
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the engine dtype (used by :func:`grad_check`)."""
    global DTYPE
    old, DTYPE = DTYPE, np.dtype(dtype).type
    try:
        yield
    finally:
        DTYPE = old


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- tape -------------------------------------------------------------------

class _Node:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Records differentiable ops executed inside ``with Tape() as tape:``."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tapes.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> None:
        """Populate ``.grad`` on every tensor recorded on this tape.

        Gradients are overwritten, not accumulated across calls. Tensors that
        took part in the recording but do not influence ``loss`` get zeros.
        """
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.node_id is None or not any(n.output is loss for n in self.nodes):
            raise ValueError("loss was not produced on this tape")
        seen: set[int] = set()
        for node in self.nodes:
            for t in itertools.chain(node.inputs, (node.output,)):
                if id(t) not in seen and (t.requires_grad or t is node.output):
                    seen.add(id(t))
                    t.grad = np.zeros_like(t.data)
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            g = node.output.grad
            if g is None or not g.any():
                continue
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                t.grad += _unbroadcast(gi, t.shape).astype(DTYPE, copy=False)


def backward(tape: Tape, loss: Tensor) -> None:
    tape.backward(loss)


def no_tape_active() -> bool:
    return not _active_tapes


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _make(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable | None, op: str) -> Tensor:
    data = np.asarray(data, dtype=DTYPE)
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor(data)
    if _active_tapes and backward is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node_id = next(_id_counter)
        _active_tapes[-1].nodes.append(_Node(tuple(inputs), out, backward))
    return out


def _check_finite(*ts: Tensor, op: str) -> None:
    for t in ts:
        if not np.isfinite(t.data).all():
            raise NonFiniteError(f"{op} received non-finite input")


# -- MAC accounting hook -----------------------------------------------------

@contextlib.contextmanager
def record_macs() -> Iterator[list[tuple[str, int]]]:
    """Collect ``(op, macs)`` for every matmul/conv executed in the block."""
    log: list[tuple[str, int]] = []
    _mac_log.append(log)
    try:
        yield log
    finally:
        _mac_log.remove(log)


def _log_macs(op: str, macs: int) -> None:
    for log in _mac_log:
        log.append((op, int(macs)))


# -- unary ------------------------------------------------------------------

def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    _check_finite(x, op="relu")
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    _check_finite(x, op="sigmoid")
    y = _sigmoid_np(x.data)
    return _make(y, (x,), lambda g: (g * y * (1 - y),), "sigmoid")


def log_sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    _check_finite(x, op="log_sigmoid")
    d = x.data
    y = np.minimum(d, 0) - np.log1p(np.exp(-np.abs(d)))
    s = _sigmoid_np(-d)
    return _make(y, (x,), lambda g: (g * s,), "log_sigmoid")


def exp(x: Tensor) -> Tensor:
    x = as_tensor(x)
    _check_finite(x, op="exp")
    with np.errstate(over="ignore"):
        y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,), "exp")


def log(x: Tensor) -> Tensor:
    x = as_tensor(x)
    if (x.data <= 0).any():
        raise ValueError("log of non-positive value")
    d = x.data
    return _make(np.log(d), (x,), lambda g: (g / d,), "log")


def neg(x: Tensor) -> Tensor:
    x = as_tensor(x)
    _check_finite(x, op="neg")
    return _make(-x.data, (x,), lambda g: (-g,), "neg")


def power(x: Tensor, p: float) -> Tensor:
    """Elementwise ``x ** p`` for a constant exponent."""
    x = as_tensor(x)
    _check_finite(x, op="power")
    d = x.data
    if p == 0:
        return Tensor(np.ones_like(d))
    if p == 2:
        return _make(d * d, (x,), lambda g: (2 * g * d,), "power")
    if p == 1:
        return _make(d.copy(), (x,), lambda g: (g,), "power")
    if (d < 0).any() and float(p) != int(p):
        raise ValueError("fractional power of a negative value")
    y = np.power(d, p)
    return _make(y, (x,), lambda g: (g * p * np.power(d, p - 1),), "power")


def clamp_min(x: Tensor, lo: float) -> Tensor:
    x = as_tensor(x)
    keep = x.data >= lo
    return _make(np.where(keep, x.data, lo), (x,), lambda g: (g * keep,), "clamp_min")


_UNARY = {"relu": relu, "sigmoid": sigmoid, "exp": exp, "neg": neg, "log": log,
          "log_sigmoid": log_sigmoid}


def unary(kind: str, x: Tensor) -> Tensor:
    try:
        fn = _UNARY[kind]
    except KeyError:
        raise ValueError(f"unknown unary op {kind!r}") from None
    return fn(x)


# -- binary -----------------------------------------------------------------

def _bshape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape(a, b, "add")
    _check_finite(a, b, op="add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape(a, b, "sub")
    _check_finite(a, b, op="sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape(a, b, "mul")
    _check_finite(a, b, op="mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape(a, b, "div")
    _check_finite(a, b, op="div")
    if (b.data == 0).any():
        raise ZeroDivisionError("div: zero in divisor")
    ad, bd = a.data, b.data
    y = ad / bd
    return _make(y, (a, b), lambda g: (g / bd, -g * y / bd), "div")


_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def binary(kind: str, a, b) -> Tensor:
    try:
        fn = _BINARY[kind]
    except KeyError:
        raise ValueError(f"unknown binary op {kind!r}") from None
    return fn(a, b)


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs at least 2-D operands")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    _check_finite(a, b, op="matmul")
    ad, bd = a.data, b.data
    y = ad @ bd
    batch = int(np.prod(y.shape[:-2], dtype=np.int64)) if y.ndim > 2 else 1
    _log_macs("matmul", batch * a.shape[-2] * a.shape[-1] * b.shape[-1])

    def back(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _make(y, (a, b), back, "matmul")


# -- reductions and shape ops -------------------------------------------------

def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    y = x.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make(y, (x,), back, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum_(x, axis, keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def getitem(x: Tensor, index) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    fancy = any(isinstance(i, (list, np.ndarray)) for i in (index if isinstance(index, tuple) else (index,)))

    def back(g):
        out = np.zeros(shape, dtype=DTYPE)
        if fancy:
            np.add.at(out, index, g)
        else:
            out[index] = g
        return (out,)

    return _make(x.data[index], (x,), back, "getitem")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    cuts = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([x.data for x in xs], axis=axis), xs,
                 lambda g: tuple(np.split(g, cuts, axis=axis)), "concat")


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    return concat([reshape(x, x.shape[:axis] + (1,) + x.shape[axis:]) for x in map(as_tensor, xs)], axis)
