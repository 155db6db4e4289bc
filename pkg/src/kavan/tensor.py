"""Dense float64 tensors with reverse-mode differentiation.

Every differentiable operation records its inputs and a closure computing
input adjoints from the output adjoint. ``backward`` orders the recorded graph
topologically (the tape) and replays the closures in reverse, so each
operation's adjoint rule runs exactly once per call.

Binary operations require equal shapes; the only implicit broadcast allowed is
between a tensor and a single-element operand. Anything else goes through
``broadcast_to``.
"""

from __future__ import annotations

import json
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericInputError

DTYPE = np.float64


class Tensor:
    """n-dimensional float64 array that can take part in differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = ""

    @classmethod
    def _result(cls, data: np.ndarray, parents: tuple, backward: Callable, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self.op or 'leaf'!r})"

    def __len__(self) -> int:
        return self.shape[0]

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- operators -----------------------------------------------------
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None) -> "Tensor":
        return sum_(self, axis)

    def mean(self, axis=None) -> "Tensor":
        return mean(self, axis)

    def backward(self) -> None:
        backward(self)

    # -- serialization -------------------------------------------------
    def to_dict(self) -> dict:
        return {"shape": list(self.shape), "data": self.data.reshape(-1).tolist()}

    @classmethod
    def from_dict(cls, payload: dict, requires_grad: bool = False) -> "Tensor":
        shape = tuple(int(s) for s in payload["shape"])
        data = np.asarray(payload["data"], dtype=DTYPE)
        if data.size != int(np.prod(shape, dtype=np.int64)):
            raise DimensionError(f"data length {data.size} does not match shape {shape}")
        return cls(data.reshape(shape), requires_grad=requires_grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def save_tensor(t: Tensor, path) -> None:
    with open(path, "w") as fh:
        json.dump(t.to_dict(), fh)


def load_tensor(path, requires_grad: bool = False) -> Tensor:
    with open(path) as fh:
        return Tensor.from_dict(json.load(fh), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# tape and backward
# ---------------------------------------------------------------------------


def build_tape(root: Tensor) -> list[Tensor]:
    """Return the differentiable ancestors of ``root`` in topological order."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen and parent.requires_grad:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(node) into ``.grad`` of every differentiable ancestor.

    Gradients add onto whatever is already stored, so calling this twice
    without zeroing doubles them.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a single-element loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    tape = build_tape(loss)
    adjoints: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape):
        g = adjoints.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in adjoints:
                adjoints[key] = adjoints[key] + pg
            else:
                adjoints[key] = pg


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def _binary_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    if a.shape == b.shape:
        return a.shape
    if b.size == 1:
        return a.shape
    if a.size == 1:
        return b.shape
    raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.full(shape, g.sum())


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape(a, b, "add")
    sa, sb = a.shape, b.shape

    def back(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return Tensor._result(_bcast(a, b, np.add), (a, b), back, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape(a, b, "sub")
    sa, sb = a.shape, b.shape

    def back(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return Tensor._result(_bcast(a, b, np.subtract), (a, b), back, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape(a, b, "mul")
    ad, bd = _flat_if_scalar(a, b), _flat_if_scalar(b, a)

    def back(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return Tensor._result(ad * bd, (a, b), back, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape(a, b, "div")
    ad, bd = _flat_if_scalar(a, b), _flat_if_scalar(b, a)
    out = ad / bd

    def back(g):
        return _unbroadcast(g / bd, a.shape), _unbroadcast(-g * out / bd, b.shape)

    return Tensor._result(out, (a, b), back, "div")


def _flat_if_scalar(x: Tensor, other: Tensor) -> np.ndarray:
    # single-element operands broadcast as plain scalars
    if x.shape != other.shape and x.size == 1:
        return x.data.reshape(())
    return x.data


def _bcast(a: Tensor, b: Tensor, fn) -> np.ndarray:
    return fn(_flat_if_scalar(a, b), _flat_if_scalar(b, a))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(-a.data, (a,), lambda g: (-g,), "neg")


def square(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return Tensor._result(x * x, (a,), lambda g: (2.0 * x * g,), "square")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return Tensor._result(np.log(x), (a,), lambda g: (g / x,), "log")


def _dtanh(y: np.ndarray) -> np.ndarray:
    return 1.0 - y * y


def _dsigmoid(y: np.ndarray) -> np.ndarray:
    return y * (1.0 - y)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return Tensor._result(out, (a,), lambda g: (g * _dtanh(out),), "tanh")


def sigmoid_array(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -x))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = sigmoid_array(a.data)
    return Tensor._result(out, (a,), lambda g: (g * _dsigmoid(out),), "sigmoid")


def relu(a) -> Tensor:
    """max(0, x); the subgradient at 0 is taken as 0."""
    a = as_tensor(a)
    pos = a.data > 0
    return Tensor._result(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,), "relu")


def elementwise(op: str, *args) -> Tensor:
    """Dispatch by name: add, sub, mul, tanh, sigmoid, exp, square."""
    table = {
        "add": add,
        "sub": sub,
        "mul": mul,
        "div": div,
        "tanh": tanh,
        "sigmoid": sigmoid,
        "exp": exp,
        "log": log,
        "square": square,
        "relu": relu,
        "neg": neg,
    }
    try:
        fn = table[op]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# ---------------------------------------------------------------------------
# linear algebra and shape
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product following numpy rules for 1-D, 2-D and equal-batch 3-D operands."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0 or a.ndim > 3 or b.ndim > 3:
        raise DimensionError(f"matmul: unsupported shapes {a.shape} and {b.shape}")
    A = a.data[None, :] if a.ndim == 1 else a.data
    B = b.data[:, None] if b.ndim == 1 else b.data
    if A.shape[-1] != B.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} have mismatched inner dimensions")
    if A.ndim == 3 or B.ndim == 3:
        if A.ndim != B.ndim or A.shape[0] != B.shape[0]:
            raise DimensionError(f"matmul: batch shapes {a.shape} and {b.shape} differ")
    out = A @ B
    out_shape = out.shape
    if a.ndim == 1:
        out_shape = out_shape[:-2] + out_shape[-1:]
    if b.ndim == 1:
        out_shape = out_shape[:-1]
    sa, sb = a.shape, b.shape

    def back(g):
        G = g.reshape(out.shape)
        ga = (G @ np.swapaxes(B, -1, -2)).reshape(sa) if a.requires_grad else None
        gb = (np.swapaxes(A, -1, -2) @ G).reshape(sb) if b.requires_grad else None
        return ga, gb

    return Tensor._result(out.reshape(out_shape), (a, b), back, "matmul")


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.shape}")
    return Tensor._result(a.data.T, (a,), lambda g: (g.T,), "transpose")


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise DimensionError(f"cannot reshape {src} to {tuple(shape)}") from None
    return Tensor._result(out, (a,), lambda g: (g.reshape(src),), "reshape")


def broadcast_to(a, shape: Sequence[int]) -> Tensor:
    """Explicit numpy-style broadcast; the adjoint sums over repeated axes."""
    a = as_tensor(a)
    shape = tuple(shape)
    src = a.shape
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise DimensionError(f"cannot broadcast {src} to {shape}") from None
    lead = len(shape) - len(src)

    def back(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, n in enumerate(src) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g.reshape(src),)

    return Tensor._result(out, (a,), back, "broadcast_to")


def concat(tensors: Iterable, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise ContractError("concat of an empty sequence")
    if len(ts) == 1:
        return ts[0]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {[t.shape for t in ts]}: {exc}") from None
    ax = axis % out.ndim
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=ax))

    return Tensor._result(out, ts, back, "concat")


def stack(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    shapes = {t.shape for t in ts}
    if len(shapes) != 1:
        raise DimensionError(f"stack: shapes differ {sorted(shapes)}")
    out = np.stack([t.data for t in ts], axis=axis)

    def back(g):
        return tuple(np.moveaxis(g, axis, 0))

    return Tensor._result(out, ts, back, "stack")


def take(a, index) -> Tensor:
    """Differentiable ``a[index]`` (basic slicing or integer-array indexing)."""
    a = as_tensor(a)
    out = a.data[index]
    if isinstance(out, np.ndarray) and np.shares_memory(out, a.data):
        out = out.copy()
    src = a.shape
    fancy = _is_fancy(index)

    def back(g):
        full = np.zeros(src)
        if fancy:
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return Tensor._result(np.asarray(out, dtype=DTYPE), (a,), back, "take")


def _is_fancy(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return any(isinstance(p, (list, np.ndarray)) for p in parts)


# ---------------------------------------------------------------------------
# reductions and normalization
# ---------------------------------------------------------------------------


def _check_axis(a: Tensor, axis):
    if axis is None:
        return None
    ax = axis if isinstance(axis, tuple) else (axis,)
    for x in ax:
        if not -a.ndim <= x < a.ndim:
            raise DimensionError(f"axis {x} invalid for shape {a.shape}")
    return tuple(x % a.ndim for x in ax)


def sum_(a, axis=None) -> Tensor:
    a = as_tensor(a)
    axes = _check_axis(a, axis)
    src = a.shape
    out = a.data.sum(axis=axes)

    def back(g):
        if axes is not None:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, src).copy(),)

    return Tensor._result(np.asarray(out, dtype=DTYPE), (a,), back, "sum")


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    axes = _check_axis(a, axis)
    n = a.size if axes is None else int(np.prod([a.shape[i] for i in axes]))
    src = a.shape
    out = a.data.mean(axis=axes)

    def back(g):
        if axes is not None:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, src).copy(),)

    return Tensor._result(np.asarray(out, dtype=DTYPE), (a,), back, "mean")


def max_index(a, axis=None) -> np.ndarray:
    """Index of the maximum along ``axis``. Not differentiable, never taped."""
    a = as_tensor(a)
    if axis is not None:
        _check_axis(a, axis)
    return np.argmax(a.data, axis=axis)


def reduce(op: str, x, axis=None):
    if op == "sum":
        return sum_(x, axis)
    if op == "mean":
        return mean(x, axis)
    if op == "max_index":
        return max_index(x, axis)
    raise ContractError(f"unknown reduction {op!r}")


def _require_finite(x: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericInputError(f"{op}: input contains NaN or Inf")


def softmax_array(x: np.ndarray, axis: int = -1) -> np.ndarray:
    _require_finite(x, "softmax")
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    _check_axis(a, axis)
    out = softmax_array(a.data, axis)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._result(out, (a,), back, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    _check_axis(a, axis)
    x = a.data
    _require_finite(x, "log_softmax")
    shifted = x - x.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    probs = np.exp(out)

    def back(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return Tensor._result(out, (a,), back, "log_softmax")


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape))
