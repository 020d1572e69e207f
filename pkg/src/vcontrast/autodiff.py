"""Small reverse-mode automatic differentiation engine over float64 numpy arrays.

Operations on :class:`Tensor` values are recorded on the innermost active
:class:`Tape` whenever at least one input requires a gradient::

    x = Tensor(3.0, requires_grad=True)
    with Tape() as tape:
        y = x * x
    grads = backward(tape, y)
    grads[x]  # -> array(6.)

Tensors are immutable; the engine never writes into an array it did not
create.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ContractError",
    "DimensionError",
    "Tape",
    "Tensor",
    "add",
    "backward",
    "concat",
    "exp",
    "log_sigmoid",
    "log_softmax",
    "matmul",
    "mean",
    "mul",
    "neg",
    "pick",
    "reshape",
    "softplus",
    "stack",
    "sub",
    "sum",
    "take",
    "tanh",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """An engine precondition was violated (e.g. non-scalar loss)."""


_TAPES: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "requires_grad", "_from_op")

    __array_priority__ = 100  # make ndarray <op> Tensor dispatch to Tensor

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = requires_grad
        self._from_op = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.item())

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=6)}{flag})"

    def __len__(self) -> int:
        return len(self.data)

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
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _index(self, index)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of primitive ops; execution order is topological order."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPES.pop()
        assert popped is self, "tapes must be closed in LIFO order"

    def __len__(self) -> int:
        return len(self.nodes)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    out = Tensor(data)
    if _TAPES and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._from_op = True
        _TAPES[-1].nodes.append(_Node(out, inputs, vjp))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape:
        return
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from exc


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    y = np.tanh(a.data)
    return _result(y, (a,), lambda g: (g * (1.0 - y * y),))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    y = np.exp(a.data)
    return _result(y, (a,), lambda g: (g * y,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # both branches are overflow-free
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def softplus(a) -> Tensor:
    """log(1 + e^x), evaluated without overflow."""
    a = _as_tensor(a)
    return _result(_softplus(a.data), (a,), lambda g: (g * _sigmoid(a.data),))


def log_sigmoid(a) -> Tensor:
    """log σ(x) computed as -softplus(-x); finite for every finite input."""
    a = _as_tensor(a)
    return _result(-_softplus(-a.data), (a,), lambda g: (g * _sigmoid(-a.data),))


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    probs = np.exp(y)

    def vjp(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _result(y, (a,), vjp)


# -- linear algebra and reductions -------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    return _result(
        a.data @ b.data,
        (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    a = _as_tensor(a)
    y = a.data.sum(axis=axis)

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(y, (a,), vjp)


def mean(a, axis: int | None = None) -> Tensor:
    a = _as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return sum(a, axis) / n


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = _as_tensor(a)
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def _index(a: Tensor, index) -> Tensor:
    def vjp(g):
        out = np.zeros(a.shape)
        np.add.at(out, index, g)
        return (out,)

    return _result(a.data[index], (a,), vjp)


def take(table, indices) -> Tensor:
    """Gather rows ``table[indices]`` (embedding lookup)."""
    table = _as_tensor(table)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"row index out of range for table with {table.shape[0]} rows")

    def vjp(g):
        out = np.zeros(table.shape)
        np.add.at(out, idx, g)  # sequential, hence deterministic
        return (out,)

    return _result(table.data[idx], (table,), vjp)


def pick(a, indices) -> Tensor:
    """Select ``a[r, indices[r]]`` for each row r of a 2-D tensor."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    if a.data.ndim != 2 or idx.shape != (a.shape[0],):
        raise DimensionError(f"pick expects (N, K) data and N indices, got {a.shape}, {idx.shape}")
    rows = np.arange(a.shape[0])

    def vjp(g):
        out = np.zeros(a.shape)
        out[rows, idx] = g
        return (out,)

    return _result(a.data[rows, idx], (a,), vjp)


def stack(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = tuple(_as_tensor(t) for t in tensors)
    y = np.stack([t.data for t in ts], axis=axis)

    def vjp(g):
        return tuple(np.take(g, k, axis=axis) for k in range(len(ts)))

    return _result(y, ts, vjp)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = tuple(_as_tensor(t) for t in tensors)
    y = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(y, ts, vjp)


# -- reverse pass ------------------------------------------------------------

def backward(tape: Tape, loss: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Reverse-mode gradients of a scalar ``loss`` recorded on ``tape``.

    Returns a mapping from every leaf tensor that requires a gradient (or the
    tensors in ``wrt``) to its gradient array. Leaves the loss does not
    depend on get an all-zero gradient.
    """
    if loss.size != 1:
        raise ContractError(f"loss must be a scalar, got shape {loss.shape}")
    produced = {id(n.out) for n in tape.nodes}
    if loss._from_op and id(loss) not in produced:
        raise ContractError("loss was not produced on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    leaves: dict[int, Tensor] = {}
    if loss.requires_grad and not loss._from_op:
        leaves[id(loss)] = loss
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        for t in node.inputs:
            if t.requires_grad and id(t) not in produced:
                leaves[id(t)] = t
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not t.requires_grad:
                continue
            prev = grads.get(id(t))
            grads[id(t)] = gi if prev is None else prev + gi
    return _collect(grads, leaves, wrt)


def _collect(grads, leaves, wrt) -> dict[Tensor, np.ndarray]:
    targets = list(leaves.values()) if wrt is None else list(wrt)
    return {t: grads.get(id(t), np.zeros(t.shape)) for t in targets}
