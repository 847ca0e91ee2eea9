"""Small reverse-mode autodiff engine over dense float64 numpy arrays.

Every differentiable op records a :class:`Node` on its output when any input
requires a gradient. ``backward`` gathers the nodes reachable from the loss
into a :class:`ComputationTape`, replays them newest-first and then frees them,
so a graph is only ever used once (first-order training only).
"""

from __future__ import annotations

import contextlib
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Node",
    "ComputationTape",
    "ShapeError",
    "DomainError",
    "ContractError",
    "no_grad",
    "backward",
    "grad_check",
    "matmul",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "relu",
    "log",
    "exp",
    "softmax",
    "log_softmax",
    "cross_entropy",
    "sum",
    "mean",
    "rows",
    "transpose",
    "logdet_spd",
]

_EXP_MAX = 709.0
_TINY = np.finfo(np.float64).tiny


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """Input lies outside an op's domain (empty tensor, negative log argument, ...)."""


class ContractError(RuntimeError):
    """A caller broke a documented precondition."""


_seq = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@dataclass(eq=False)
class Node:
    seq: int
    op: str
    inputs: tuple["Tensor", ...]
    # maps upstream grad -> tuple of input grads (None where no grad is needed)
    vjp: Callable[[np.ndarray], tuple] | None


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{rg})"

    def backward(self) -> None:
        backward(self)

    # operator sugar
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return rows(self, idx)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, op: str, inputs: Sequence[Tensor], vjp) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._node = None
    needs = _grad_enabled and any(t.requires_grad for t in inputs)
    out.requires_grad = needs
    if needs:
        out._node = Node(next(_seq), op, tuple(inputs), vjp)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def _nonempty(op: str, a: Tensor) -> None:
    if a.size == 0:
        raise DomainError(f"{op}: empty tensor of shape {a.shape}")


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    A, B = a.data, b.data

    def vjp(g):
        return (g @ B.T if a.requires_grad else None, A.T @ g if b.requires_grad else None)

    return _make(A @ B, "matmul", (a, b), vjp)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape

    def vjp(g):
        return (_unbroadcast(g, sa), _unbroadcast(g, sb))

    return _make(a.data + b.data, "add", (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape

    def vjp(g):
        return (_unbroadcast(g, sa), _unbroadcast(-g, sb))

    return _make(a.data - b.data, "sub", (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("mul", a, b)
    A, B = a.data, b.data

    def vjp(g):
        return (
            _unbroadcast(g * B, A.shape) if a.requires_grad else None,
            _unbroadcast(g * A, B.shape) if b.requires_grad else None,
        )

    return _make(A * B, "mul", (a, b), vjp)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, "neg", (a,), lambda g: (-g,))


def scale(a, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    a = _as_tensor(a)
    c = float(c)
    return _make(a.data * c, "scale", (a,), lambda g: (g * c,))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), "relu", (a,), lambda g: (g * mask,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    _nonempty("log", a)
    if np.any(a.data < 0):
        raise DomainError("log: negative input")
    x = np.maximum(a.data, _TINY)
    return _make(np.log(x), "log", (a,), lambda g: (g / x,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(np.minimum(a.data, _EXP_MAX))
    return _make(out, "exp", (a,), lambda g: (g * out,))


def _softmax_np(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(a) -> Tensor:
    a = _as_tensor(a)
    _nonempty("softmax", a)
    s = _softmax_np(a.data)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _make(s, "softmax", (a,), vjp)


def log_softmax(a) -> Tensor:
    a = _as_tensor(a)
    _nonempty("log_softmax", a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def vjp(g):
        return (g - s * g.sum(axis=-1, keepdims=True),)

    return _make(out, "log_softmax", (a,), vjp)


def cross_entropy(logits, targets) -> Tensor:
    """Mean cross-entropy of ``(B, C)`` logits against integer class targets."""
    logits = _as_tensor(logits)
    _nonempty("cross_entropy", logits)
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be 2-D, got {logits.shape}")
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    n, c = logits.shape
    if t.shape[0] != n:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {t.shape}")
    if t.size and (t.min() < 0 or t.max() >= c):
        raise DomainError(f"cross_entropy: targets outside [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows_ = np.arange(n)
    loss = float(np.mean(lse - z[rows_, t]))

    def vjp(g):
        p = np.exp(z - lse[:, None])
        p[rows_, t] -= 1.0
        return (p * (g / n),)

    return _make(np.asarray(loss), "cross_entropy", (logits,), vjp)


def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001
    a = _as_tensor(a)
    shape = a.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis)), "sum", (a,), vjp)


def mean(a, axis: int | None = None) -> Tensor:
    a = _as_tensor(a)
    _nonempty("mean", a)
    n = a.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis), 1.0 / n)


def rows(a, idx) -> Tensor:
    """Select rows (first-axis entries) by integer index, slice or array."""
    a = _as_tensor(a)
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _make(a.data[idx], "rows", (a,), vjp)


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected 2-D tensor, got {a.shape}")
    return _make(a.data.T.copy(), "transpose", (a,), lambda g: (g.T,))


def logdet_spd(a) -> Tensor:
    """log-determinant of a symmetric positive-definite matrix."""
    a = _as_tensor(a)
    if a.data.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"logdet_spd: expected square matrix, got {a.shape}")
    _nonempty("logdet_spd", a)
    sign, val = np.linalg.slogdet(a.data)
    if sign <= 0:
        raise DomainError("logdet_spd: matrix is not positive definite")
    inv_t = np.linalg.inv(a.data).T
    return _make(np.asarray(val), "logdet_spd", (a,), lambda g: (g * inv_t,))


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


@dataclass
class ComputationTape:
    """Nodes reachable from one loss, in creation (append) order."""

    nodes: list[Node] = field(default_factory=list)

    @classmethod
    def from_loss(cls, loss: Tensor) -> "ComputationTape":
        seen: set[int] = set()
        found: list[tuple[Node, Tensor]] = []
        stack = [loss]
        while stack:
            t = stack.pop()
            node = t._node
            if node is None or id(node) in seen:
                continue
            seen.add(id(node))
            found.append((node, t))
            stack.extend(node.inputs)
        found.sort(key=lambda nt: nt[0].seq)
        tape = cls([n for n, _ in found])
        tape._outputs = [t for _, t in found]
        return tape

    def clear(self) -> None:
        for node in self.nodes:
            node.vjp = None
            node.inputs = ()
        for out in getattr(self, "_outputs", ()):
            out._node = None
        self.nodes = []
        self._outputs = []


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires grad."""
    if loss.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss._node is None:
        raise ContractError("backward: loss has no recorded graph (empty tape)")
    tape = ComputationTape.from_loss(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node, out in zip(reversed(tape.nodes), reversed(tape._outputs)):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        in_grads = node.vjp(g)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            if inp._node is None:
                if inp.grad is None:
                    inp.grad = np.array(ig, dtype=np.float64).reshape(inp.shape)
                else:
                    inp.grad = inp.grad + ig
            else:
                key = id(inp)
                grads[key] = grads[key] + ig if key in grads else ig
    tape.clear()


def grad_check(f: Callable[[Tensor], Tensor], point, h: float = 1e-5) -> float:
    """Max relative error between autodiff and central differences of scalar ``f``.

    Relative error per coordinate is ``|a - d| / (|a| + |d| + 1e-12)``.
    """
    x0 = np.array(point, dtype=np.float64)
    x = Tensor(x0.copy(), requires_grad=True)
    backward(f(x))
    analytic = x.grad if x.grad is not None else np.zeros_like(x0)
    numeric = np.zeros_like(x0)
    flat = numeric.reshape(-1)
    with no_grad():
        for i in range(x0.size):
            xp = x0.copy().reshape(-1)
            xm = x0.copy().reshape(-1)
            xp[i] += h
            xm[i] -= h
            fp = f(Tensor(xp.reshape(x0.shape))).item()
            fm = f(Tensor(xm.reshape(x0.shape))).item()
            flat[i] = (fp - fm) / (2 * h)
    err = np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-12)
    if err.size == 0:
        return 0.0
    return float(np.max(err)) if not np.any(np.isnan(err)) else math.nan
