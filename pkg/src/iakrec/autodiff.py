"""Minimal dense-tensor reverse-mode autodiff engine.

Define-by-run: every op computes its value eagerly and links the output to
its inputs, so a single reverse sweep over the recorded graph yields exact
gradients. float64 throughout; any NaN/Inf produced by an op is an error.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operands do not conform for the requested primitive."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf, or was fed a non-finite gradient."""


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("tensor data contains NaN or Inf")
    return arr


class Tensor:
    """Dense float64 array plus the bookkeeping needed for backward."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def detach(self) -> "Tensor":
        """Same values, cut off from the recorded graph."""
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; all dispatch to the module-level primitives
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """Named trainable tensor. Frozen parameters keep an all-zero gradient."""

    __slots__ = ("name", "trainable")

    def __init__(self, data, name: str, trainable: bool = True):
        super().__init__(data, requires_grad=trainable)
        self.name = name
        self.trainable = trainable
        self.grad = np.zeros_like(self.data)

    def set_trainable(self, trainable: bool) -> None:
        self.trainable = trainable
        self.requires_grad = trainable
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable[[Tensor], None], op: str) -> Tensor:
    """Build an op output node; prunes the graph when no parent needs grad."""
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values in output of {op}")
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = lambda: backward(out)
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting introduced."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)

    def backward(out: Tensor) -> None:
        _accum(a, _unbroadcast(out.grad, a.shape))
        _accum(b, _unbroadcast(out.grad, b.shape))

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)

    def backward(out: Tensor) -> None:
        _accum(a, _unbroadcast(out.grad, a.shape))
        _accum(b, _unbroadcast(-out.grad, b.shape))

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)

    def backward(out: Tensor) -> None:
        _accum(a, _unbroadcast(out.grad * b.data, a.shape))
        _accum(b, _unbroadcast(out.grad * a.data, b.shape))

    return _make(a.data * b.data, (a, b), backward, "mul")


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul needs (m,k)@(k,n), got {a.shape} @ {b.shape}")

    def backward(out: Tensor) -> None:
        _accum(a, out.grad @ b.data.T)
        _accum(b, a.data.T @ out.grad)

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    # tanh form is overflow-free and exactly the logistic function
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))

    def backward(out: Tensor) -> None:
        _accum(a, out.grad * out.data * (1.0 - out.data))

    return _make(y, (a,), backward, "sigmoid")


def leaky_relu(a, slope: float = 0.01) -> Tensor:
    a = _wrap(a)

    def backward(out: Tensor) -> None:
        _accum(a, out.grad * np.where(a.data >= 0.0, 1.0, slope))

    return _make(np.where(a.data >= 0.0, a.data, slope * a.data), (a,), backward, "leaky_relu")


def softmax(a, axis: int = -1) -> Tensor:
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(out: Tensor) -> None:
        dot = (out.grad * out.data).sum(axis=axis, keepdims=True)
        _accum(a, out.data * (out.grad - dot))

    return _make(y, (a,), backward, "softmax")


def log(a) -> Tensor:
    a = _wrap(a)
    if np.any(a.data <= 0.0):
        raise NonFiniteError("log of non-positive value")

    def backward(out: Tensor) -> None:
        _accum(a, out.grad / a.data)

    return _make(np.log(a.data), (a,), backward, "log")


def exp(a) -> Tensor:
    a = _wrap(a)

    def backward(out: Tensor) -> None:
        _accum(a, out.grad * out.data)

    return _make(np.exp(a.data), (a,), backward, "exp")


def softplus(a) -> Tensor:
    """log(1 + e^x), computed without overflow; derivative is sigmoid(x)."""
    a = _wrap(a)

    def backward(out: Tensor) -> None:
        _accum(a, out.grad * 0.5 * (1.0 + np.tanh(0.5 * a.data)))

    return _make(np.logaddexp(0.0, a.data), (a,), backward, "softplus")


def square(a) -> Tensor:
    a = _wrap(a)

    def backward(out: Tensor) -> None:
        _accum(a, out.grad * 2.0 * a.data)

    return _make(a.data * a.data, (a,), backward, "square")


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient passes only inside the interval."""
    a = _wrap(a)

    def backward(out: Tensor) -> None:
        mask = (a.data >= lo) & (a.data <= hi)
        _accum(a, out.grad * mask)

    return _make(np.clip(a.data, lo, hi), (a,), backward, "clip")


def concat(tensors: Sequence, axis: int = 1) -> Tensor:
    parts = [_wrap(t) for t in tensors]
    if not parts:
        raise ShapeError("concat of zero tensors")
    widths = [p.shape[axis] for p in parts]

    def backward(out: Tensor) -> None:
        offset = 0
        for p, w in zip(parts, widths):
            sl = [slice(None)] * out.grad.ndim
            sl[axis] = slice(offset, offset + w)
            _accum(p, out.grad[tuple(sl)])
            offset += w

    return _make(np.concatenate([p.data for p in parts], axis=axis), parts, backward, "concat")


def slice_cols(a, start: int, stop: int) -> Tensor:
    a = _wrap(a)
    if a.data.ndim != 2:
        raise ShapeError(f"slice_cols needs a 2-d tensor, got shape {a.shape}")

    def backward(out: Tensor) -> None:
        if a.requires_grad:
            g = np.zeros_like(a.data)
            g[:, start:stop] = out.grad
            _accum(a, g)

    return _make(a.data[:, start:stop].copy(), (a,), backward, "slice_cols")


def reduce_sum(a) -> Tensor:
    a = _wrap(a)

    def backward(out: Tensor) -> None:
        _accum(a, np.full_like(a.data, out.grad))

    return _make(np.asarray(a.data.sum()), (a,), backward, "sum")


def reduce_mean(a) -> Tensor:
    a = _wrap(a)
    n = a.data.size

    def backward(out: Tensor) -> None:
        _accum(a, np.full_like(a.data, out.grad / n))

    return _make(np.asarray(a.data.mean()), (a,), backward, "mean")


def gather_rows(table, indices) -> Tensor:
    """Row lookup table[idx]; gradient scatter-adds into the selected rows."""
    table = _wrap(table)
    idx = np.asarray(indices, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeError("gather_rows table must be 2-d")
    if idx.ndim != 1:
        raise ShapeError("gather_rows indices must be 1-d")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError("gather_rows index out of range")

    def backward(out: Tensor) -> None:
        if table.requires_grad:
            g = np.zeros_like(table.data)
            np.add.at(g, idx, out.grad)
            _accum(table, g)

    return _make(table.data[idx], (table,), backward, "gather_rows")


# ---------------------------------------------------------------------------
# reverse sweep
# ---------------------------------------------------------------------------


@dataclass
class ComputationRecord:
    """Topologically ordered op outputs reachable from a root (inputs first)."""

    nodes: list[Tensor] = field(default_factory=list)


def computation_record(root: Tensor) -> ComputationRecord:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return ComputationRecord(order)


def backward(loss: Tensor) -> ComputationRecord:
    """Reverse sweep from a scalar loss; accumulates into .grad of all
    reachable tensors that require grad. Returns the record that was swept."""
    if loss.data.size != 1:
        raise ShapeError(f"backward root must be scalar, got shape {loss.shape}")
    record = computation_record(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(record.nodes):
        if node._backward is not None:
            node._backward()
    return record


def zero_grads(params: Iterable[Parameter]) -> None:
    for p in params:
        p.grad = np.zeros_like(p.data)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdagradDecayState:
    """Per-parameter squared-gradient accumulators with exponential decay."""

    decay: float = 0.9999
    epsilon: float = 1e-8
    accumulators: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 < self.decay <= 1.0:
            raise ValueError(f"decay must be in (0, 1], got {self.decay}")
        if self.epsilon <= 0.0:
            raise ValueError("epsilon must be positive")


def adagrad_decay_step(params: Iterable[Parameter], state: AdagradDecayState, lr: float) -> None:
    """acc <- decay*acc + g^2;  p <- p - lr*g/(sqrt(acc)+eps). Frozen
    parameters are left untouched."""
    if lr <= 0.0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    for p in params:
        if not p.trainable:
            continue
        g = p.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {p.name}")
        acc = state.accumulators.get(p.name)
        if acc is None:
            acc = np.zeros_like(p.data)
        acc = state.decay * acc + g * g
        state.accumulators[p.name] = acc
        p.data = p.data - lr * g / (np.sqrt(acc) + state.epsilon)


def grad_l2_norm(params: Iterable[Parameter]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return float(np.sqrt(total))
