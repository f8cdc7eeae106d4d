"""Minimal reverse-mode autodiff over numpy arrays.

Every operation records its inputs and a backward closure on the output
tensor; `backward()` walks the resulting graph once in reverse topological
order.  Only the operations the segmentation model and its losses need are
provided, and there is no implicit broadcasting: elementwise ops require
identical shapes (scalar Python floats are the one exception).

Training runs in float32; gradient verification runs the same graph in
float64 by constructing the leaf tensors with ``dtype=np.float64``.  Ops
always compute in the dtype of their inputs.
"""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

__all__ = [
    "Tensor",
    "tensor",
    "backward",
    "add",
    "sub",
    "mul",
    "div",
    "relu",
    "sigmoid",
    "log",
    "exp",
    "clamp",
    "tsum",
    "tmean",
    "sum_per_sample",
    "softmax1d",
]

LOG_CLAMP = 1e-12


class Tensor:
    """A numpy array plus an optional gradient and a tape linkage.

    ``_parents`` and ``_backward`` together form the tape: inputs are always
    recorded before their consumers, so the graph is topologically ordered by
    construction, and `backward()` visits every node exactly once.  Dropping
    all references to a loss tensor frees the whole recorded graph.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False,
                 _parents: tuple = ()):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward: Optional[Callable[[], None]] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
        else:
            self.grad += g

    def backward(self) -> None:
        backward(self)

    # Arithmetic sugar.  Tensor/Tensor ops require identical shapes;
    # Python scalars are folded in directly.
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    def __radd__(self, other):
        return add_scalar(self, other)

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __rsub__(self, other):
        return add_scalar(neg(self), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else mul_scalar(self, other)

    def __rmul__(self, other):
        return mul_scalar(self, other)

    def __truediv__(self, other):
        return div(self, other) if isinstance(other, Tensor) else mul_scalar(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={'yes' if self.grad is not None else 'no'})"


def tensor(data, requires_grad: bool = False, dtype=np.float32) -> Tensor:
    """Create a leaf tensor, casting to ``dtype`` (default float32)."""
    arr = np.asarray(data, dtype=dtype)
    return Tensor(arr, requires_grad=requires_grad)


def _needs_grad(*ts: Tensor) -> bool:
    return any(t.requires_grad or t._parents for t in ts)


def _make(data: np.ndarray, parents: tuple, bwd: Optional[Callable[[], None]]) -> Tensor:
    out = Tensor(data, _parents=parents)
    out._backward = bwd
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``.grad``.

    The loss must be scalar (a 0-d or single-element array).  Multiple uses
    of the same tensor accumulate by summation; leaves not reachable from
    the loss keep ``grad is None`` (treated as zero by consumers).
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")

    # Iterative post-order traversal; graphs from unrolled skeleton
    # iterations can exceed the default recursion limit.
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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
            if id(p) not in seen:
                stack.append((p, False))

    loss._accumulate(np.ones_like(loss.data))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward()


# ---------------------------------------------------------------------------
# elementwise ops (identical shapes)


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ValueError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    out = _make(a.data + b.data, (a, b), None)

    def bwd():
        a._accumulate(out.grad)
        b._accumulate(out.grad)

    out._backward = bwd
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    out = _make(a.data - b.data, (a, b), None)

    def bwd():
        a._accumulate(out.grad)
        b._accumulate(-out.grad)

    out._backward = bwd
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    out = _make(a.data * b.data, (a, b), None)

    def bwd():
        a._accumulate(b.data * out.grad)
        b._accumulate(a.data * out.grad)

    out._backward = bwd
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "div")
    out = _make(a.data / b.data, (a, b), None)

    def bwd():
        a._accumulate(out.grad / b.data)
        b._accumulate(-out.grad * a.data / (b.data * b.data))

    out._backward = bwd
    return out


def neg(a: Tensor) -> Tensor:
    out = _make(-a.data, (a,), None)

    def bwd():
        a._accumulate(-out.grad)

    out._backward = bwd
    return out


def add_scalar(a: Tensor, c: float) -> Tensor:
    out = _make(a.data + a.data.dtype.type(c), (a,), None)

    def bwd():
        a._accumulate(out.grad)

    out._backward = bwd
    return out


def mul_scalar(a: Tensor, c: float) -> Tensor:
    out = _make(a.data * a.data.dtype.type(c), (a,), None)

    def bwd():
        a._accumulate(out.grad * a.data.dtype.type(c))

    out._backward = bwd
    return out


def relu(a: Tensor) -> Tensor:
    out = _make(np.maximum(a.data, 0), (a,), None)

    def bwd():
        a._accumulate((a.data > 0).astype(a.data.dtype) * out.grad)

    out._backward = bwd
    return out


def sigmoid(a: Tensor) -> Tensor:
    """Logistic function in the branch form that never exponentiates a
    positive argument, so saturation cannot overflow."""
    x = a.data
    pos = x >= 0
    z = np.empty_like(x)
    z[pos] = np.exp(-x[pos])
    z[~pos] = np.exp(x[~pos])
    s = np.empty_like(x)
    s[pos] = 1.0 / (1.0 + z[pos])
    s[~pos] = z[~pos] / (1.0 + z[~pos])
    out = _make(s, (a,), None)

    def bwd():
        a._accumulate(s * (1.0 - s) * out.grad)

    out._backward = bwd
    return out


def log(a: Tensor) -> Tensor:
    """Natural log with inputs clamped to >= 1e-12.

    The clamp keeps saturated probabilities finite; gradients vanish in the
    clamped region (the true derivative there is zero for the clamped
    function, which is what gets verified numerically).
    """
    clamped = np.maximum(a.data, a.data.dtype.type(LOG_CLAMP))
    out = _make(np.log(clamped), (a,), None)

    def bwd():
        g = out.grad / clamped
        g = np.where(a.data >= LOG_CLAMP, g, 0.0).astype(a.data.dtype, copy=False)
        a._accumulate(g)

    out._backward = bwd
    return out


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    out = _make(e, (a,), None)

    def bwd():
        a._accumulate(e * out.grad)

    out._backward = bwd
    return out


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only where the input is interior."""
    out_data = np.clip(a.data, lo, hi)
    out = _make(out_data, (a,), None)

    def bwd():
        inside = ((a.data >= lo) & (a.data <= hi)).astype(a.data.dtype)
        a._accumulate(inside * out.grad)

    out._backward = bwd
    return out


# ---------------------------------------------------------------------------
# reductions


def tsum(a: Tensor) -> Tensor:
    out = _make(np.asarray(a.data.sum(), dtype=a.data.dtype), (a,), None)

    def bwd():
        a._accumulate(np.full_like(a.data, out.grad))

    out._backward = bwd
    return out


def tmean(a: Tensor) -> Tensor:
    n = a.data.size
    out = _make(np.asarray(a.data.mean(dtype=a.data.dtype), dtype=a.data.dtype), (a,), None)

    def bwd():
        a._accumulate(np.full_like(a.data, out.grad / n))

    out._backward = bwd
    return out


def sum_per_sample(a: Tensor) -> Tensor:
    """Reduce a [N, ...] tensor to per-sample sums [N]."""
    if a.data.ndim < 2:
        raise ValueError("sum_per_sample requires a leading batch axis")
    axes = tuple(range(1, a.data.ndim))
    out = _make(a.data.sum(axis=axes), (a,), None)

    def bwd():
        shape = (a.data.shape[0],) + (1,) * (a.data.ndim - 1)
        a._accumulate(np.broadcast_to(out.grad.reshape(shape), a.data.shape).astype(a.data.dtype, copy=False))

    out._backward = bwd
    return out


def softmax1d(a: Tensor) -> Tensor:
    """Softmax over a 1-D vector (max-shifted for stability)."""
    if a.data.ndim != 1:
        raise ValueError(f"softmax1d expects a 1-D vector, got shape {a.data.shape}")
    shifted = a.data - a.data.max()
    e = np.exp(shifted)
    s = e / e.sum()
    out = _make(s, (a,), None)

    def bwd():
        g = out.grad
        a._accumulate(s * (g - np.dot(g, s)))

    out._backward = bwd
    return out
