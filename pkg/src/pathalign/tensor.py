"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation records its parents and a backward closure on the output
tensor; the implicit DAG of these links is the computation graph.
`Tensor.backward()` topologically sorts the graph, visits each node once,
and accumulates gradients additively, so a tensor feeding several
consumers receives the sum of the branch gradients.  Gradients persist on
`requires_grad` leaves until explicitly zeroed, which lets several losses
share an encoder between backward calls.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, DomainError

_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables graph recording (evaluation mode)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    """A float64 n-d array plus an optional gradient of the same shape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Populate .grad on every reachable requires_grad tensor.

        Repeated calls without zeroing accumulate into existing grads.
        """
        if self.data.shape != ():
            raise ContractError(f"backward() needs a scalar loss, got shape {self.data.shape}")
        order = _toposort(self)
        self.grad = _accum(self.grad, np.ones((), dtype=np.float64))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar; scalars are promoted to constant tensors
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __pow__(self, p):
        return powc(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _toposort(root: Tensor) -> list[Tensor]:
    """Post-order of the graph below root; iterative to survive deep graphs."""
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _accum(current: np.ndarray | None, update: np.ndarray) -> np.ndarray:
    if current is None:
        return update.copy() if isinstance(update, np.ndarray) else np.asarray(update)
    current += update
    return current


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g down to `shape`, undoing numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


# ---------------------------------------------------------------------------
# elementwise arithmetic (numpy broadcasting, gradients unbroadcast)

def add(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        a.grad = _accum(a.grad, _unbroadcast(g, a.data.shape)) if a.requires_grad else a.grad
        b.grad = _accum(b.grad, _unbroadcast(g, b.data.shape)) if b.requires_grad else b.grad

    return _node(a.data + b.data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        if a.requires_grad:
            a.grad = _accum(a.grad, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.grad = _accum(b.grad, _unbroadcast(-g, b.data.shape))

    return _node(a.data - b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        if a.requires_grad:
            a.grad = _accum(a.grad, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b.grad = _accum(b.grad, _unbroadcast(g * a.data, b.data.shape))

    return _node(a.data * b.data, (a, b), bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        if a.requires_grad:
            a.grad = _accum(a.grad, _unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b.grad = _accum(b.grad, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _node(a.data / b.data, (a, b), bwd)


def powc(a: Tensor, p: float) -> Tensor:
    """Elementwise power with a constant exponent."""
    def bwd(g):
        if a.requires_grad:
            a.grad = _accum(a.grad, g * p * a.data ** (p - 1.0))

    return _node(a.data ** p, (a,), bwd)


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)

    def bwd(g):
        if a.requires_grad:
            a.grad = _accum(a.grad, g * y)

    return _node(y, (a,), bwd)


def log(a: Tensor) -> Tensor:
    def bwd(g):
        if a.requires_grad:
            a.grad = _accum(a.grad, g / a.data)

    return _node(np.log(a.data), (a,), bwd)


def clamp_min(a: Tensor, floor: float) -> Tensor:
    y = np.maximum(a.data, floor)

    def bwd(g):
        if a.requires_grad:
            a.grad = _accum(a.grad, g * (a.data > floor))

    return _node(y, (a,), bwd)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)

    def bwd(g):
        if a.requires_grad:
            a.grad = _accum(a.grad, g * (1.0 - y * y))

    return _node(y, (a,), bwd)


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), computed overflow-free; derivative is sigmoid."""
    x = a.data
    y = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def bwd(g):
        if a.requires_grad:
            a.grad = _accum(a.grad, g / (1.0 + np.exp(-x)))

    return _node(y, (a,), bwd)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Smooth GELU (tanh form); preferred over ReLU so finite differences
    are reliable everywhere."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    y = 0.5 * x * (1.0 + t)

    def bwd(g):
        if a.requires_grad:
            d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
            da = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
            a.grad = _accum(a.grad, g * da)

    return _node(y, (a,), bwd)


# ---------------------------------------------------------------------------
# matrix products and structural ops

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy's stacked-matmul semantics.

    Both operands must have ndim >= 2; leading batch axes broadcast, and the
    backward pass sums gradients over broadcast axes.
    """
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError(f"matmul needs matrices, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}")

    def bwd(g):
        if a.requires_grad:
            ga = g @ b.data.swapaxes(-1, -2)
            a.grad = _accum(a.grad, _unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = a.data.swapaxes(-1, -2) @ g
            b.grad = _accum(b.grad, _unbroadcast(gb, b.data.shape))

    return _node(a.data @ b.data, (a, b), bwd)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    def bwd(g):
        if a.requires_grad:
            a.grad = _accum(a.grad, g.reshape(a.data.shape))

    return _node(a.data.reshape(shape), (a,), bwd)


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    def bwd(g):
        if a.requires_grad:
            a.grad = _accum(a.grad, g.swapaxes(ax1, ax2))

    return _node(a.data.swapaxes(ax1, ax2).copy(), (a,), bwd)


def broadcast_to(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    def bwd(g):
        if a.requires_grad:
            a.grad = _accum(a.grad, _unbroadcast(g, a.data.shape))

    return _node(np.broadcast_to(a.data, shape).copy(), (a,), bwd)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                p.grad = _accum(p.grad, g[tuple(sl)])

    return _node(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), bwd)


def gather_rows(a: Tensor, idx) -> Tensor:
    """Select rows along axis 0 (embedding lookup / span slicing).

    Backward scatter-adds, so repeated indices accumulate.
    """
    idx = np.asarray(idx, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[0]):
        raise ContractError(f"row index out of range for shape {a.data.shape}")

    def bwd(g):
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            np.add.at(ga, idx, g)
            a.grad = _accum(a.grad, ga)

    return _node(a.data[idx], (a,), bwd)


# ---------------------------------------------------------------------------
# reductions

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def bwd(g):
        if not a.requires_grad:
            return
        if axis is None:
            a.grad = _accum(a.grad, np.broadcast_to(g, a.data.shape).copy())
        else:
            ge = g if keepdims else np.expand_dims(g, axis)
            a.grad = _accum(a.grad, np.broadcast_to(ge, a.data.shape).copy())

    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), bwd)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), Tensor(1.0 / n))


def mean_pool(x: Tensor, rows=None) -> Tensor:
    """Arithmetic mean over (optionally selected) rows of a 2-d tensor."""
    if x.data.ndim != 2:
        raise DimensionError(f"mean_pool expects a 2-d tensor, got shape {x.data.shape}")
    if rows is not None:
        rows = list(rows)
        if not rows:
            raise DomainError("mean_pool: empty row selection")
        x = gather_rows(x, rows)
    if x.data.shape[0] == 0:
        raise DomainError("mean_pool: no rows to pool")
    return tmean(x, axis=0)


# ---------------------------------------------------------------------------
# normalizations

def softmax(a: Tensor, axis: int) -> Tensor:
    """Stable softmax along `axis` (max-subtracted before exponentiation)."""
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        if a.requires_grad:
            gy = g * y
            a.grad = _accum(a.grad, gy - y * gy.sum(axis=axis, keepdims=True))

    return _node(y, (a,), bwd)


def log_softmax(a: Tensor, axis: int) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def bwd(g):
        if a.requires_grad:
            a.grad = _accum(a.grad, g - np.exp(y) * g.sum(axis=axis, keepdims=True))

    return _node(y, (a,), bwd)


def standardize(a: Tensor, eps: float = 1e-5) -> Tensor:
    """(x - mean) / sqrt(var + eps) along the last axis (layer-norm core)."""
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def bwd(g):
        if a.requires_grad:
            gm = g.mean(axis=-1, keepdims=True)
            gym = (g * y).mean(axis=-1, keepdims=True)
            a.grad = _accum(a.grad, inv * (g - gm - y * gym))

    return _node(y, (a,), bwd)


def l2_normalize(x: Tensor, axis: int = -1, floor: float = 1e-12) -> Tensor:
    """Rows scaled to unit length; the norm is floored at `floor` so the
    zero vector maps to itself instead of NaN."""
    sq = tsum(mul(x, x), axis=axis, keepdims=True)
    norm = clamp_min(powc(sq, 0.5), floor)
    return div(x, norm)


# ---------------------------------------------------------------------------
# verification harness

def zero_grads(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between backward() and central differences.

    `f` must rebuild its graph from the live param tensors on every call;
    parameters are perturbed in place one entry at a time.
    """
    if eps <= 0:
        raise ContractError("grad_check: eps must be positive")
    zero_grads(params)
    loss = f()
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, ana in zip(params, analytic):
        flat = p.data.reshape(-1)
        aflat = ana.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            with no_grad():
                fp = float(f().data)
            flat[i] = orig - eps
            with no_grad():
                fm = float(f().data)
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * eps)
            rel = abs(aflat[i] - numeric) / max(1.0, abs(aflat[i]), abs(numeric))
            if rel > worst:
                worst = rel
    zero_grads(params)
    return worst
