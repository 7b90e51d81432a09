"""Reverse-mode autodiff over float64 numpy arrays.

Dynamic per-example graphs: every op that touches a grad-requiring tensor
records a backward closure; ``backward()`` on a scalar loss walks the graph
in reverse topological order and accumulates into ``.grad``. No fusion, no
views escaping into the tape - correctness over speed, with the row-wise
normalization/softmax kernels dispatched through ``scenewalk.kernels``.
"""

from __future__ import annotations

import os

import numpy as np

from ..errors import ContractError, DimensionError, VocabularyError
from ..kernels import ops as K

_grad_enabled = True
_check_finite = os.environ.get("SCENEWALK_CHECK_FINITE", "") == "1"


def set_finite_checks(enabled: bool) -> None:
    global _check_finite
    _check_finite = enabled


class no_grad:
    """Context manager: ops inside build no graph (evaluation mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, np.ndarray) and data.dtype == np.float64:
            self.data = data
        else:
            self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; the real work happens in the module-level ops
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """Trainable tensor: named, grad pre-allocated and persistent."""

    __slots__ = ("name",)

    def __init__(self, data, name: str):
        super().__init__(np.array(data, dtype=np.float64))
        self.requires_grad = True
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def _promote(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


def _finish(out: Tensor, parents: tuple[Tensor, ...], bw) -> Tensor:
    if _check_finite and not np.all(np.isfinite(out.data)):
        raise ContractError("non-finite values produced in forward pass")
    if _grad_enabled:
        tracked = tuple(p for p in parents if p.requires_grad)
        if tracked:
            out.requires_grad = True
            out._parents = tracked
            out._backward = bw
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every reachable tensor with d(loss)/d(tensor)."""
    if loss.data.size != 1:
        raise ContractError(
            f"backward() requires a scalar loss, got shape {loss.shape}"
        )
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    _accum(loss, np.ones_like(loss.data))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    if _check_finite:
        for node in order:
            if node.grad is not None and not np.all(np.isfinite(node.grad)):
                raise ContractError("non-finite gradient produced in backward pass")


# ---------------------------------------------------------------- basic ops


def add(a, b) -> Tensor:
    a, b = _promote(a), _promote(b)
    out = Tensor(a.data + b.data)

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.data.shape))

    return _finish(out, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _promote(a), _promote(b)
    out = Tensor(a.data * b.data)

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _finish(out, (a, b), bw)


def matmul(a, b) -> Tensor:
    a, b = _promote(a), _promote(b)
    if a.ndim != 2 or b.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul shapes incompatible: {a.data.shape} @ {b.data.shape}"
        )
    out = Tensor(a.data @ b.data)

    def bw(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    return _finish(out, (a, b), bw)


def matmul_t(a, b) -> Tensor:
    """a @ b.T without materializing the transpose (linear-layer hot path)."""
    a, b = _promote(a), _promote(b)
    if a.ndim != 2 or b.ndim != 2 or a.data.shape[1] != b.data.shape[1]:
        raise DimensionError(
            f"matmul_t shapes incompatible: {a.data.shape} @ {b.data.shape}.T"
        )
    out = Tensor(a.data @ b.data.T)

    def bw(g):
        if a.requires_grad:
            _accum(a, g @ b.data)
        if b.requires_grad:
            _accum(b, g.T @ a.data)

    return _finish(out, (a, b), bw)


def relu(x: Tensor) -> Tensor:
    x = _promote(x)
    data2d = x.data.reshape(1, -1) if x.ndim == 1 else x.data
    out = Tensor(K.relu_fwd(data2d).reshape(x.data.shape))

    def bw(g):
        g2d = g.reshape(data2d.shape)
        _accum(x, K.relu_bwd(data2d, g2d).reshape(x.data.shape))

    return _finish(out, (x,), bw)


def abs_(x: Tensor) -> Tensor:
    x = _promote(x)
    out = Tensor(np.abs(x.data))

    def bw(g):
        _accum(x, g * np.sign(x.data))

    return _finish(out, (x,), bw)


def reshape(x: Tensor, shape) -> Tensor:
    x = _promote(x)
    out = Tensor(x.data.reshape(shape))

    def bw(g):
        _accum(x, g.reshape(x.data.shape))

    return _finish(out, (x,), bw)


def transpose(x: Tensor) -> Tensor:
    x = _promote(x)
    if x.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {x.data.shape}")
    out = Tensor(np.ascontiguousarray(x.data.T))

    def bw(g):
        _accum(x, np.ascontiguousarray(g.T))

    return _finish(out, (x,), bw)


def concat(parts: list[Tensor], axis: int) -> Tensor:
    parts = [_promote(p) for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.data.shape[axis] for p in parts]

    def bw(g):
        offset = 0
        for p, size in zip(parts, sizes):
            if p.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(offset, offset + size)
                _accum(p, np.ascontiguousarray(g[tuple(sl)]))
            offset += size

    return _finish(out, tuple(parts), bw)


def narrow(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    x = _promote(x)
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)
    out = Tensor(np.ascontiguousarray(x.data[sl]))

    def bw(g):
        full = np.zeros_like(x.data)
        full[sl] = g
        _accum(x, full)

    return _finish(out, (x,), bw)


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    x = _promote(x)
    idx = np.asarray(idx, dtype=np.int64)
    if x.ndim != 2:
        raise DimensionError(f"gather_rows expects a matrix, got shape {x.data.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.data.shape[0]):
        raise VocabularyError(
            f"row index out of range [0, {x.data.shape[0]}): {idx.tolist()}"
        )
    out = Tensor(K.gather_rows(x.data, idx))

    def bw(g):
        full = np.zeros_like(x.data)
        K.scatter_add_rows(full, idx, np.ascontiguousarray(g))
        _accum(x, full)

    return _finish(out, (x,), bw)


def take_per_row(x: Tensor, idx: np.ndarray) -> Tensor:
    """out[i] = x[i, idx[i]]; used for per-row target log-probs."""
    x = _promote(x)
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(x.data.shape[0])
    out = Tensor(x.data[rows, idx])

    def bw(g):
        full = np.zeros_like(x.data)
        full[rows, idx] = g
        _accum(x, full)

    return _finish(out, (x,), bw)


def sum_all(x: Tensor) -> Tensor:
    x = _promote(x)
    out = Tensor(np.asarray(x.data.sum()))

    def bw(g):
        _accum(x, np.broadcast_to(g, x.data.shape))

    return _finish(out, (x,), bw)


def mean_all(x: Tensor) -> Tensor:
    n = float(x.data.size)
    return mul(sum_all(x), 1.0 / n)


# ----------------------------------------------------- row-wise kernel ops


def layer_norm_rows(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize each row to mean 0 / unit variance (gain/shift separate)."""
    x = _promote(x)
    if x.ndim != 2:
        raise DimensionError(f"layer_norm expects a matrix, got shape {x.data.shape}")
    if x.data.shape[1] < 2:
        raise DimensionError(
            f"layer_norm needs vectors of length >= 2, got {x.data.shape[1]}"
        )
    y, inv_std = K.layer_norm_fwd(x.data, eps)
    out = Tensor(y)

    def bw(g):
        _accum(x, K.layer_norm_bwd(y, inv_std, np.ascontiguousarray(g)))

    return _finish(out, (x,), bw)


def softmax_rows(x: Tensor) -> Tensor:
    x = _promote(x)
    if x.ndim != 2:
        raise DimensionError(f"softmax expects a matrix, got shape {x.data.shape}")
    y = K.softmax_fwd(x.data)
    out = Tensor(y)

    def bw(g):
        _accum(x, K.softmax_bwd(y, np.ascontiguousarray(g)))

    return _finish(out, (x,), bw)


def log_softmax_rows(x: Tensor) -> Tensor:
    x = _promote(x)
    if x.ndim != 2:
        raise DimensionError(f"log_softmax expects a matrix, got shape {x.data.shape}")
    y = K.log_softmax_fwd(x.data)
    out = Tensor(y)

    def bw(g):
        _accum(x, K.log_softmax_bwd(y, np.ascontiguousarray(g)))

    return _finish(out, (x,), bw)


def softmax(logits: Tensor) -> Tensor:
    """Vector softmax: stable via max subtraction, sums to 1."""
    logits = _promote(logits)
    if logits.ndim == 1:
        return reshape(softmax_rows(reshape(logits, (1, -1))), (-1,))
    return softmax_rows(logits)


def cross_entropy_rows(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Sum over rows of -log softmax(logits)[row, target[row]]."""
    logp = log_softmax_rows(logits)
    picked = take_per_row(logp, targets)
    return mul(sum_all(picked), -1.0)


def stack_rows(vectors: list[Tensor]) -> Tensor:
    return concat([reshape(v, (1, -1)) for v in vectors], axis=0)
