"""Small reverse-mode automatic differentiation engine over float64 numpy arrays.

Every primitive builds a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to input gradients. :func:`backward` walks
the recorded graph in reverse topological order exactly once.

Shape rules are deliberately strict: binary elementwise ops require equal
shapes, except when one side is a Python number or a 0-d tensor. Row-vector
bias addition is its own op (:func:`add_bias`).

Gradient accumulation policy: leaf gradients accumulate across calls to
:func:`backward` on *different* losses and are only cleared by
:func:`zero_grad` (the optimizer does this). Calling :func:`backward` twice on
the same loss raises :class:`TapeError`.
"""

from __future__ import annotations

import contextlib
import itertools
import json
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64
KL_FLOOR = 1e-8

_grad_enabled = True
_ids = itertools.count()
_kl_floor_hits = 0


class TapeError(RuntimeError):
    """Misuse of the computation tape (non-scalar loss, double backward)."""


class ShapeError(ValueError):
    """Operand shapes do not satisfy an op's contract."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared in tensor data or in a gradient."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def kl_floor_hits() -> int:
    """Number of probability entries clamped by :func:`kl_divergence` so far."""
    return _kl_floor_hits


def reset_kl_floor_hits() -> None:
    global _kl_floor_hits
    _kl_floor_hits = 0


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in {what}")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "id", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=DTYPE)
        _check_finite(arr, "tensor data")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"
        self.id = next(_ids)
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    data = np.asarray(data, dtype=DTYPE)
    _check_finite(data, f"output of {op}")
    out.data = data
    out.grad = None
    out.op = op
    out.id = next(_ids)
    out._consumed = False
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _is_scalar(t: Tensor) -> bool:
    return t.data.ndim == 0


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (no broadcasting)")


def _unbroadcast(g: np.ndarray, target: Tensor) -> np.ndarray:
    if _is_scalar(target) and g.ndim > 0:
        return np.asarray(g.sum())
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a), _unbroadcast(g, b)

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a), _unbroadcast(-g, b)

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a), _unbroadcast(g * a.data, b)

    return _result(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "div")
    if np.any(b.data == 0):
        raise ZeroDivisionError("div: zero in denominator")

    def backward(g):
        return (
            _unbroadcast(g / b.data, a),
            _unbroadcast(-g * a.data / (b.data * b.data), b),
        )

    return _result(a.data / b.data, (a, b), backward, "div")


def square(x: Tensor) -> Tensor:
    return _result(x.data * x.data, (x,), lambda g: (2.0 * x.data * g,), "square")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow is reported by the finite check
        y = np.exp(x.data)
    return _result(y, (x,), lambda g: (g * y,), "exp")


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise NonFiniteError("log of non-positive value")
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(x.data * mask, (x,), lambda g: (g * mask,), "relu")


# ------------------------------------------------------------------ reductions


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    shape = x.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _result(x.data.sum(axis=axis), (x,), backward, "sum")


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    return mul(sum(x, axis), 1.0 / n)


# ------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _result(a.data @ b.data, (a, b), backward, "matmul")


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``(B, n, k) @ (B, k, m) -> (B, n, m)``."""
    a, b = as_tensor(a), as_tensor(b)
    if (
        a.data.ndim != 3
        or b.data.ndim != 3
        or a.shape[0] != b.shape[0]
        or a.shape[2] != b.shape[1]
    ):
        raise ShapeError(f"bmm: incompatible shapes {a.shape} @ {b.shape}")

    def backward(g):
        ga = g @ b.data.transpose(0, 2, 1) if a.requires_grad else None
        gb = a.data.transpose(0, 2, 1) @ g if b.requires_grad else None
        return ga, gb

    return _result(a.data @ b.data, (a, b), backward, "bmm")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a vector of length ``x.shape[-1]`` to every row of ``x``."""
    x, b = as_tensor(x), as_tensor(b)
    if b.data.ndim != 1 or x.data.ndim < 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: bias {b.shape} does not match {x.shape}")

    def backward(g):
        return g, g.reshape(-1, b.shape[0]).sum(axis=0)

    return _result(x.data + b.data, (x, b), backward, "add_bias")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.data.ndim)))
    inv = np.argsort(axes)
    return _result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([x.data for x in xs], axis=axis), xs, backward, "concat")


def take(x: Tensor, idx, axis: int = 0) -> Tensor:
    """Gather entries along ``axis`` (embedding lookup, row selection)."""
    idx = np.asarray(idx, dtype=np.int64)
    shape = x.shape

    def backward(g):
        out = np.zeros(shape, dtype=DTYPE)
        moved = np.moveaxis(out, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (out,)

    return _result(np.take(x.data, idx, axis=axis), (x,), backward, "take")


# ----------------------------------------------------------- probability ops


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] < 1:
        raise ShapeError("softmax over empty axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def backward(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _result(y, (x,), backward, "log_softmax")


def kl_divergence(p: Tensor, q: Tensor) -> Tensor:
    """KL(p || q) along the last axis.

    Both inputs are floored at ``KL_FLOOR`` inside the logarithms and the
    floored ``q`` is renormalised, so the result stays non-negative even when
    ``q`` has zero-mass bins. ``0 * log 0`` contributes nothing.
    """
    global _kl_floor_hits
    p, q = as_tensor(p), as_tensor(q)
    if p.shape != q.shape or p.data.ndim < 1:
        raise ShapeError(f"kl_divergence: shapes {p.shape} and {q.shape}")
    pd, qd = p.data, q.data
    if np.any(pd < 0) or np.any(qd < 0):
        raise ValueError("kl_divergence: negative probability")
    p_hi = pd > KL_FLOOR
    q_hi = qd > KL_FLOOR
    _kl_floor_hits += int(np.count_nonzero(~q_hi & p_hi))
    logp = np.log(np.maximum(pd, KL_FLOOR))
    m = np.maximum(qd, KL_FLOOR)
    log_m = np.log(m)
    s = m.sum(axis=-1, keepdims=True)
    psum = pd.sum(axis=-1, keepdims=True)
    val = (pd * (logp - log_m)).sum(axis=-1) + psum[..., 0] * np.log(s[..., 0])

    def backward(g):
        g = np.expand_dims(g, -1)
        gp = g * (logp + p_hi - log_m + np.log(s))
        gq = g * q_hi * (psum / s - pd / m)
        return gp, gq

    return _result(val, (p, q), backward, "kl_divergence")


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    norm = np.maximum(norm, eps)
    y = x.data / norm

    def backward(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm,)

    return _result(y, (x,), backward, "l2_normalize")


def mse(a: Tensor, b) -> Tensor:
    """Mean of squared differences over all entries."""
    return mean(square(sub(a, b)))


# ------------------------------------------------------------------- backward


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and parent.id not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if loss.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise TapeError("backward already ran on this loss; rebuild the graph")
    if not loss.requires_grad:
        raise TapeError("loss does not depend on any tensor requiring grad")
    loss._consumed = True
    grads: dict[int, np.ndarray] = {loss.id: np.ones(loss.shape, dtype=DTYPE)}
    for node in reversed(_topological(loss)):
        g = grads.pop(node.id, None)
        if g is None:
            continue
        if node.is_leaf:
            _check_finite(g, f"gradient of leaf {node.id}")
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.id in grads:
                grads[parent.id] = grads[parent.id] + pg
            else:
                grads[parent.id] = pg


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


def tape(loss: Tensor) -> list[dict]:
    """Recorded operations reachable from ``loss``, inputs before outputs."""
    records = []
    for node in _topological(loss):
        if node.is_leaf:
            continue
        records.append(
            {
                "op": node.op,
                "input_ids": [p.id for p in node._parents],
                "output_id": node.id,
                "shapes": [list(p.shape) for p in node._parents] + [list(node.shape)],
            }
        )
    return records


def dump_tape(loss: Tensor) -> str:
    return json.dumps(tape(loss))
