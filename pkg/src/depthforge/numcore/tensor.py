"""Dense float64 tensors with a recorded reverse-mode tape.

Every operation that touches a tensor with ``requires_grad`` records a node
holding its parents and a closure that maps the output gradient to parent
gradients. ``Tensor.backward`` walks the tape in reverse topological order,
accumulating into ``.grad`` of every leaf that tracks gradients.
"""

from __future__ import annotations

import os
from typing import Callable, Iterable, Sequence

import numpy as np

DEBUG = os.environ.get("DEPTHFORGE_DEBUG", "") not in ("", "0")


class ShapeError(ValueError):
    """Operands have shapes the operation cannot combine."""


class NonFiniteError(FloatingPointError):
    """A tensor was created with (or an op produced) NaN or Inf."""


def _check_finite(data: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values in {what}")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, name or "tensor")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @classmethod
    def _result(cls, data: np.ndarray, parents: Iterable["Tensor"], backward, what: str) -> "Tensor":
        # internal constructor: skips the copy and the finiteness check outside debug mode
        if DEBUG:
            _check_finite(data, what)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        parents = tuple(parents)
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

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
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._result(self.data, (), None, "detach")

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without grad needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg
        # tape is freed with the intermediate nodes once the caller drops the loss

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(as_tensor(other), scale(self, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot combine shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return Tensor._result(
        a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add"
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def back(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return Tensor._result(ad * bd, (a, b), back, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return Tensor._result(a.data * c, (a,), lambda g: (g * c,), "scale")


def matmul(a, b) -> Tensor:
    """Matrix product; supports (…, n, k) @ (k, m) and (…, n, k) @ (…, k, m)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[0 if b.ndim == 1 else -2]:
        raise ShapeError(f"matmul: inner dimensions differ for {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    vec = b.ndim == 1
    b2 = bd[:, None] if vec else bd

    def back(g):
        g2 = g[..., None] if vec else g
        ga = gb = None
        if a.requires_grad:
            ga = g2 @ np.swapaxes(b2, -1, -2)
            ga = _unbroadcast(ga, ad.shape) if ad.ndim > 1 else ga.reshape(ad.shape)
        if b.requires_grad:
            a2 = ad if ad.ndim > 1 else ad[None, :]
            gb = np.swapaxes(a2, -1, -2) @ (g2 if ad.ndim > 1 else g2.reshape(1, -1))
            gb = _unbroadcast(gb, b2.shape)
            if vec:
                gb = gb[:, 0]
        return ga, gb

    out = ad @ b2
    if vec:
        out = out[..., 0]
    return Tensor._result(out, (a, b), back, "matmul")


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._result(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), back, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            t.shape[i] != ref[i] for i in range(len(ref)) if i != ax
        ):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape} along axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=ax))

    return Tensor._result(
        np.concatenate([t.data for t in tensors], axis=ax), tensors, back, "concat"
    )


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {old} as {shape}") from None
    return Tensor._result(out, (a,), lambda g: (g.reshape(old),), "reshape")


def index_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows ``a[idx]``; gradient scatters back with accumulation."""
    idx = np.asarray(idx, dtype=np.int64)
    shape = a.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return Tensor._result(a.data[idx], (a,), back, "index_rows")


def square(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._result(ad * ad, (a,), lambda g: (2.0 * ad * g,), "square")


def rsqrt(a: Tensor, eps: float = 0.0) -> Tensor:
    """(a + eps) ** -1/2."""
    r = 1.0 / np.sqrt(a.data + eps)
    return Tensor._result(r, (a,), lambda g: (-0.5 * g * r**3,), "rsqrt")


def sqrt(a: Tensor, eps: float = 0.0) -> Tensor:
    s = np.sqrt(a.data + eps)
    return Tensor._result(s, (a,), lambda g: (0.5 * g / s,), "sqrt")
