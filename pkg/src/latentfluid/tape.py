"""Reverse-mode automatic differentiation on float64 numpy arrays.

A small tape/graph engine. Every op records its parents and a vector-Jacobian
closure; `backward` walks the graph in reverse topological order and
accumulates gradients into leaf tensors (gradients add across fan-out and
across repeated backward calls; zero them explicitly). Values are always
float64 ndarrays, so given fixed inputs and seeds every forward and backward
pass is bitwise reproducible.

Elementwise binary ops follow numpy broadcasting; the backward pass sums
gradients over broadcast axes. matmul is restricted to 2-D operands, which is
all the models here need (higher-rank contractions are expressed by reshape).
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

from .backend import scatter_add_rows
from .errors import ContractViolation, DomainError

Array = np.ndarray

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation-only rollouts)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A value in the computation graph.

    Leaf tensors created with requires_grad=True receive gradients in .grad.
    Intermediate tensors hold their parents and a vjp closure instead.
    """

    __slots__ = ("value", "requires_grad", "grad", "parents", "_vjp")

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None
        self.parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[Array], Sequence[Array | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.value)

    # -- operator sugar -------------------------------------------------
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _record(value: Array, parents: tuple[Tensor, ...], vjp) -> Tensor:
    out = Tensor(value)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out._vjp = vjp
    return out


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Reduce a gradient back to the shape of a broadcast operand."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, opname: str) -> None:
    try:
        np.broadcast_shapes(a.value.shape, b.value.shape)
    except ValueError:
        raise ContractViolation(
            f"{opname}: operands not broadcast-compatible: {a.value.shape} vs {b.value.shape}"
        ) from None


# -- arithmetic ---------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _record(
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _record(
        a.value - b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.value.shape), _unbroadcast(-g, b.value.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _record(
        a.value * b.value,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.value, a.value.shape),
            _unbroadcast(g * a.value, b.value.shape),
        ),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    return _record(
        a.value / b.value,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.value, a.value.shape),
            _unbroadcast(-g * a.value / (b.value * b.value), b.value.shape),
        ),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record(-a.value, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ContractViolation(
            f"matmul expects 2-D operands, got {a.value.shape} and {b.value.shape}"
        )
    if a.value.shape[1] != b.value.shape[0]:
        raise ContractViolation(
            f"matmul inner dimensions differ: {a.value.shape} @ {b.value.shape}"
        )
    return _record(
        a.value @ b.value,
        (a, b),
        lambda g: (g @ b.value.T, a.value.T @ g),
    )


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    if p != round(p) and np.any(a.value < 0.0):
        raise DomainError(f"power: negative base with non-integer exponent {p}")
    val = a.value**p
    return _record(val, (a,), lambda g: (g * p * a.value ** (p - 1.0),))


def maximum(a, c: float) -> Tensor:
    """Elementwise max with a scalar constant; subgradient 0 at the tie."""
    a = as_tensor(a)
    c = float(c)
    return _record(np.maximum(a.value, c), (a,), lambda g: (g * (a.value > c),))


def absval(a) -> Tensor:
    a = as_tensor(a)
    return _record(np.abs(a.value), (a,), lambda g: (g * np.sign(a.value),))


# -- transcendental -----------------------------------------------------


def exp(a) -> Tensor:
    a = as_tensor(a)
    val = np.exp(a.value)
    return _record(val, (a,), lambda g: (g * val,))


def expm1(a) -> Tensor:
    a = as_tensor(a)
    return _record(np.expm1(a.value), (a,), lambda g: (g * np.exp(a.value),))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.value <= 0.0):
        raise DomainError("log: argument must be strictly positive")
    return _record(np.log(a.value), (a,), lambda g: (g / a.value,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.value < 0.0):
        raise DomainError("sqrt: argument must be nonnegative")
    val = np.sqrt(a.value)
    return _record(val, (a,), lambda g: (g * (0.5 / val),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    val = np.tanh(a.value)
    return _record(val, (a,), lambda g: (g * (1.0 - val * val),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    val = 1.0 / (1.0 + np.exp(-a.value))
    return _record(val, (a,), lambda g: (g * val * (1.0 - val),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    return _record(np.maximum(a.value, 0.0), (a,), lambda g: (g * (a.value > 0.0),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    val = np.logaddexp(0.0, a.value)
    return _record(val, (a,), lambda g: (g / (1.0 + np.exp(-a.value)),))


def sin(a) -> Tensor:
    a = as_tensor(a)
    return _record(np.sin(a.value), (a,), lambda g: (g * np.cos(a.value),))


def cos(a) -> Tensor:
    a = as_tensor(a)
    return _record(np.cos(a.value), (a,), lambda g: (g * -np.sin(a.value),))


# -- reductions and shape -----------------------------------------------


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    val = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.value.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.value.shape).copy(),)

    return _record(val, (a,), vjp)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.value.size
    else:
        n = a.value.shape[axis]
    s = tsum(a, axis=axis, keepdims=keepdims)
    return mul(s, 1.0 / n)


def reduce_max(a, axis: int) -> Tensor:
    """Max over one axis; gradient splits equally among tied maxima."""
    a = as_tensor(a)
    val = a.value.max(axis=axis)

    def vjp(g):
        expanded = np.expand_dims(val, axis)
        mask = (a.value == expanded).astype(np.float64)
        mask /= mask.sum(axis=axis, keepdims=True)
        return (mask * np.expand_dims(g, axis),)

    return _record(val, (a,), vjp)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    val = a.value.reshape(shape)
    return _record(val, (a,), lambda g: (g.reshape(a.value.shape),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    val = np.concatenate([t.value for t in ts], axis=axis)
    sizes = [t.value.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(val, tuple(ts), vjp)


def col(a, j: int) -> Tensor:
    """Select one column of a 2-D tensor as a 1-D tensor."""
    a = as_tensor(a)
    if a.value.ndim != 2:
        raise ContractViolation(f"col expects a 2-D tensor, got shape {a.value.shape}")
    val = a.value[:, j].copy()

    def vjp(g):
        out = np.zeros_like(a.value)
        out[:, j] = g
        return (out,)

    return _record(val, (a,), vjp)


def cumsum(a, axis: int) -> Tensor:
    a = as_tensor(a)
    val = np.cumsum(a.value, axis=axis)

    def vjp(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return _record(val, (a,), vjp)


def gather(a, idx: np.ndarray) -> Tensor:
    """Take rows of a (axis 0) at integer indices; backward scatter-adds."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise ContractViolation(f"gather index must be 1-D, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.value.shape[0]):
        raise ContractViolation(
            f"gather index out of range [0, {a.value.shape[0]}): min={idx.min()} max={idx.max()}"
        )
    val = a.value[idx]

    def vjp(g):
        flat = g.reshape(g.shape[0], -1) if g.ndim > 1 else g.reshape(g.shape[0], 1)
        out = scatter_add_rows(idx, np.ascontiguousarray(flat), a.value.shape[0])
        return (out.reshape(a.value.shape),)

    return _record(val, (a,), vjp)


def scatter_add(src, idx: np.ndarray, nrows: int) -> Tensor:
    """out[k] = sum of src rows j with idx[j] == k; backward gathers."""
    src = as_tensor(src)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape[0] != src.value.shape[0]:
        raise ContractViolation(
            f"scatter_add: index length {idx.shape} does not match rows {src.value.shape}"
        )
    if idx.size and (idx.min() < 0 or idx.max() >= nrows):
        raise ContractViolation(
            f"scatter_add index out of range [0, {nrows}): min={idx.min()} max={idx.max()}"
        )
    ncols = int(np.prod(src.value.shape[1:])) if src.value.ndim > 1 else 1
    flat = src.value.reshape(src.value.shape[0], ncols)
    out = scatter_add_rows(idx, np.ascontiguousarray(flat), nrows)
    val = out.reshape((nrows,) + src.value.shape[1:])

    def vjp(g):
        return (g[idx],)

    return _record(val, (src,), vjp)


# -- backward pass ------------------------------------------------------


def backward(root: Tensor) -> None:
    """Accumulate d root / d leaf into every reachable leaf's .grad."""
    if root.value.size != 1:
        raise ContractViolation(f"backward root must be scalar, got shape {root.value.shape}")
    if not root.requires_grad:
        return

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
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, Array] = {id(root): np.ones_like(root.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# -- finite-difference checking ------------------------------------------


def gradcheck(f, inputs: Sequence[Array], step: float = 1e-5) -> float:
    """Compare analytic gradients of scalar f against central differences.

    Returns the max relative error |analytic - fd| / max(1, |fd|) over all
    coordinates of all inputs. Non-finite values anywhere are reported as a
    failure naming the offending input and coordinate.
    """
    tensors = [Tensor(np.asarray(x, dtype=np.float64), requires_grad=True) for x in inputs]
    out = f(*tensors)
    if out.value.size != 1:
        raise ContractViolation("gradcheck target must be scalar")
    backward(out)
    analytic = [
        t.grad if t.grad is not None else np.zeros_like(t.value) for t in tensors
    ]

    def eval_at(vals: list[Array]) -> float:
        with no_grad():
            return float(f(*[Tensor(v) for v in vals]).value)

    base = [t.value.copy() for t in tensors]
    worst = 0.0
    for k, x in enumerate(base):
        flat = x.reshape(-1)
        a_flat = analytic[k].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = eval_at(base)
            flat[i] = orig - step
            dn = eval_at(base)
            flat[i] = orig
            fd = (up - dn) / (2.0 * step)
            if not np.isfinite(fd) or not np.isfinite(a_flat[i]):
                raise DomainError(
                    f"gradcheck: non-finite derivative at input {k}, coordinate {i} "
                    f"(analytic={a_flat[i]}, fd={fd})"
                )
            err = abs(a_flat[i] - fd) / max(1.0, abs(fd))
            if err > worst:
                worst = err
    return worst
