"""Dense float64 tensors with reverse-mode differentiation.

Every op records its parents and a closure mapping the output gradient to
one gradient per parent. ``backward`` walks the graph once in reverse
topological order. Broadcasting is limited to scalar-with-tensor and
same-shape operands; per-column affine maps go through the fused
``linear`` and ``batchnorm`` ops instead.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Iterator, Optional, Sequence

import numpy as np

from megan.errors import ContractError, DegenerateBatchError, DimensionError, NumericDomainError

DTYPE = np.float64
_EXP_MAX = np.log(np.finfo(DTYPE).max)

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "retains_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _backward: BackwardFn | None = None, op: str = ""):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.retains_grad = False
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Row-major flat view of the data."""
        return self.data.reshape(-1)

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def retain_grad(self) -> "Tensor":
        self.retains_grad = True
        return self

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f", op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __truediv__ = lambda self, other: div(self, other)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, other: matmul(self, other)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=requires_grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DTYPE))


def custom_op(data: np.ndarray, parents: tuple, backward_fn: BackwardFn, op: str) -> Tensor:
    """Wrap a forward result as a graph node; ``backward_fn`` maps the output
    gradient to one gradient (or None) per parent."""
    if not _GRAD_ENABLED[0] or not any(p.requires_grad for p in parents):
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward_fn, op=op)


_GRAD_ENABLED = [True]


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Build no graph inside the block; results are plain constants."""
    prev = _GRAD_ENABLED[0]
    _GRAD_ENABLED[0] = False
    try:
        yield
    finally:
        _GRAD_ENABLED[0] = prev


# -- graph traversal ---------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _reaching(order: list[Tensor], targets: Iterable[Tensor]) -> set[int]:
    """Ids of nodes in ``order`` lying on some path down to a target."""
    live = {id(t) for t in targets}
    for node in order:  # parents precede children in topological order
        if any(id(p) in live for p in node._parents):
            live.add(id(node))
    return live


def _propagate(loss: Tensor, restrict: Iterable[Tensor] | None) -> dict[int, tuple[Tensor, np.ndarray]]:
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    order = _topo_order(loss)
    live = _reaching(order, restrict) if restrict is not None else None
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    done: dict[int, tuple[Tensor, np.ndarray]] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf or node.retains_grad:
            done[id(node)] = (node, g)
        if node.is_leaf:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if live is not None and id(p) not in live:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return done


def backward(loss: Tensor, restrict: Iterable[Tensor] | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    ``restrict`` limits propagation to paths ending at the given tensors, so
    branches that only feed other leaves are never evaluated. Gradients add
    onto existing ``.grad`` values until explicitly zeroed.
    """
    restrict = list(restrict) if restrict is not None else None
    for node, g in _propagate(loss, restrict).values():
        if not node.is_leaf and not node.retains_grad:
            continue
        if node.grad is None:
            node.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            node.grad += g


def grad(loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of ``loss`` with respect to ``wrt`` without touching ``.grad``."""
    flags = [t.retains_grad for t in wrt]
    for t in wrt:
        t.retains_grad = True
    try:
        done = _propagate(loss, wrt)
    finally:
        for t, f in zip(wrt, flags):
            t.retains_grad = f
    return [done[id(t)][1] if id(t) in done else np.zeros_like(t.data) for t in wrt]


# -- elementwise -------------------------------------------------------------

def _shape_ok(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.data.size != 1 and b.data.size != 1:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, t: Tensor) -> np.ndarray:
    if g.shape == t.shape:
        return g
    return np.asarray(g.sum(), dtype=DTYPE).reshape(t.shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _shape_ok(a, b, "add")
    return custom_op(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _shape_ok(a, b, "sub")
    return custom_op(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _shape_ok(a, b, "mul")
    ad, bd = a.data, b.data
    return custom_op(ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, a), _unbroadcast(g * ad, b)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _shape_ok(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return custom_op(out, (a, b), lambda g: (_unbroadcast(g / bd, a), _unbroadcast(-g * out / bd, b)), "div")


def neg(x) -> Tensor:
    x = as_tensor(x)
    return custom_op(-x.data, (x,), lambda g: (-g,), "neg")


def square(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return custom_op(xd * xd, (x,), lambda g: (2.0 * xd * g,), "square")


def _first_bad(mask: np.ndarray) -> tuple[int, ...]:
    return tuple(int(i) for i in np.argwhere(mask)[0])


def exp(x) -> Tensor:
    x = as_tensor(x)
    bad = ~(x.data <= _EXP_MAX)
    if bad.any():
        idx = _first_bad(bad)
        raise NumericDomainError(f"exp overflows at index {idx} (value {x.data[idx]!r})")
    out = np.exp(x.data)
    return custom_op(out, (x,), lambda g: (g * out,), "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    bad = ~(x.data > 0)
    if bad.any():
        idx = _first_bad(bad)
        raise NumericDomainError(f"log undefined at index {idx} (value {x.data[idx]!r})")
    xd = x.data
    return custom_op(np.log(xd), (x,), lambda g: (g / xd,), "log")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ez = np.exp(xd[~pos])
    out[~pos] = ez / (1.0 + ez)
    return custom_op(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(x) -> Tensor:
    """log(1 + exp(x)), evaluated without overflow."""
    x = as_tensor(x)
    xd = x.data
    out = np.logaddexp(0.0, xd)

    def bw(g):
        return (g * _sigmoid_np(xd),)

    return custom_op(out, (x,), bw, "softplus")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def relu(x) -> Tensor:
    x = as_tensor(x)
    out = np.maximum(x.data, 0.0)
    return custom_op(out, (x,), lambda g: (g * (out > 0),), "relu")


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    x = as_tensor(x)
    scale = np.where(x.data > 0, 1.0, slope)
    return custom_op(x.data * scale, (x,), lambda g: (g * scale,), "leaky_relu")


def detach(x) -> Tensor:
    x = as_tensor(x)
    return Tensor(x.data.copy(), op="detach")


# -- reductions --------------------------------------------------------------

def sum(x, axis: int | None = None) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    shape = x.shape
    if axis is None:
        return custom_op(np.asarray(x.data.sum()), (x,), lambda g: (np.full(shape, g, dtype=DTYPE),), "sum")
    out = x.data.sum(axis=axis)
    return custom_op(out, (x,), lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),), "sum")


def mean(x, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    count = x.data.size if axis is None else shape[axis]
    if axis is None:
        return custom_op(np.asarray(x.data.mean()), (x,), lambda g: (np.full(shape, g / count, dtype=DTYPE),), "mean")
    out = x.data.mean(axis=axis)
    return custom_op(out, (x,), lambda g: (np.broadcast_to(np.expand_dims(g / count, axis), shape).copy(),), "mean")


# -- linear algebra and shaping ---------------------------------------------

def matmul(a, w) -> Tensor:
    a, w = as_tensor(a), as_tensor(w)
    if a.data.ndim != 2 or w.data.ndim != 2 or a.shape[1] != w.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {w.shape}")
    ad, wd = a.data, w.data

    def bw(g):
        ga = g @ wd.T if a.requires_grad else None
        gw = ad.T @ g if w.requires_grad else None
        return ga, gw

    return custom_op(ad @ wd, (a, w), bw, "matmul")


def linear(x, w, b=None) -> Tensor:
    """x @ w + b with the bias added to every row."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"linear: cannot multiply {x.shape} by {w.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd
    if b is None:
        return custom_op(out, (x, w), lambda g: (g @ wd.T if x.requires_grad else None, xd.T @ g if w.requires_grad else None), "linear")
    b = as_tensor(b)
    if b.shape != (w.shape[1],):
        raise DimensionError(f"linear: bias shape {b.shape} does not match output width {w.shape[1]}")
    out += b.data

    def bw(g):
        gx = g @ wd.T if x.requires_grad else None
        gw = xd.T @ g if w.requires_grad else None
        gb = g.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return custom_op(out, (x, w, b), bw, "linear")


def concat(parts: Sequence, axis: int = 1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: incompatible shapes {[p.shape for p in parts]}") from exc
    return custom_op(out, tuple(parts), lambda g: tuple(np.split(g, cuts, axis=axis)), "concat")


def column(x, j: int) -> Tensor:
    """Column ``j`` of a 2-D tensor, kept as shape (b, 1)."""
    x = as_tensor(x)
    shape = x.shape

    def bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        full[:, j : j + 1] = g
        return (full,)

    return custom_op(x.data[:, j : j + 1].copy(), (x,), bw, "column")


def rows(x, index) -> Tensor:
    """Select rows by integer index or slice."""
    x = as_tensor(x)
    shape = x.shape

    def bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, index, g)
        return (full,)

    return custom_op(x.data[index].copy(), (x,), bw, "rows")


# -- normalization -----------------------------------------------------------

def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return custom_op(out, (x,), bw, "softmax")


def batchnorm(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray, training: bool, eps: float = 1e-5, momentum: float = 0.1) -> Tensor:
    """Per-column batch normalization.

    In training mode the batch statistics are used (biased variance) and
    the running buffers are updated in place with the unbiased variance.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.data.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise DimensionError(f"batchnorm: input {x.shape} with gamma {gamma.shape}, beta {beta.shape}")
    b = x.shape[0]
    gd = gamma.data
    if training:
        if b < 2:
            raise DegenerateBatchError(f"batchnorm in train mode needs at least 2 rows, got {b}")
        mu = x.data.mean(axis=0)
        xc = x.data - mu
        var = (xc * xc).mean(axis=0)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (b / (b - 1))

        def bw(g):
            dxhat = g * gd
            gx = None
            if x.requires_grad:
                gx = inv * (dxhat - dxhat.mean(axis=0) - xhat * (dxhat * xhat).mean(axis=0))
            return gx, (g * xhat).sum(axis=0), g.sum(axis=0)
    else:
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (x.data - running_mean) * inv

        def bw(g):
            return g * gd * inv, (g * xhat).sum(axis=0), g.sum(axis=0)

    return custom_op(xhat * gd + beta.data, (x, gamma, beta), bw, "batchnorm")


def one_hot(index: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((len(index), n), dtype=DTYPE)
    out[np.arange(len(index)), index] = 1.0
    return out
