"""Dense float64 tensors with a reverse-mode differentiation tape.

Only the operations the fusion model needs are provided. Every operation
returns a new :class:`Tensor`; recorded values are never mutated, so a node
may feed any number of consumers and its gradient accumulates additively.

>>> x = Tensor([1.0, 2.0], requires_grad=True)
>>> backward(sum(x * x))[x]
array([2., 4.])
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

MAX_RANK = 4

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327

# op names whose backward pass is deliberately negated (negative-control tests)
_SIGN_FLIP: set[str] = set()


class ShapeError(ValueError):
    pass


class NonFiniteError(ArithmeticError):
    pass


class Tensor:
    """Row-major float64 array of rank 1-4, optionally tracked by the tape."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")
    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        arr = np.array(data, dtype=np.float64)  # always a private copy
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if arr.ndim > MAX_RANK:
            raise ShapeError(f"rank {arr.ndim} exceeds {MAX_RANK}: shape {arr.shape}")
        if arr.size == 0:
            raise ShapeError(f"empty tensor: shape {arr.shape}")
        _check_finite(arr, op)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.op = op
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dims(self) -> list[int]:
        return list(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        bad = np.argwhere(~np.isfinite(arr))[0]
        raise NonFiniteError(f"{op} produced a non-finite value at index {tuple(int(i) for i in bad)}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, op="const")


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    if data.ndim == 0:
        data = data.reshape(1)
    if data.ndim > MAX_RANK:
        raise ShapeError(f"{op}: result rank {data.ndim} exceeds {MAX_RANK}")
    _check_finite(data, op)
    out.data = data
    out.grad = None
    out.op = op
    out.requires_grad = any(p.requires_grad for p in parents)
    out._parents = tuple(parents) if out.requires_grad else ()
    out._backward = backward if out.requires_grad else None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- arithmetic ---------------------------------------------------------------

def _binary_shapes(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot combine shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("add", a, b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("sub", a, b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("mul", a, b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                 "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("div", a, b)
    out = a.data / b.data

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape))

    return _node(out, (a, b), bw, "div")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``a @ b``.

    Operands are rank 2 or 3; a rank-2 operand is shared across the batch of
    the other. Batch dims must otherwise agree.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (2, 3) or b.ndim not in (2, 3):
        raise ShapeError(f"matmul: operands must be rank 2 or 3, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ for {a.shape} @ {b.shape}")
    if a.ndim == 3 and b.ndim == 3 and a.shape[0] != b.shape[0]:
        raise ShapeError(f"matmul: batch dims differ for {a.shape} @ {b.shape}")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(a.data @ b.data, (a, b), bw, "matmul")


def linear(x: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ w + bias`` with the bias broadcast over every leading axis."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input width {x.shape[-1]} does not match weight {w.shape}")
    if bias is not None and bias.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias shape {bias.shape} does not match weight {w.shape}")
    if x.ndim == 2 or x.ndim == 3:
        out = matmul(x, w)
    else:
        lead = x.shape[:-1]
        out = reshape(matmul(reshape(x, (-1, x.shape[-1])), w), lead + (w.shape[1],))
    return out if bias is None else add(out, bias)


# -- pointwise ------------------------------------------------------------------

def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _node(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        y = np.exp(x.data)
    return _node(y, (x,), lambda g: (g * y,), "exp")


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(x.data)
    return _node(y, (x,), lambda g: (g / x.data,), "log")


def gelu(x: Tensor) -> Tensor:
    """Exact GeLU, ``x * Phi(x)`` with the Gaussian CDF."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
    return _node(x.data * cdf, (x,), lambda g: (g * (cdf + x.data * pdf),), "gelu")


_ELEMENTWISE = {"tanh": tanh, "exp": exp, "gelu": gelu}


def elementwise(x: Tensor, kind: str) -> Tensor:
    try:
        return _ELEMENTWISE[kind](x)
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None


# -- reductions and normalisation -------------------------------------------------

def _axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {x.shape}")
    return axis % x.ndim


def sum(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    if axis is None:
        return _node(np.array([x.data.sum()]), (x,),
                     lambda g: (np.broadcast_to(g.reshape(()), x.shape).copy(),), "sum")
    ax = _axis(x, axis)
    y = x.data.sum(axis=ax, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(y, (x,), bw, "sum")


def mean(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else x.shape[_axis(x, axis)]
    return mul(sum(x, axis, keepdims), 1.0 / n)


def softmax_over_axis(x: Tensor, axis: int) -> Tensor:
    ax = _axis(x, axis)
    z = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=ax, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=ax, keepdims=True)),)

    return _node(y, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int) -> Tensor:
    ax = _axis(x, axis)
    z = x.data - x.data.max(axis=ax, keepdims=True)
    y = z - np.log(np.exp(z).sum(axis=ax, keepdims=True))

    def bw(g):
        return (g - np.exp(y) * g.sum(axis=ax, keepdims=True),)

    return _node(y, (x,), bw, "log_softmax")


# -- structural -------------------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        y = x.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None
    return _node(y.copy(), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    if x.ndim < 2:
        raise ShapeError(f"transpose needs rank >= 2, got {x.shape}")
    y = np.ascontiguousarray(np.swapaxes(x.data, -1, -2))
    return _node(y, (x,), lambda g: (np.ascontiguousarray(np.swapaxes(g, -1, -2)),), "transpose")


def transpose_token_channel(x: Tensor) -> Tensor:
    """B x T x D -> B x D x T."""
    if x.ndim != 3:
        raise ShapeError(f"transpose_token_channel needs rank 3, got {x.shape}")
    return transpose(x)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = _axis(tensors[0], axis)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat on axis {ax}: incompatible shapes {[t.shape for t in tensors]}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def bw(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=ax) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _node(np.concatenate([t.data for t in tensors], axis=ax), tensors, bw, "concat")


def concat_token_axis(a: Tensor, b: Tensor) -> Tensor:
    """Stack B x M x D and B x N x D into B x (M+N) x D, ``a`` first."""
    if a.ndim != 3 or b.ndim != 3:
        raise ShapeError(f"concat_token_axis needs rank-3 operands, got {a.shape} and {b.shape}")
    if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[2]:
        raise ShapeError(f"concat_token_axis: batch/channel mismatch {a.shape} vs {b.shape}")
    return concat([a, b], axis=1)


def slice_axis(x: Tensor, start: int, stop: int, axis: int) -> Tensor:
    ax = _axis(x, axis)
    index = [slice(None)] * x.ndim
    index[ax] = slice(start, stop)
    index = tuple(index)
    y = x.data[index].copy()
    if y.size == 0:
        raise ShapeError(f"slice_axis: empty slice [{start}:{stop}] of axis {ax} in {x.shape}")

    def bw(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return _node(y, (x,), bw, "slice")


def split_last_axis(x: Tensor) -> tuple[Tensor, Tensor]:
    n = x.shape[-1]
    if n % 2:
        raise ShapeError(f"split_last_axis: last dim {n} is odd in {x.shape}")
    return slice_axis(x, 0, n // 2, -1), slice_axis(x, n // 2, n, -1)


def take(x: Tensor, indices, axis: int) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate in the backward pass."""
    ax = _axis(x, axis)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[ax]):
        raise IndexError(f"take: index out of range for axis {ax} of size {x.shape[ax]}")
    y = np.take(x.data, idx, axis=ax)

    def bw(g):
        full = np.zeros_like(x.data)
        moved = np.moveaxis(full, ax, 0)
        np.add.at(moved, idx, np.moveaxis(g, tuple(range(ax, ax + idx.ndim)), tuple(range(idx.ndim))))
        return (full,)

    return _node(np.ascontiguousarray(y), (x,), bw, "take")


# -- tape ---------------------------------------------------------------------------

def _topological(root: Tensor) -> list[Tensor]:
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


def backward(root: Tensor) -> dict[Tensor, np.ndarray]:
    """Propagate d(root) to every requires-grad leaf.

    Leaf ``.grad`` fields accumulate; the returned mapping holds this call's
    contribution per leaf.
    """
    if root.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return {}
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(_topological(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            leaves[node] = g
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        if node.op in _SIGN_FLIP:
            parent_grads = tuple(-pg for pg in parent_grads)
        for p, pg in zip(node._parents, parent_grads):
            if not p.requires_grad:
                continue
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg
    return leaves


@contextlib.contextmanager
def inject_sign_flip(op: str):
    """Negate the backward pass of ``op`` inside the block (negative control)."""
    _SIGN_FLIP.add(op)
    try:
        yield
    finally:
        _SIGN_FLIP.discard(op)


def parameters(*tensors: Tensor | Iterable[Tensor]) -> list[Tensor]:
    out: list[Tensor] = []
    for t in tensors:
        out.extend([t] if isinstance(t, Tensor) else t)
    return out
