"""Dense arrays with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array and, when it takes part in a tracked
computation, remembers the operation that produced it.  Calling
:func:`backward` on a scalar walks that graph in reverse topological order and
accumulates ``d root / d leaf`` into the ``grad`` buffer of every tracked leaf.

Only the operations the models in this package need are provided.  Binary
elementwise operations follow numpy broadcasting; gradients are summed back
over broadcast axes.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

_DEFAULT_DTYPE = np.float64

_SQRT_2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def set_default_dtype(dtype) -> None:
    """Set the float type used for new tensors (``float64`` or ``float32``)."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float64, np.float32):
        raise ValueError(f"unsupported dtype {dtype}; use float64 or float32")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        joined = " and ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = _DEFAULT_DTYPE
        self.data = np.array(data, dtype=dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None
        self.op = "leaf"

    # -- construction helpers ------------------------------------------------

    @classmethod
    def _result(cls, data, parents: Sequence["Tensor"], backward, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            # untracked parents are dropped now, so toggling requires_grad later
            # (e.g. leaving a frozen block) cannot route gradient into them
            out._parents = tuple(p if p.requires_grad else None for p in parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # -- operator sugar --------------------------------------------------------

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sigmoid(self):
        return sigmoid(self)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _binary(op: str, a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError(f"{op}: at least one operand must be a Tensor")
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None
    return a, b


# -- elementwise arithmetic ---------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _binary("add", a, b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._result(a.data + b.data, (a, b), back, "add")


def sub(a, b) -> Tensor:
    a, b = _binary("sub", a, b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._result(a.data - b.data, (a, b), back, "sub")


def mul(a, b) -> Tensor:
    a, b = _binary("mul", a, b)

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._result(a.data * b.data, (a, b), back, "mul")


def div(a, b) -> Tensor:
    a, b = _binary("div", a, b)

    def back(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor._result(a.data / b.data, (a, b), back, "div")


def neg(a: Tensor) -> Tensor:
    return Tensor._result(-a.data, (a,), lambda g: (-g,), "neg")


# -- linear algebra and shape manipulation ------------------------------------


def _swap_last(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def back(g):
        ga = _unbroadcast(g @ _swap_last(b.data), a.shape)
        gb = _unbroadcast(_swap_last(a.data) @ g, b.shape)
        return ga, gb

    return Tensor._result(a.data @ b.data, (a, b), back, "matmul")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; by default swaps the last two."""
    if axes is None:
        if a.ndim < 2:
            raise ShapeError("transpose", a.shape)
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return Tensor._result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None
    return Tensor._result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(t.shape for t in tensors)) from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def back(g):
        return tuple(
            np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return Tensor._result(out, tensors, back, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = []
    for t in tensors:
        ax = axis if axis >= 0 else t.ndim + 1 + axis
        expanded.append(reshape(t, t.shape[:ax] + (1,) + t.shape[ax:]))
    return concat(expanded, axis=axis)


def getitem(a: Tensor, index) -> Tensor:
    """Basic and integer-array indexing; gradients scatter-add back."""
    out = a.data[index]

    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._result(np.array(out, copy=True), (a,), back, "getitem")


def take_rows(a: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.intp)
    if idx.ndim != 1 or (idx.size and (idx.min() < -a.shape[0] or idx.max() >= a.shape[0])):
        raise ShapeError("take_rows", a.shape, idx.shape)
    return getitem(a, idx)


def permute_rows(a: Tensor, perm) -> Tensor:
    """Row shuffle: ``out[i] = a[perm[i]]``.  ``perm`` must be a permutation."""
    perm = np.asarray(perm, dtype=np.intp)
    if perm.shape != (a.shape[0],) or not np.array_equal(np.sort(perm), np.arange(a.shape[0])):
        raise ValueError(f"permute_rows: not a permutation of {a.shape[0]} rows")
    inverse = np.argsort(perm)
    return Tensor._result(a.data[perm], (a,), lambda g: (g[inverse],), "permute_rows")


def masked_fill(a: Tensor, keep, value: float) -> Tensor:
    """Replace entries where ``keep`` is False with the constant ``value``."""
    keep = np.asarray(keep, dtype=bool)
    try:
        keep = np.broadcast_to(keep, a.shape)
    except ValueError:
        raise ShapeError("masked_fill", a.shape, keep.shape) from None
    out = np.where(keep, a.data, np.asarray(value, dtype=a.dtype))
    return Tensor._result(out, (a,), lambda g: (np.where(keep, g, 0.0),), "masked_fill")


# -- pointwise nonlinearities ---------------------------------------------------


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return Tensor._result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def gelu(a: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)``."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT_2))

    def back(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return Tensor._result(x * cdf, (a,), back, "gelu")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    out = np.clip(a.data, lo, hi)
    return Tensor._result(out, (a,), lambda g: (np.where(inside, g, 0.0),), "clip")


def softmax(a: Tensor, axis: int = -1, mask=None) -> Tensor:
    """Softmax along ``axis``; entries with ``mask`` False get exactly zero weight."""
    x = a.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        x = np.where(mask, x, -np.inf)
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return Tensor._result(out, (a,), back, "softmax")


def logsumexp(a: Tensor, axis: int = -1, keepdims: bool = False, mask=None) -> Tensor:
    """Stabilised ``log(sum(exp(x)))`` along ``axis``, optionally over masked entries only."""
    x = a.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.log(s) + m
    weights = e / s

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * weights,)

    return Tensor._result(out if keepdims else np.squeeze(out, axis=axis), (a,), back, "logsumexp")


# -- reductions -------------------------------------------------------------------


def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        return (np.array(_expand_reduced(g, a.shape, axis, keepdims)),)

    return Tensor._result(np.asarray(out), (a,), back, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size // max(np.asarray(out).size, 1)

    def back(g):
        return (np.array(_expand_reduced(g, a.shape, axis, keepdims)) / count,)

    return Tensor._result(np.asarray(out), (a,), back, "mean")


def row_norm(a: Tensor) -> Tensor:
    """Euclidean norm of each row of a 2-D tensor, shape ``(N, 1)``."""
    if a.ndim != 2:
        raise ShapeError("row_norm", a.shape)
    norm = np.sqrt((a.data * a.data).sum(axis=1, keepdims=True))

    def back(g):
        safe = np.where(norm > 0, norm, 1.0)
        return (np.where(norm > 0, g * a.data / safe, 0.0),)

    return Tensor._result(norm, (a,), back, "row_norm")


def l2_normalize_rows(a: Tensor, eps: float = 1e-12) -> Tensor:
    norm = row_norm(a)
    return a / clip(norm, eps, np.inf)


def sum_squared_error(pred: Tensor, target, axis=None) -> Tensor:
    target = as_tensor(target, like=pred)
    if pred.shape != target.shape:
        raise ShapeError("sum_squared_error", pred.shape, target.shape)
    diff = pred - target
    return sum_(diff * diff, axis=axis)


def dropout(a: Tensor, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: identity in eval mode, rescaled by ``1/(1-p)`` in training."""
    if not training or p == 0.0:
        return a
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if rng is None:
        raise ValueError("dropout in training mode needs an explicit rng")
    keep = (rng.random(a.shape) >= p).astype(a.dtype) / (1.0 - p)
    return Tensor._result(a.data * keep, (a,), lambda g: (g * keep,), "dropout")


# -- backward pass ----------------------------------------------------------------


def _topological_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent is not None and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate ``d root / d leaf`` into ``leaf.grad`` for every tracked leaf."""
    if root.data.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    grads = {id(root): np.ones_like(root.data)}
    for node in reversed(_topological_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or parent is None:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# -- finite-difference verification -------------------------------------------------


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    tol: float
    checked: dict[str, int] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tol

    def __bool__(self) -> bool:
        return self.passed


def _scalar(f: Callable[[], Tensor]) -> float:
    value = f()
    value = value.item() if isinstance(value, Tensor) else float(value)
    if not np.isfinite(value):
        raise FloatingPointError(f"grad_check: objective is not finite ({value})")
    return value


def grad_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    eps: float = 1e-6,
    tol: float = 1e-4,
    floor: float = 1e-6,
    max_checks: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare reverse-mode gradients of ``f()`` with central differences.

    ``f`` takes no arguments and must rebuild its graph from the current
    parameter values on every call.  The error of one element is
    ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``; the report
    holds the maximum per parameter.  ``max_checks`` caps how many randomly
    chosen elements of each parameter are probed.
    """
    params = list(params)
    if eps <= 0:
        raise ValueError("eps must be positive")
    for p in params:
        p.grad = None
    root = f()
    if not np.isfinite(root.data).all():
        raise FloatingPointError("grad_check: objective is not finite")
    backward(root)
    rng = np.random.default_rng(seed)
    errors, checked = {}, {}
    for k, p in enumerate(params):
        name = getattr(p, "name", None) or f"param{k}"
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_checks is not None and flat.size > max_checks:
            idx = rng.choice(flat.size, size=max_checks, replace=False)
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            up = _scalar(f)
            flat[i] = orig - eps
            down = _scalar(f)
            flat[i] = orig
            numeric = (up - down) / (2.0 * eps)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
        errors[name] = float(worst)
        checked[name] = len(idx)
    return GradCheckReport(errors=errors, tol=tol, checked=checked)
