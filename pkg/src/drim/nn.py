"""Parameters, modules and the small set of layers the models are built from."""
from __future__ import annotations

from contextlib import contextmanager
from typing import Iterator

import numpy as np

from .autograd import Tensor, dropout, gelu, get_default_dtype, sigmoid


class Parameter(Tensor):
    """A trainable leaf tensor.  ``name`` is filled in by the owning module."""

    __slots__ = ("name", "trainable")

    def __init__(self, data, name: str = "", trainable: bool = True, dtype=None):
        super().__init__(data, requires_grad=trainable, dtype=dtype)
        self.name = name
        self.trainable = trainable

    def set_trainable(self, flag: bool) -> None:
        self.trainable = bool(flag)
        self.requires_grad = bool(flag)
        if not flag:
            self.grad = None


class Module:
    """Container that discovers parameters and submodules from its attributes."""

    training: bool = True

    def _children(self) -> Iterator[tuple[str, object]]:
        for key, value in vars(self).items():
            if isinstance(value, (Parameter, Module)):
                yield key, value
            elif isinstance(value, (list, tuple)) and value and all(
                isinstance(v, (Parameter, Module)) for v in value
            ):
                for i, v in enumerate(value):
                    yield f"{key}.{i}", v

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in self._children():
            full = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield full, value
            else:
                yield from value.named_parameters(full + ".")

    def parameters(self, trainable_only: bool = False) -> list[Parameter]:
        params = [p for _, p in self.named_parameters()]
        if trainable_only:
            params = [p for p in params if p.trainable]
        return params

    def assign_names(self, prefix: str = "") -> None:
        for name, p in self.named_parameters(prefix):
            p.name = name

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.set_trainable(flag)

    def set_dropout_rng(self, rng: np.random.Generator | None) -> None:
        for m in self.modules():
            if isinstance(m, FeedForward):
                m.rng = rng

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters(prefix)}

    def load_state_dict(self, state: dict[str, np.ndarray], prefix: str = "") -> None:
        own = dict(self.named_parameters(prefix))
        missing = sorted(set(own) - set(state))
        if missing:
            raise KeyError(f"missing parameters in state: {missing[:5]}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.data.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.data.shape}")
            p.data = arr.astype(p.data.dtype, copy=True)


@contextmanager
def frozen(module: Module):
    """Temporarily stop gradients from reaching ``module``'s parameters.

    Graphs built inside the block treat the parameters as constants, so a
    later ``backward`` leaves their ``grad`` untouched.
    """
    params = module.parameters()
    saved = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield module
    finally:
        for p, flag in zip(params, saved):
            p.requires_grad = flag


class Linear(Module):
    """``y = x @ W + b`` with ``W`` stored as ``(in, out)``; in*out + out parameters."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True):
        bound = 1.0 / np.sqrt(in_dim)
        dtype = get_default_dtype()
        self.weight = Parameter(rng.uniform(-bound, bound, size=(in_dim, out_dim)), dtype=dtype)
        self.bias = Parameter(rng.uniform(-bound, bound, size=(out_dim,)), dtype=dtype) if bias else None
        self.in_dim, self.out_dim = in_dim, out_dim

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class FeedForward(Module):
    """Stack of linear layers with GELU and dropout between them.

    ``dims`` lists the widths including input and output.  If ``out_sigmoid``
    the last layer is squashed into (0, 1).
    """

    def __init__(self, dims, rng: np.random.Generator, dropout: float = 0.0, out_sigmoid: bool = False):
        if len(dims) < 2:
            raise ValueError("FeedForward needs at least input and output widths")
        self.layers = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]
        self.dims = tuple(dims)
        self.p = dropout
        self.out_sigmoid = out_sigmoid
        self.rng = None  # dropout rng, set by the training loop

    def named_parameters(self, prefix: str = ""):
        for i, layer in enumerate(self.layers, start=1):
            yield from layer.named_parameters(f"{prefix}layer{i}.")

    def modules(self):
        yield self
        yield from self.layers

    def __call__(self, x: Tensor) -> Tensor:
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < last:
                x = gelu(x)
                x = dropout(x, self.p, self.training, self.rng)
        return sigmoid(x) if self.out_sigmoid else x


def count_feedforward(dims) -> int:
    return int(sum(a * b + b for a, b in zip(dims[:-1], dims[1:])))
