"""Parameter containers and the leaf layers shared by every network here.

Naming: ``named_parameters`` walks the attribute tree in insertion order,
joining names with dots (lists contribute their index), so a deterministically
constructed model yields a deterministic name -> tensor table. Checkpoints
key on those names.
"""

from __future__ import annotations

import contextlib
import math
from typing import Iterator, Optional, Tuple

import numpy as np

from . import tensor as T


class Parameter(T.Tensor):
    __slots__ = ()

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


class Module:
    def __init__(self):
        self.training = True

    def _children(self):
        for name, obj in vars(self).items():
            if isinstance(obj, (Parameter, Module)):
                yield name, obj
            elif isinstance(obj, (list, tuple)):
                for i, item in enumerate(obj):
                    if isinstance(item, (Parameter, Module)):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, obj in self._children():
            full = f"{prefix}{name}"
            if isinstance(obj, Parameter):
                yield full, obj
            else:
                yield from obj.named_parameters(prefix=full + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def train(self, flag: bool = True):
        self.training = flag
        for _, obj in self._children():
            if isinstance(obj, Module):
                obj.train(flag)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def n_params(self) -> int:
        return sum(p.data.size for p in self.parameters())


# -- dropout noise source ------------------------------------------------------

# Training wraps each optimization step in dropout_rng(...) so mask draws are
# reproducible from the step key; outside the context dropout refuses to run
# rather than silently skipping regularization.


class _DropState:
    rng: Optional[np.random.Generator] = None


_drop = _DropState()


@contextlib.contextmanager
def dropout_rng(rng: np.random.Generator):
    prev = _drop.rng
    _drop.rng = rng
    try:
        yield
    finally:
        _drop.rng = prev


class Dropout(Module):
    def __init__(self, rate: float):
        super().__init__()
        self.rate = float(rate)

    def __call__(self, x: T.Tensor) -> T.Tensor:
        if not self.training or self.rate == 0.0:
            return x
        if _drop.rng is None:
            raise RuntimeError("dropout in training mode needs dropout_rng(...); "
                               "call eval() for inference")
        return T.dropout(x, self.rate, _drop.rng, True)


# -- leaf layers ----------------------------------------------------------------


def glorot(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_out, fan_in))


class Linear(Module):
    """y = W x (+ b) on feature-first inputs (..., in_dim, N)."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 bias: bool = True):
        super().__init__()
        self.w = Parameter(glorot(rng, out_dim, in_dim))
        self.b = Parameter(np.zeros((out_dim, 1))) if bias else None

    def __call__(self, x: T.Tensor) -> T.Tensor:
        y = T.matmul(self.w, x)
        if self.b is not None:
            y = y + self.b
        return y


class Embedding(Module):
    """(dim, vocab) table; call with a 1-D id sequence, returns (dim, N)."""

    def __init__(self, dim: int, vocab: int, rng: np.random.Generator):
        super().__init__()
        self.table = Parameter(rng.standard_normal((dim, vocab)) / math.sqrt(dim))

    def __call__(self, ids) -> T.Tensor:
        return T.embedding_cols(self.table, ids)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.gain = Parameter(np.ones((dim, 1)))
        self.bias = Parameter(np.zeros((dim, 1)))
        self.eps = eps

    def __call__(self, x: T.Tensor) -> T.Tensor:
        return T.layer_norm(x, self.gain, self.bias, self.eps)
